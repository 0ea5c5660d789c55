//! Parameter-free latent augmentations: batch-statistics perturbation
//! (LF-UE) and random polygon spatial clipping (RPSC).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::Matrix;

/// Division guard for constant latents.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Spatial statistics of a latent batch; each inner vector has one entry per
/// channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub sigma_mu: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    libm::sqrt(values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Per-sample, per-channel spatial mean and (population) std, and the batch
/// std of both across samples.
pub fn batch_stats(batch: &[Matrix]) -> Result<BatchStats> {
    let Some(first) = batch.first() else { bail!(Argument, "empty latent batch") };
    let (pixels, channels) = first.shape();
    if batch.iter().any(|z| z.shape() != (pixels, channels)) {
        bail!(Argument, "latent shapes differ within the batch");
    }
    let mut mu = Vec::with_capacity(batch.len());
    let mut sigma = Vec::with_capacity(batch.len());
    for z in batch {
        let m: Vec<f64> = (0..channels).map(|c| (0..pixels).map(|p| z.get(p, c)).sum::<f64>() / pixels as f64).collect();
        let s: Vec<f64> = (0..channels).map(|c| population_std((0..pixels).map(|p| z.get(p, c)))).collect();
        mu.push(m);
        sigma.push(s);
    }
    let sigma_mu = (0..channels).map(|c| population_std(mu.iter().map(|m| m[c]))).collect();
    let sigma_sigma = (0..channels).map(|c| population_std(sigma.iter().map(|s| s[c]))).collect();
    Ok(BatchStats { mu, sigma, sigma_mu, sigma_sigma })
}

/// Latent-feature uncertainty perturbation. Each sample/channel is
/// re-standardized to a new mean `φ = μ + ε_μ·Σ_μ` and std `ψ = σ + ε_σ·Σ_σ`:
/// `z̃ = φ + ψ·(z − μ)/max(σ, 1e-6)`.
pub fn lfue(batch: &[Matrix], eps_mu: &[Vec<f64>], eps_sigma: &[Vec<f64>]) -> Result<Vec<Matrix>> {
    if batch.len() < 2 {
        bail!(Argument, "LF-UE needs at least two samples, got {}", batch.len());
    }
    let stats = batch_stats(batch)?;
    let channels = batch[0].cols();
    let shaped = |e: &[Vec<f64>]| e.len() == batch.len() && e.iter().all(|v| v.len() == channels);
    if !shaped(eps_mu) || !shaped(eps_sigma) {
        bail!(Argument, "perturbation noise must be {}×{channels}", batch.len());
    }
    Ok(batch
        .iter()
        .enumerate()
        .map(|(b, z)| {
            let mut out = z.clone();
            for c in 0..channels {
                let (m, s) = (stats.mu[b][c], stats.sigma[b][c]);
                let phi = m + eps_mu[b][c] * stats.sigma_mu[c];
                let psi = s + eps_sigma[b][c] * stats.sigma_sigma[c];
                let denom = s.max(SIGMA_FLOOR);
                for p in 0..z.rows() {
                    out.set(p, c, phi + psi * (z.get(p, c) - m) / denom);
                }
            }
            out
        })
        .collect())
}

/// Binary `side × side` raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonMask {
    pub side: usize,
    pub mask: Vec<bool>,
    pub area_ratio: f64,
}

impl PolygonMask {
    pub fn from_mask(side: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != side * side || side == 0 {
            bail!(Argument, "mask length {} is not {side}²", mask.len());
        }
        let ones = mask.iter().filter(|&&m| m).count();
        Ok(Self { side, area_ratio: ones as f64 / mask.len() as f64, mask })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.side + col]
    }
}

/// Star-shaped polygon with `vertices` corners around a random pixel centre:
/// angles evenly spaced with a random rotation and a small jitter, radii
/// uniform in `[side/4, side/2]`. Pixels whose centres fall inside are set by
/// scanline filling; only the 4-connected component holding the centre pixel
/// is kept.
pub fn random_polygon_mask<R: Rng + ?Sized>(side: usize, vertices: usize, rng: &mut R) -> Result<PolygonMask> {
    if !(3..=8).contains(&vertices) {
        bail!(Argument, "vertex count {vertices} outside 3..=8");
    }
    if side == 0 {
        bail!(Argument, "side must be positive");
    }
    let s = side as f64;
    let (cr, cc) = (rng.random_range(0..side), rng.random_range(0..side));
    let (cy, cx) = (cr as f64 + 0.5, cc as f64 + 0.5);
    let slot = 2.0 * PI / vertices as f64;
    let rotation = rng.random_range(0.0..slot);
    let points: Vec<(f64, f64)> = (0..vertices)
        .map(|i| {
            let angle = rotation + slot * (i as f64 + rng.random_range(-0.2..0.2));
            let radius = rng.random_range(s / 4.0..=s / 2.0);
            (cx + radius * libm::cos(angle), cy + radius * libm::sin(angle))
        })
        .collect();

    let mut inside = vec![false; side * side];
    let mut crossings = Vec::with_capacity(vertices);
    for r in 0..side {
        let y = r as f64 + 0.5;
        crossings.clear();
        for i in 0..vertices {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % vertices];
            // half-open rule so shared vertices count once
            if (y0 <= y) != (y1 <= y) {
                crossings.push(x0 + (y - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            for c in 0..side {
                let x = c as f64 + 0.5;
                if x >= pair[0] && x <= pair[1] {
                    inside[r * side + c] = true;
                }
            }
        }
    }

    let mut keep = vec![false; side * side];
    let mut stack = vec![(cr, cc)];
    keep[cr * side + cc] = true;
    while let Some((r, c)) = stack.pop() {
        let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in neighbours {
            if nr < side && nc < side && inside[nr * side + nc] && !keep[nr * side + nc] {
                keep[nr * side + nc] = true;
                stack.push((nr, nc));
            }
        }
    }
    PolygonMask::from_mask(side, keep)
}

/// `mask ⊙ zA + (1 − mask) ⊙ zB` over pixel-major latents, with the mask's
/// area ratio.
pub fn rpsc_mix(za: &Matrix, zb: &Matrix, mask: &PolygonMask) -> Result<(Matrix, f64)> {
    if za.shape() != zb.shape() || za.rows() != mask.mask.len() {
        bail!(Argument, "latent shapes {:?}/{:?} do not match a {}×{} mask", za.shape(), zb.shape(), mask.side, mask.side);
    }
    let mut out = zb.clone();
    for (p, &m) in mask.mask.iter().enumerate() {
        if m {
            out.row_mut(p).copy_from_slice(za.row(p));
        }
    }
    Ok((out, mask.area_ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(b: usize, side: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b).map(|_| Matrix::from_vec(side * side, 4, (0..side * side * 4).map(|_| rng.random_range(-2.0..2.0)).collect())).collect()
    }

    fn zeros(b: usize, c: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; c]; b]
    }

    #[test]
    fn lfue_zero_noise_is_identity() {
        let batch = random_batch(5, 3, 1);
        let out = lfue(&batch, &zeros(5, 4), &zeros(5, 4)).unwrap();
        for (a, b) in batch.iter().zip(&out) {
            assert!(a.zip_map(b, |x, y| (x - y).abs()).max_abs() < 1e-12);
        }
    }

    #[test]
    fn lfue_hand_example() {
        let a = Matrix::from_vec(4, 1, vec![0.0, 2.0, 0.0, 2.0]);
        let b = Matrix::from_vec(4, 1, vec![1.0, 3.0, 1.0, 3.0]);
        let stats = batch_stats(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(stats.mu, vec![vec![1.0], vec![2.0]]);
        assert_eq!(stats.sigma, vec![vec![1.0], vec![1.0]]);
        assert_eq!(stats.sigma_mu, vec![0.5]);
        assert_eq!(stats.sigma_sigma, vec![0.0]);
        let out = lfue(&[a, b], &[vec![1.0], vec![1.0]], &zeros(2, 1)).unwrap();
        assert_eq!(out[0].data(), &[0.5, 2.5, 0.5, 2.5]);
        assert_eq!(out[1].data(), &[1.5, 3.5, 1.5, 3.5]);
    }

    #[test]
    fn lfue_constant_sample_stays_finite() {
        let a = Matrix::filled(4, 1, 0.7);
        let b = Matrix::from_vec(4, 1, vec![1.0, 3.0, 1.0, 3.0]);
        let out = lfue(&[a, b], &[vec![0.5], vec![0.0]], &zeros(2, 1)).unwrap();
        // Σ_μ = 0.65, so φ = 0.7 + 0.5·0.65
        assert!(out[0].data().iter().all(|&v| (v - 1.025).abs() < 1e-12));
    }

    #[test]
    fn lfue_rejects_small_batches() {
        let batch = random_batch(1, 3, 2);
        assert!(lfue(&batch, &zeros(1, 4), &zeros(1, 4)).is_err());
        let batch = random_batch(2, 3, 2);
        assert!(lfue(&batch, &zeros(3, 4), &zeros(2, 4)).is_err());
    }

    #[test]
    fn masks_are_nonempty_partial_and_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..1000 {
            let m = random_polygon_mask(9, 3 + i % 6, &mut rng).unwrap();
            assert!(m.area_ratio > 0.0 && m.area_ratio < 1.0, "ratio {}", m.area_ratio);
            // flood fill from any set pixel reaches all of them
            let start = m.mask.iter().position(|&v| v).unwrap();
            let mut seen = [false; 81];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (r, c) = (p / 9, p % 9);
                let mut visit = |q: usize| {
                    if m.mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if r > 0 {
                    visit(p - 9);
                }
                if r < 8 {
                    visit(p + 9);
                }
                if c > 0 {
                    visit(p - 1);
                }
                if c < 8 {
                    visit(p + 1);
                }
            }
            assert_eq!(seen.iter().filter(|&&v| v).count(), m.mask.iter().filter(|&&v| v).count());
        }
    }

    #[test]
    fn mask_is_deterministic_and_validates_vertices() {
        let a = random_polygon_mask(9, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = random_polygon_mask(9, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(random_polygon_mask(9, 2, &mut rng).is_err());
        assert!(random_polygon_mask(9, 9, &mut rng).is_err());
    }

    #[test]
    fn rpsc_boundaries_and_half_mask() {
        let za = Matrix::filled(4, 4, 1.0);
        let zb = Matrix::zeros(4, 4);
        let ones = PolygonMask::from_mask(2, vec![true; 4]).unwrap();
        let none = PolygonMask::from_mask(2, vec![false; 4]).unwrap();
        assert_eq!(rpsc_mix(&za, &zb, &ones).unwrap(), (za.clone(), 1.0));
        assert_eq!(rpsc_mix(&za, &zb, &none).unwrap(), (zb.clone(), 0.0));
        let half = PolygonMask::from_mask(2, vec![true, false, true, false]).unwrap();
        let (mixed, r) = rpsc_mix(&za, &zb, &half).unwrap();
        assert_eq!(r, 0.5);
        assert_eq!(mixed.sum() / mixed.len() as f64, 0.5);
        assert!(rpsc_mix(&za, &Matrix::zeros(3, 4), &half).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lfue_preserves_normalized_pattern(seed in 0u64..500, noise in proptest::collection::vec(-2.0f64..2.0, 24)) {
                let batch = random_batch(3, 3, seed);
                let em: Vec<Vec<f64>> = noise[..12].chunks(4).map(<[f64]>::to_vec).collect();
                let es: Vec<Vec<f64>> = noise[12..].chunks(4).map(<[f64]>::to_vec).collect();
                let out = lfue(&batch, &em, &es).unwrap();
                let stats = batch_stats(&batch).unwrap();
                for b in 0..3 {
                    prop_assert_eq!(out[b].shape(), batch[b].shape());
                    for c in 0..4 {
                        let (m, s) = (stats.mu[b][c], stats.sigma[b][c]);
                        let phi = m + em[b][c] * stats.sigma_mu[c];
                        let psi = s + es[b][c] * stats.sigma_sigma[c];
                        if s > SIGMA_FLOOR && psi.abs() > 1e-6 {
                            for p in 0..9 {
                                let lhs = (out[b].get(p, c) - phi) / psi;
                                let rhs = (batch[b].get(p, c) - m) / s;
                                prop_assert!((lhs - rhs).abs() < 1e-9);
                            }
                        }
                    }
                }
            }

            #[test]
            fn rpsc_is_pixelwise_partition(seed in 0u64..1000, k in 3usize..=8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask = random_polygon_mask(9, k, &mut rng).unwrap();
                let za = random_batch(1, 9, seed).remove(0);
                let zb = random_batch(1, 9, seed + 1).remove(0);
                let (mixed, ratio) = rpsc_mix(&za, &zb, &mask).unwrap();
                let mean = mask.mask.iter().filter(|&&m| m).count() as f64 / 81.0;
                prop_assert_eq!(ratio, mean);
                for p in 0..81 {
                    let src = if mask.mask[p] { &za } else { &zb };
                    prop_assert_eq!(mixed.row(p), src.row(p));
                }
            }
        }
    }
}
