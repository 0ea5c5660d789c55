//! Effectiveness analyses and classification scoring.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::denoiser::AttentionMap;
use crate::error::{bail, Result};
use crate::hsicube::Patch;
use crate::nn::{conv3x3_map, Conv3x3, Linear};
use crate::params::{AdamW, AdamWConfig, Bound, Fwd, ParamStore};
use crate::tensor::Matrix;
use crate::autograd::Tape;
use crate::textcond::{TokenSequence, Vocabulary};

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Argument, "spectra have {} and {} bands", a.len(), b.len());
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        bail!(NumericDomain, "cosine similarity of a zero spectrum");
    }
    Ok(dot / (na * nb))
}

/// Largest and smallest cosine similarity over every (real, generated) pair.
pub fn point_fidelity(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<(f64, f64)> {
    if real.is_empty() || generated.is_empty() {
        bail!(Argument, "point fidelity needs at least one real and one generated spectrum");
    }
    let (mut max, mut min) = (f64::NEG_INFINITY, f64::INFINITY);
    for r in real {
        for g in generated {
            let s = cosine_similarity(r, g)?;
            max = max.max(s);
            min = min.min(s);
        }
    }
    Ok((max, min))
}

/// Per-class point fidelity on centre-pixel spectra; `None` for classes
/// missing on either side.
pub fn point_fidelity_by_class(real: &[Patch], generated: &[Patch], class_count: u16) -> Result<Vec<Option<(f64, f64)>>> {
    (1..=class_count)
        .map(|class| {
            let pick = |ps: &[Patch]| ps.iter().filter(|p| p.center_label == class).map(Patch::center_spectrum).collect::<Vec<_>>();
            let (r, g) = (pick(real), pick(generated));
            if r.is_empty() || g.is_empty() {
                Ok(None)
            } else {
                point_fidelity(&r, &g).map(Some)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralStats {
    pub class: u16,
    pub mean: Vec<f64>,
    /// Population standard deviation per band.
    pub std: Vec<f64>,
}

/// Per-band mean and population std over centre pixels.
pub fn spectral_stats(patches: &[&Patch], class: u16) -> Result<SpectralStats> {
    if patches.len() < 2 {
        bail!(Argument, "spectral statistics need at least 2 patches, got {}", patches.len());
    }
    let spectra: Vec<Vec<f64>> = patches.iter().map(|p| p.center_spectrum()).collect();
    let bands = spectra[0].len();
    if spectra.iter().any(|s| s.len() != bands) {
        bail!(Argument, "patches disagree on band count");
    }
    let n = spectra.len() as f64;
    let mean: Vec<f64> = (0..bands).map(|b| spectra.iter().map(|s| s[b]).sum::<f64>() / n).collect();
    let std = (0..bands).map(|b| libm::sqrt(spectra.iter().map(|s| (s[b] - mean[b]) * (s[b] - mean[b])).sum::<f64>() / n)).collect();
    Ok(SpectralStats { class, mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    /// `N×2` component scores.
    pub scores: Matrix,
    /// Unit loading vectors of the two leading components.
    pub components: [Vec<f64>; 2],
    /// Sample variance along each component.
    pub explained_variance: [f64; 2],
    pub column_means: Vec<f64>,
}

/// Projects centred rows onto the two leading right singular directions.
/// Each component is signed so its first nonzero loading is positive.
pub fn pca_2d(spectra: &Matrix) -> Result<Pca2d> {
    let (n, c) = spectra.shape();
    if n < 3 {
        bail!(Argument, "PCA needs at least 3 spectra, got {n}");
    }
    if c < 2 {
        bail!(Argument, "PCA to 2-D needs at least 2 bands, got {c}");
    }
    let column_means: Vec<f64> = (0..c).map(|j| (0..n).map(|i| spectra.get(i, j)).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, c, |i, j| spectra.get(i, j) - column_means[j]);
    let scale = centred.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        bail!(NumericDomain, "all spectra are identical; PCA is undefined");
    }
    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let tol = 1e-12 * scale;
    let component = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = match order.get(k) {
            Some(&r) => (0..c).map(|j| v_t[(r, j)]).collect(),
            None => vec![0.0; c],
        };
        if let Some(first) = v.iter().find(|x| x.abs() > tol) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        v
    };
    let components = [component(0), component(1)];
    let mut scores = Matrix::zeros(n, 2);
    for i in 0..n {
        for (k, comp) in components.iter().enumerate() {
            scores.set(i, k, (0..c).map(|j| centred[(i, j)] * comp[j]).sum());
        }
    }
    let var = |k: usize| order.get(k).map_or(0.0, |&r| svd.singular_values[r] * svd.singular_values[r] / (n - 1) as f64);
    Ok(Pca2d { scores, components, explained_variance: [var(0), var(1)], column_means })
}

/// Rows are true classes, columns predictions; class `i` sits at index
/// `i − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            bail!(Argument, "confusion matrix must be square");
        }
        Ok(Self { classes: k, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Records one sample with 1-based class ids.
    pub fn record(&mut self, truth: u16, predicted: u16) -> Result<()> {
        let k = self.classes as u16;
        if truth == 0 || truth > k || predicted == 0 || predicted > k {
            bail!(Argument, "class ids must lie in 1..={k}, got truth {truth} prediction {predicted}");
        }
        self.counts[(truth as usize - 1) * self.classes + predicted as usize - 1] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// `None` for classes absent from the truth labels.
    pub per_class: Vec<Option<f64>>,
}

pub fn score(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        bail!(Argument, "confusion matrix is empty");
    }
    let n = total as f64;
    let k = cm.classes();
    let trace: u64 = (0..k).map(|i| cm.get(i, i)).sum();
    let oa = trace as f64 / n;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|i| {
            let r = cm.row_sum(i);
            (r > 0).then(|| cm.get(i, i) as f64 / r as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    // κ = (N·trace − Σ row·col) / (N² − Σ row·col), kept in integers until
    // the final division; the denominator vanishes only when truth and
    // prediction share a single class
    let chance: u128 = (0..k).map(|i| cm.row_sum(i) as u128 * cm.col_sum(i) as u128).sum();
    let total = total as u128;
    let denom = total * total - chance;
    let kappa = if denom == 0 { 1.0 } else { ((total * trace as u128) as i128 - chance as i128) as f64 / denom as f64 };
    Ok(Scores { oa, aa, kappa, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: 16, epochs: 400, batch_size: 64, lr: 5e-3, seed: 0 }
    }
}

/// Two 3×3 convolutions, global average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct ReferenceClassifier {
    pub config: ClassifierConfig,
    pub classes: u16,
    pub params: ParamStore,
    conv1: Conv3x3,
    conv2: Conv3x3,
    head: Linear,
    bands: usize,
}

impl ReferenceClassifier {
    pub fn new(bands: usize, classes: u16, config: ClassifierConfig) -> Result<Self> {
        if classes < 2 || bands == 0 || config.hidden == 0 || config.batch_size == 0 {
            bail!(Argument, "invalid classifier setup: {bands} bands, {classes} classes, {config:?}");
        }
        let mut rng = crate::rng_stream(config.seed, 0);
        let mut params = ParamStore::new();
        let conv1 = Conv3x3::new(&mut params, "cls.conv1", bands, config.hidden, &mut rng);
        let conv2 = Conv3x3::new(&mut params, "cls.conv2", config.hidden, config.hidden, &mut rng);
        let head = Linear::new(&mut params, "cls.head", config.hidden, classes as usize, true, &mut rng);
        Ok(Self { config, classes, params, conv1, conv2, head, bands })
    }

    fn logits(&self, f: &mut Fwd, patches: &[&Patch]) -> Result<crate::autograd::Var> {
        let side = patches[0].side;
        if patches.iter().any(|p| p.side != side || p.bands != self.bands) {
            bail!(Argument, "patches must share side {side} and have {} bands", self.bands);
        }
        let b = patches.len();
        let pixels = side * side;
        let x = f.input(Matrix::vstack(&patches.iter().map(|p| p.to_pixel_matrix()).collect::<Vec<_>>()));
        let m1 = alloc::rc::Rc::new(conv3x3_map(side, self.bands, b));
        let m2 = alloc::rc::Rc::new(conv3x3_map(side, self.config.hidden, b));
        let h = self.conv1.forward(f, x, &m1);
        let h = f.tape.silu(h);
        let h = self.conv2.forward(f, h, &m2);
        let h = f.tape.silu(h);
        let mut pool = Matrix::zeros(b, b * pixels);
        for i in 0..b {
            for p in 0..pixels {
                pool.set(i, i * pixels + p, 1.0 / pixels as f64);
            }
        }
        let pool = f.input(pool);
        let pooled = f.tape.matmul(pool, h);
        Ok(self.head.forward(f, pooled))
    }

    /// Cross-entropy training with AdamW; returns the mean loss per epoch.
    pub fn fit(&mut self, train: &[&Patch]) -> Result<Vec<f64>> {
        if train.is_empty() {
            bail!(Argument, "empty training set");
        }
        if let Some(p) = train.iter().find(|p| p.center_label == 0 || p.center_label > self.classes) {
            bail!(Validation, "training label {} outside 1..={}", p.center_label, self.classes);
        }
        if train.iter().all(|p| p.center_label == train[0].center_label) {
            bail!(Validation, "training set holds a single class");
        }
        let mut opt = AdamW::new(AdamWConfig { lr: self.config.lr, weight_decay: 0.0, ..AdamWConfig::default() }, self.params.len());
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = crate::rng_stream(self.config.seed, 1);
        let mut history = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let (mut sum, mut batches) = (0.0, 0);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Patch> = chunk.iter().map(|&i| train[i]).collect();
                let targets: Vec<usize> = batch.iter().map(|p| p.center_label as usize - 1).collect();
                let mut tape = Tape::new();
                let grad = {
                    let mut bound = Bound::new(&self.params);
                    let mut f = Fwd::new(&mut tape, &mut bound);
                    let logits = self.logits(&mut f, &batch)?;
                    let loss = f.tape.softmax_cross_entropy(logits, &targets);
                    sum += f.tape.value(loss).item();
                    let g = f.tape.backward(loss);
                    bound.flat_grad(&g)
                };
                opt.update(self.params.flat_mut(), &grad)?;
                batches += 1;
            }
            let mean = sum / batches as f64;
            if !mean.is_finite() {
                bail!(Training, "classifier loss is not finite");
            }
            history.push(mean);
        }
        Ok(history)
    }

    /// Predicted 1-based class per patch.
    pub fn predict(&self, patches: &[&Patch]) -> Result<Vec<u16>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(256) {
            let mut tape = Tape::new();
            let mut bound = Bound::new(&self.params);
            let mut f = Fwd::new(&mut tape, &mut bound);
            let logits = self.logits(&mut f, chunk)?;
            let lv = f.tape.value(logits);
            for r in 0..lv.rows() {
                let row = lv.row(r);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                out.push(best as u16 + 1);
            }
        }
        Ok(out)
    }
}

/// Trains a fresh reference classifier and tallies its test predictions.
pub fn reference_classifier(train: &[&Patch], test: &[&Patch], classes: u16, config: ClassifierConfig) -> Result<ConfusionMatrix> {
    let first = train.first().ok_or_else(|| crate::error::Error::Argument("empty training set".into()))?;
    let mut model = ReferenceClassifier::new(first.bands, classes, config)?;
    model.fit(train)?;
    let mut cm = ConfusionMatrix::new(classes as usize);
    for (p, pred) in test.iter().zip(model.predict(test)?) {
        cm.record(p.center_label, pred)?;
    }
    Ok(cm)
}

/// Block- and head-averaged cross-attention of one caption token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRaster {
    pub position: usize,
    pub word: String,
    pub side: usize,
    /// Averaged attention weight per pixel, before normalization.
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to `[0, 1]`; all zero when `raw` is constant.
    pub normalized: Vec<f64>,
}

/// Average of every map, `pixels × tokens`.
pub fn mean_attention(maps: &[AttentionMap]) -> Result<Matrix> {
    let first = maps.first().ok_or_else(|| crate::error::Error::Argument("no attention maps".into()))?;
    let mut acc = Matrix::zeros(first.weights.rows(), first.weights.cols());
    for m in maps {
        if m.weights.shape() != acc.shape() {
            bail!(Argument, "attention maps differ in shape");
        }
        acc = acc.zip_map(&m.weights, |a, b| a + b);
    }
    Ok(acc.map(|v| v / maps.len() as f64))
}

/// One raster per word of the caption, skipping the start and end tokens.
pub fn attention_rasters(maps: &[AttentionMap], tokens: &TokenSequence, vocab: &Vocabulary, side: usize) -> Result<Vec<TokenRaster>> {
    let mean = mean_attention(maps)?;
    if mean.rows() != side * side || mean.cols() != tokens.ids.len() {
        bail!(Argument, "attention maps of shape {:?} do not match side {side} and {} tokens", mean.shape(), tokens.ids.len());
    }
    Ok((1..tokens.real_length.saturating_sub(1))
        .map(|position| {
            let raw: Vec<f64> = (0..side * side).map(|p| mean.get(p, position)).collect();
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let normalized = raw.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect();
            let word = vocab.word(tokens.ids[position]).unwrap_or("<unk>").into();
            TokenRaster { position, word, side, raw, normalized }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patch(center: &[f64], label: u16) -> Patch {
        let side = 3;
        let mut pixels = vec![0.0f32; center.len() * 9];
        for (b, v) in center.iter().enumerate() {
            pixels[b * 9 + 4] = *v as f32;
        }
        Patch { bands: center.len(), side, pixels, center_label: label, caption: None, origin: None }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - libm::sqrt(0.5)).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(crate::error::Error::NumericDomain(_))));
        let set = vec![vec![0.2, 0.5, 0.1], vec![0.9, 0.1, 0.3]];
        assert!((point_fidelity(&set, &set).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_per_class() {
        let real = vec![patch(&[1.0, 0.0], 1), patch(&[1.0, 1.0], 2)];
        let gen = vec![patch(&[1.0, 1.0], 1)];
        let out = point_fidelity_by_class(&real, &gen, 2).unwrap();
        assert!((out[0].unwrap().0 - libm::sqrt(0.5)).abs() < 1e-12);
        assert_eq!(out[1], None);
    }

    #[test]
    fn spectral_stats_examples() {
        let a = patch(&[0.0, 0.5], 1);
        let b = patch(&[2.0, 0.5], 1);
        let s = spectral_stats(&[&a, &b], 1).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.5]);
        assert_eq!(s.std, vec![1.0, 0.0]);
        assert!(spectral_stats(&[&a], 1).is_err());
    }

    #[test]
    fn pca_rank_one_line() {
        let m = Matrix::from_vec(4, 2, vec![0.0, 0.0, 1.0, 1.0, 2.5, 2.5, -1.0, -1.0]);
        let p = pca_2d(&m).unwrap();
        for i in 0..4 {
            assert!(p.scores.get(i, 1).abs() < 1e-10);
        }
        assert!(p.components[0][0] > 0.0);
        assert!(matches!(pca_2d(&Matrix::filled(4, 3, 0.5)), Err(crate::error::Error::NumericDomain(_))));
        assert!(pca_2d(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn pca_is_isometric_on_planar_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, v) = ([0.6, 0.0, 0.8, 0.0], [0.0, 1.0, 0.0, 0.0]);
        let coords: Vec<(f64, f64)> = (0..8).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
        let data: Vec<f64> = coords.iter().flat_map(|(a, b)| (0..4).map(move |j| 0.3 + a * u[j] + b * v[j])).collect();
        let m = Matrix::from_vec(8, 4, data);
        let p = pca_2d(&m).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let orig = libm::sqrt((0..4).map(|k| (m.get(i, k) - m.get(j, k)).powi(2)).sum());
                let proj = libm::sqrt((0..2).map(|k| (p.scores.get(i, k) - p.scores.get(j, k)).powi(2)).sum());
                assert!((orig - proj).abs() < 1e-8);
            }
        }
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / libm::sqrt(t * t + 1.0);
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn explained_variance_matches_covariance_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Matrix::from_vec(10, 5, (0..50).map(|_| rng.random_range(-1.0..1.0)).collect());
        let means: Vec<f64> = (0..5).map(|j| (0..10).map(|i| m.get(i, j)).sum::<f64>() / 10.0).collect();
        let cov: Vec<Vec<f64>> = (0..5)
            .map(|a| (0..5).map(|b| (0..10).map(|i| (m.get(i, a) - means[a]) * (m.get(i, b) - means[b])).sum::<f64>() / 9.0).collect())
            .collect();
        let ev = jacobi_eigenvalues(cov);
        let p = pca_2d(&m).unwrap();
        assert!((p.explained_variance[0] - ev[0]).abs() < 1e-8, "{:?} vs {:?}", p.explained_variance, ev);
        assert!((p.explained_variance[1] - ev[1]).abs() < 1e-8);
    }

    #[test]
    fn score_examples() {
        let s = score(&ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 5]]).unwrap()).unwrap();
        assert_eq!((s.oa, s.aa, s.kappa), (1.0, 1.0, 1.0));
        let s = score(&ConfusionMatrix::from_rows(&[vec![4, 1], vec![1, 4]]).unwrap()).unwrap();
        assert!((s.oa - 0.8).abs() < 1e-15);
        assert_eq!(s.kappa, 0.6);
        let s = score(&ConfusionMatrix::from_rows(&[vec![5, 0], vec![5, 0]]).unwrap()).unwrap();
        assert_eq!(s.kappa, 0.0);
        let s = score(&ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap()).unwrap();
        assert_eq!(s.per_class[1], None);
        assert!((s.aa - (0.75 + 1.0) / 2.0).abs() < 1e-15);
        assert!(score(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn classifier_separates_linear_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches: Vec<Patch> = (0..10)
            .map(|i| {
                let label = (i % 2) as u16 + 1;
                let base = if label == 1 { 0.2 } else { 0.8 };
                let pixels = (0..4 * 9).map(|_| base + rng.random_range(-0.05f32..0.05)).collect();
                Patch { bands: 4, side: 3, pixels, center_label: label, caption: None, origin: None }
            })
            .collect();
        let refs: Vec<&Patch> = patches.iter().collect();
        let cfg = ClassifierConfig { hidden: 6, ..ClassifierConfig::default() };
        let cm = reference_classifier(&refs, &refs, 2, cfg).unwrap();
        assert_eq!(cm.total(), 10);
        assert_eq!(score(&cm).unwrap().oa, 1.0);
        assert_eq!(cm, reference_classifier(&refs, &refs, 2, cfg).unwrap());
        let single: Vec<&Patch> = patches.iter().filter(|p| p.center_label == 1).collect();
        assert!(matches!(reference_classifier(&single, &refs, 2, cfg), Err(crate::error::Error::Validation(_))));
    }

    #[test]
    fn attention_rasters_cover_caption_words() {
        use crate::hsicube::{CaptionCorpus, Granularity};
        use crate::textcond::{build_vocab, tokenize};
        use crate::trainer::{LdmConfig, LdmModel};
        let mut corpus = CaptionCorpus::new(Granularity::Fine);
        corpus.push(1, "shallow clear water near the shore");
        let vocab = build_vocab(&corpus);
        let cfg = LdmConfig { side: 3, dim: 8, heads: 2, blocks: 2, text_layers: 1, vocab_size: vocab.len(), steps: 10, beta_min: 1e-4, beta_max: 0.02 };
        let (model, store) = LdmModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let tokens = tokenize("shallow clear water near the shore", &vocab);
        let c = model.text.encode_text(&store, &tokens);
        let (_, maps) = model.denoiser.denoise(&store, &Matrix::filled(9, 4, 0.3), 5, &c, true).unwrap();
        assert_eq!(maps.len(), 4);
        let mean = mean_attention(&maps).unwrap();
        for r in 0..mean.rows() {
            assert!((mean.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let rasters = attention_rasters(&maps, &tokens, &vocab, 3).unwrap();
        assert_eq!(rasters.len(), tokens.real_length - 2);
        assert_eq!(rasters[0].word, "shallow");
        assert!(rasters.iter().all(|r| r.normalized.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    proptest! {
        #[test]
        fn score_matches_tally(pairs in proptest::collection::vec((1u16..=4, 1u16..=4), 1..60)) {
            let mut cm = ConfusionMatrix::new(4);
            for &(t, p) in &pairs {
                cm.record(t, p).unwrap();
            }
            let s = score(&cm).unwrap();
            let n = pairs.len() as f64;
            let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
            prop_assert_eq!(s.oa, correct / n);
            let mut pe = 0.0;
            for c in 1..=4u16 {
                let rows = pairs.iter().filter(|(t, _)| *t == c).count() as f64;
                let cols = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
                pe += rows * cols;
            }
            pe /= n * n;
            let kappa = if pe >= 1.0 { 1.0 } else { (correct / n - pe) / (1.0 - pe) };
            prop_assert!((s.kappa - kappa).abs() < 1e-12);
            if s.kappa >= 0.0 {
                prop_assert!(s.kappa <= s.oa + 1e-12 && s.oa <= 1.0);
            }
        }

        #[test]
        fn pca_translation_invariant(data in proptest::collection::vec(-1.0f64..1.0, 18), shift in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let m = Matrix::from_vec(6, 3, data.clone());
            let moved = Matrix::from_vec(6, 3, data.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect());
            if let (Ok(a), Ok(b)) = (pca_2d(&m), pca_2d(&moved)) {
                // skip near-degenerate spectra where the component order is ill-defined
                let gap = (a.explained_variance[0] - a.explained_variance[1]).abs().min(a.explained_variance[1]);
                if gap > 1e-3 {
                    for (x, y) in a.scores.data().iter().zip(b.scores.data()) {
                        prop_assert!((x - y).abs() < 1e-8);
                    }
                }
            }
        }

        #[test]
        fn fidelity_scale_invariant(real in proptest::collection::vec(proptest::collection::vec(0.1f64..1.0, 4), 1..4),
                                    gen in proptest::collection::vec(proptest::collection::vec(0.1f64..1.0, 4), 1..4)) {
            let scaled: Vec<Vec<f64>> = gen.iter().map(|g| g.iter().map(|v| 3.0 * v).collect()).collect();
            let (a, b) = (point_fidelity(&real, &gen).unwrap(), point_fidelity(&real, &scaled).unwrap());
            prop_assert!((a.0 - b.0).abs() < 1e-10 && (a.1 - b.1).abs() < 1e-10);
        }
    }
}
