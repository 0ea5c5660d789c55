//! Spectral-compressing variational autoencoder: `C×S×S` patches map to a
//! `4×S×S` Gaussian latent with the spatial size preserved, plus a patch
//! discriminator for the adversarial term.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{GatherMap, Tape, Var};
use crate::denoiser::LATENT_CHANNELS;
use crate::error::{bail, Result};
use crate::hsicube::Patch;
use crate::nn::{conv3x3_map, Conv3x3};
use crate::params::{AdamW, AdamWConfig, Bound, Fwd, ParamStore};
use crate::tensor::Matrix;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeConfig {
    pub bands: usize,
    pub hidden: usize,
    pub lambda_kl: f64,
    pub lambda_adv: f64,
}

impl VaeConfig {
    pub fn new(bands: usize) -> Self {
        Self { bands, hidden: 32, lambda_kl: 1e-4, lambda_adv: 0.1 }
    }
}

/// Gaussian posterior over the latent, both `(S·S) × 4` pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Matrix,
    pub logvar: Matrix,
}

#[derive(Debug, Default)]
struct MapCache(RefCell<BTreeMap<(usize, usize, usize), Rc<GatherMap>>>);

impl Clone for MapCache {
    fn clone(&self) -> Self {
        Self(RefCell::new(self.0.borrow().clone()))
    }
}

impl MapCache {
    fn get(&self, side: usize, channels: usize, batch: usize) -> Rc<GatherMap> {
        self.0.borrow_mut().entry((side, channels, batch)).or_insert_with(|| Rc::new(conv3x3_map(side, channels, batch))).clone()
    }
}

/// Architecture plus the generator (encoder/decoder) and discriminator
/// parameter stores.
#[derive(Debug, Clone)]
pub struct Vae {
    pub config: VaeConfig,
    encoder: [Conv3x3; 3],
    decoder: [Conv3x3; 3],
    critic: [Conv3x3; 3],
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    maps: MapCache,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        if config.bands < LATENT_CHANNELS {
            bail!(Argument, "need at least {LATENT_CHANNELS} bands, got {}", config.bands);
        }
        if config.hidden == 0 {
            bail!(Argument, "hidden width must be positive");
        }
        let (c, h) = (config.bands, config.hidden);
        let mut g = ParamStore::new();
        let encoder = [
            Conv3x3::new(&mut g, "enc.0", c, h, rng),
            Conv3x3::new(&mut g, "enc.1", h, h, rng),
            Conv3x3::new(&mut g, "enc.2", h, 2 * LATENT_CHANNELS, rng),
        ];
        let decoder = [
            Conv3x3::new(&mut g, "dec.0", LATENT_CHANNELS, h, rng),
            Conv3x3::new(&mut g, "dec.1", h, h, rng),
            Conv3x3::new(&mut g, "dec.2", h, c, rng),
        ];
        let mut d = ParamStore::new();
        let critic = [Conv3x3::new(&mut d, "dis.0", c, h, rng), Conv3x3::new(&mut d, "dis.1", h, h, rng), Conv3x3::new(&mut d, "dis.2", h, 1, rng)];
        Ok(Self { config, encoder, decoder, critic, generator: g, discriminator: d, maps: MapCache::default() })
    }

    /// Same architecture around existing parameter vectors.
    pub fn with_params(config: VaeConfig, generator: &[f64], discriminator: &[f64]) -> Result<Self> {
        let mut rng = crate::rng_stream(0, 0);
        let mut vae = Self::new(config, &mut rng)?;
        vae.generator.set_flat(generator)?;
        vae.discriminator.set_flat(discriminator)?;
        Ok(vae)
    }

    fn stack(&self, layers: &[Conv3x3; 3], f: &mut Fwd, x: Var, side: usize, batch: usize) -> Var {
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            let map = self.maps.get(side, layer.in_channels, batch);
            h = layer.forward(f, h, &map);
            if i + 1 < layers.len() {
                h = f.tape.silu(h);
            }
        }
        h
    }

    /// Stacked pixel rows `(batch·S·S) × C` → (mu, clamped logvar).
    pub fn encode_vars(&self, f: &mut Fwd, x: Var, side: usize, batch: usize) -> (Var, Var) {
        let h = self.stack(&self.encoder, f, x, side, batch);
        let mu = f.tape.slice_cols(h, 0, LATENT_CHANNELS);
        let lv = f.tape.slice_cols(h, LATENT_CHANNELS, LATENT_CHANNELS);
        (mu, f.tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX))
    }

    pub fn decode_vars(&self, f: &mut Fwd, z: Var, side: usize, batch: usize) -> Var {
        let h = self.stack(&self.decoder, f, z, side, batch);
        f.tape.sigmoid(h)
    }

    /// Per-pixel realness scores in (0, 1); `f` must be bound to the
    /// discriminator store.
    pub fn critic_vars(&self, f: &mut Fwd, x: Var, side: usize, batch: usize) -> Var {
        let h = self.stack(&self.critic, f, x, side, batch);
        f.tape.sigmoid(h)
    }

    fn check_patches(&self, patches: &[&Patch]) -> Result<usize> {
        let Some(first) = patches.first() else { bail!(Argument, "empty patch batch") };
        for p in patches {
            if p.bands != self.config.bands || p.side != first.side {
                bail!(Argument, "patch shape {}×{} does not match {} bands, side {}", p.bands, p.side, self.config.bands, first.side);
            }
        }
        Ok(first.side)
    }

    pub fn encode_batch(&self, patches: &[&Patch]) -> Result<Vec<LatentPosterior>> {
        let side = self.check_patches(patches)?;
        let x = Matrix::vstack(&patches.iter().map(|p| p.to_pixel_matrix()).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.generator);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let xv = f.input(x);
        let (mu, lv) = self.encode_vars(&mut f, xv, side, patches.len());
        let p = side * side;
        let mus = f.tape.value(mu).split_rows(p);
        let lvs = f.tape.value(lv).split_rows(p);
        Ok(mus.into_iter().zip(lvs).map(|(mu, logvar)| LatentPosterior { mu, logvar }).collect())
    }

    pub fn encode(&self, patch: &Patch) -> Result<LatentPosterior> {
        Ok(self.encode_batch(&[patch])?.remove(0))
    }

    /// Decodes `(S·S) × 4` latents to patches with values in [0, 1].
    pub fn decode_batch(&self, latents: &[Matrix], side: usize) -> Result<Vec<Patch>> {
        if latents.is_empty() {
            bail!(Argument, "empty latent batch");
        }
        for z in latents {
            if z.shape() != (side * side, LATENT_CHANNELS) {
                bail!(Argument, "latent shape {:?} does not match side {side}", z.shape());
            }
        }
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.generator);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let zv = f.input(Matrix::vstack(latents));
        let out = self.decode_vars(&mut f, zv, side, latents.len());
        Ok(f.tape.value(out).split_rows(side * side).iter().map(|m| Patch::from_pixel_matrix(m, side)).collect())
    }

    pub fn decode(&self, z: &Matrix, side: usize) -> Result<Patch> {
        Ok(self.decode_batch(core::slice::from_ref(z), side)?.remove(0))
    }

    /// Mean patch-level realness score.
    pub fn critic_score(&self, patch: &Patch) -> f64 {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.discriminator);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let x = f.input(patch.to_pixel_matrix());
        let s = self.critic_vars(&mut f, x, patch.side, 1);
        let m = f.tape.mean(s);
        f.tape.value(m).item()
    }
}

/// `z = mu + exp(logvar/2)·eps`.
pub fn reparameterize(post: &LatentPosterior, eps: &Matrix) -> Result<Matrix> {
    if eps.shape() != post.mu.shape() || post.logvar.shape() != post.mu.shape() {
        bail!(Argument, "posterior and noise shapes differ");
    }
    let std = post.logvar.map(|lv| libm::exp(0.5 * lv));
    Ok(post.mu.zip_map(&std.zip_map(eps, |s, e| s * e), |m, n| m + n))
}

/// Mean over latent elements of `0.5·(mu² + e^logvar − 1 − logvar)`.
pub fn kl_divergence(post: &LatentPosterior) -> f64 {
    let n = post.mu.len() as f64;
    post.mu.data().iter().zip(post.logvar.data()).map(|(m, lv)| 0.5 * (m * m + libm::exp(*lv) - 1.0 - lv)).sum::<f64>() / n
}

/// Reconstruction MSE plus weighted KL and the non-saturating generator
/// term `−ln(score_fake)`.
pub fn vae_loss(patch: &Patch, recon: &Patch, post: &LatentPosterior, disc_score_fake: f64, lambda_kl: f64, lambda_adv: f64) -> Result<f64> {
    if patch.pixels.len() != recon.pixels.len() {
        bail!(Argument, "patch and reconstruction sizes differ");
    }
    let mse = patch.pixels.iter().zip(&recon.pixels).map(|(a, b)| {
        let d = *a as f64 - *b as f64;
        d * d
    }).sum::<f64>() / patch.pixels.len() as f64;
    let mut loss = mse + lambda_kl * kl_divergence(post);
    if lambda_adv != 0.0 {
        loss += lambda_adv * -libm::log(clamp_score(disc_score_fake)?);
    }
    Ok(loss)
}

fn clamp_score(s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        bail!(NumericDomain, "discriminator score {s} outside [0, 1]");
    }
    Ok(s.clamp(SCORE_EPS, 1.0 - SCORE_EPS))
}

/// `−ln(score_real) − ln(1 − score_fake)`, scores clamped away from 0 and 1.
pub fn discriminator_loss(score_real: f64, score_fake: f64) -> Result<f64> {
    let r = clamp_score(score_real)?;
    let f = clamp_score(score_fake)?;
    Ok(-libm::log(r) - libm::log(1.0 - f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Optimizer steps per epoch; `None` means one pass over all patches.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 64, lr: 1e-3, steps_per_epoch: None, seed: 0 }
    }
}

/// Per-epoch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeEpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub adv: f64,
    pub disc: f64,
}

/// Generator terms computed on a tape.
pub struct GeneratorTerms {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub adv: Option<Var>,
    pub output: Var,
}

impl Vae {
    /// Builds the generator objective for stacked pixel rows `x` and
    /// reparameterization noise `eps`. Discriminator parameters enter as
    /// constants.
    pub fn generator_terms(&self, tape: &mut Tape, gen: &mut Bound, x: &Matrix, eps: &Matrix, side: usize, batch: usize) -> GeneratorTerms {
        let (xv, recon_v, mu, lv) = {
            let mut f = Fwd::new(tape, gen);
            let xv = f.input(x.clone());
            let (mu, lv) = self.encode_vars(&mut f, xv, side, batch);
            let half = f.tape.scale(lv, 0.5);
            let std = f.tape.exp(half);
            let e = f.input(eps.clone());
            let noise = f.tape.mul(std, e);
            let z = f.tape.add(mu, noise);
            (xv, self.decode_vars(&mut f, z, side, batch), mu, lv)
        };
        let diff = tape.sub(recon_v, xv);
        let sq = tape.square(diff);
        let recon = tape.mean(sq);
        // 0.5·(mu² + e^lv − 1 − lv)
        let mu2 = tape.square(mu);
        let elv = tape.exp(lv);
        let a = tape.add(mu2, elv);
        let b = tape.sub(a, lv);
        let b = tape.offset(b, -1.0);
        let kl_mean = tape.mean(b);
        let kl = tape.scale(kl_mean, 0.5);
        let weighted_kl = tape.scale(kl, self.config.lambda_kl);
        let mut total = tape.add(recon, weighted_kl);
        let mut adv = None;
        if self.config.lambda_adv != 0.0 {
            let mut dbound = Bound::new(&self.discriminator);
            let mut f = Fwd::new(tape, &mut dbound);
            let s = self.critic_vars(&mut f, recon_v, side, batch);
            let s = f.tape.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS);
            let l = f.tape.ln(s);
            let m = f.tape.mean(l);
            let g = f.tape.scale(m, -1.0);
            let w = f.tape.scale(g, self.config.lambda_adv);
            total = f.tape.add(total, w);
            adv = Some(g);
        }
        GeneratorTerms { total, recon, kl, adv, output: recon_v }
    }

    fn discriminator_step(&self, real: &Matrix, fake: &Matrix, side: usize, batch: usize) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.discriminator);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let both = f.input(Matrix::vstack(&[real.clone(), fake.clone()]));
        let s = self.critic_vars(&mut f, both, side, 2 * batch);
        let s = f.tape.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS);
        let n = batch * side * side;
        // rows [0, n) are real, [n, 2n) fake: loss = mean(−ln s_real) + mean(−ln(1 − s_fake))
        let sign = Matrix::from_vec(2 * n, 1, (0..2 * n).map(|i| if i < n { 1.0 } else { -1.0 }).collect());
        let shift = Matrix::from_vec(2 * n, 1, (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect());
        let sign = f.input(sign);
        let shift = f.input(shift);
        let signed = f.tape.mul(s, sign);
        let p = f.tape.add(signed, shift);
        let l = f.tape.ln(p);
        let m = f.tape.mean(l);
        let loss = f.tape.scale(m, -2.0);
        let value = f.tape.value(loss).item();
        let grads = f.tape.backward(loss);
        (value, bound.flat_grad(&grads))
    }

    /// Alternating generator/discriminator training, one discriminator step
    /// per generator step.
    pub fn train(&mut self, patches: &[&Patch], cfg: &VaeTrainConfig) -> Result<Vec<VaeEpochRecord>> {
        let side = self.check_patches(patches)?;
        if cfg.batch_size == 0 {
            bail!(Argument, "batch size must be positive");
        }
        let pixels: Vec<Matrix> = patches.iter().map(|p| p.to_pixel_matrix()).collect();
        let opt_cfg = AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut gen_opt = AdamW::new(opt_cfg, self.generator.len());
        let mut dis_opt = AdamW::new(opt_cfg, self.discriminator.len());
        let mut shuffle_rng = crate::rng_stream(cfg.seed, 1);
        let mut noise_rng = crate::rng_stream(cfg.seed, 2);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let p = side * side;
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let full_pass = patches.len().div_ceil(cfg.batch_size);
            let steps = cfg.steps_per_epoch.unwrap_or(full_pass);
            let mut sums = [0.0f64; 4];
            for step in 0..steps {
                let start = (step * cfg.batch_size) % patches.len();
                let idx: Vec<usize> = (0..cfg.batch_size.min(patches.len())).map(|k| order[(start + k) % patches.len()]).collect();
                let batch = idx.len();
                let x = Matrix::vstack(&idx.iter().map(|&i| pixels[i].clone()).collect::<Vec<_>>());
                let eps = Matrix::from_vec(batch * p, LATENT_CHANNELS, (0..batch * p * LATENT_CHANNELS).map(|_| noise_rng.sample(StandardNormal)).collect());

                let mut tape = Tape::new();
                let mut bound = Bound::new(&self.generator);
                let terms = self.generator_terms(&mut tape, &mut bound, &x, &eps, side, batch);
                let total = tape.value(terms.total).item();
                if !total.is_finite() {
                    bail!(Training, "VAE loss diverged at epoch {epoch}, step {step}: {total}");
                }
                sums[0] += tape.value(terms.recon).item();
                sums[1] += tape.value(terms.kl).item();
                sums[2] += terms.adv.map_or(0.0, |a| tape.value(a).item());
                let fake = tape.value(terms.output).clone();
                let grads = tape.backward(terms.total);
                let g = bound.flat_grad(&grads);
                drop(bound);
                gen_opt.update(self.generator.flat_mut(), &g)?;

                if self.config.lambda_adv != 0.0 {
                    let (dl, dg) = self.discriminator_step(&x, &fake, side, batch);
                    if !dl.is_finite() {
                        bail!(Training, "discriminator loss diverged at epoch {epoch}, step {step}");
                    }
                    sums[3] += dl;
                    dis_opt.update(self.discriminator.flat_mut(), &dg)?;
                }
            }
            let n = steps.max(1) as f64;
            history.push(VaeEpochRecord { epoch, recon: sums[0] / n, kl: sums[1] / n, adv: sums[2] / n, disc: sums[3] / n });
        }
        Ok(history)
    }

    /// Mean squared error of decode(mu) against the input, per patch.
    pub fn reconstruction_mse(&self, patches: &[&Patch]) -> Result<f64> {
        let side = self.check_patches(patches)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in patches.chunks(64) {
            let posts = self.encode_batch(chunk)?;
            let mus: Vec<Matrix> = posts.into_iter().map(|p| p.mu).collect();
            let recon = self.decode_batch(&mus, side)?;
            for (a, b) in chunk.iter().zip(&recon) {
                total += a.pixels.iter().zip(&b.pixels).map(|(x, y)| {
                    let d = *x as f64 - *y as f64;
                    d * d
                }).sum::<f64>();
                count += a.pixels.len();
            }
        }
        Ok(total / count as f64)
    }
}
