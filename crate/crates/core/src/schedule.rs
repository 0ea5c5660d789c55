//! Closed-form diffusion math: the linear noise schedule, forward noising,
//! the DDPM posterior step, the DDIM step and classifier-free guidance.
//!
//! Steps are 1-based (`1..=T`); step `0` denotes the clean sample, with
//! `ᾱ_0 = 1`.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Result};

/// Precomputed `β`, `α = 1 − β` and `ᾱ_t = ∏_{s≤t} α_s` tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Argument, "schedule needs at least one step");
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            bail!(Argument, "beta bounds must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]");
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + i as f64 / (steps - 1) as f64 * (beta_max - beta_min)
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            bail!(Argument, "step {t} outside 1..={}", self.steps());
        }
        Ok(())
    }

    /// `(t, β_t, α_t, ᾱ_t)` rows for export.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (1..=self.steps()).map(move |t| (t, self.beta(t), self.alpha(t), self.alpha_bar(t)))
    }

    /// Evenly spaced descending subsequence of `count` steps ending at the
    /// smallest spacing: `T, …, T/count`. `count == T` gives every step.
    pub fn ddim_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count == 0 || count > t {
            bail!(Argument, "DDIM step count must be in 1..={t}, got {count}");
        }
        let mut steps: Vec<usize> = (1..=count).map(|k| (k * t + count / 2) / count).collect();
        steps.dedup();
        steps.reverse();
        Ok(steps)
    }
}

/// Guidance coefficient `ω` and DDIM stochasticity `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub eta: f64,
}

impl GuidanceConfig {
    pub fn new(omega: f64, eta: f64) -> Result<Self> {
        if !(omega >= 0.0) {
            bail!(Argument, "guidance coefficient must be nonnegative, got {omega}");
        }
        if !(0.0..=1.0).contains(&eta) {
            bail!(Argument, "eta must lie in [0, 1], got {eta}");
        }
        Ok(Self { omega, eta })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: 0.7, eta: 0.0 }
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        bail!(Argument, "{what}: length {} vs {}", a.len(), b.len());
    }
    Ok(())
}

/// `z_t = sqrt(ᾱ_t)·z_0 + sqrt(1 − ᾱ_t)·ε`.
pub fn q_sample(z0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    same_len(z0, eps, "q_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// Ancestral DDPM step from `t` to `t − 1`. The final step (`t = 1`) adds
/// no noise.
pub fn ddpm_posterior_step<R: Rng + ?Sized>(
    zt: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    same_len(zt, eps_hat, "ddpm_posterior_step")?;
    let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
    let coef = beta / libm::sqrt(1.0 - ab);
    let inv = 1.0 / libm::sqrt(alpha);
    let sigma = libm::sqrt(posterior_variance(sched, t));
    Ok(zt
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| {
            let mean = inv * (z - coef * e);
            if t == 1 {
                mean
            } else {
                let xi: f64 = rng.sample(StandardNormal);
                mean + sigma * xi
            }
        })
        .collect())
}

/// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
pub fn posterior_variance(sched: &NoiseSchedule, t: usize) -> f64 {
    (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta(t)
}

/// DDIM noise scale for the step `t → t_prev`.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    eta * libm::sqrt((1.0 - abp) / (1.0 - ab)) * libm::sqrt(1.0 - ab / abp)
}

/// DDIM update from `t` to `t_prev` (`0` = clean sample) using cumulative
/// `ᾱ`. Fresh noise is only drawn when `σ > 0` and `t_prev` is not the
/// terminal step.
pub fn ddim_step<R: Rng + ?Sized>(
    zt: &[f64],
    t: usize,
    t_prev: usize,
    eps_bar: &[f64],
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if t_prev >= t {
        bail!(Argument, "t_prev ({t_prev}) must precede t ({t})");
    }
    same_len(zt, eps_bar, "ddim_step")?;
    let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    ddim_update(zt, eps_bar, ab, abp, eta, t_prev == 0, rng)
}

/// DDIM update written directly in terms of `ᾱ_t` and `ᾱ_{t_prev}`.
pub fn ddim_update<R: Rng + ?Sized>(
    zt: &[f64],
    eps_bar: &[f64],
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
    terminal: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sigma = eta * libm::sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) * libm::sqrt(1.0 - alpha_bar_t / alpha_bar_prev);
    let sigma = if sigma.is_finite() { sigma } else { 0.0 };
    let dir2 = 1.0 - alpha_bar_prev - sigma * sigma;
    if dir2 < 0.0 {
        bail!(NumericDomain, "1 - alpha_bar_prev - sigma^2 = {dir2} is negative");
    }
    let (sa, sb) = (libm::sqrt(alpha_bar_t), libm::sqrt(1.0 - alpha_bar_t));
    let (spa, dir) = (libm::sqrt(alpha_bar_prev), libm::sqrt(dir2));
    let noisy = sigma > 0.0 && !terminal;
    Ok(zt
        .iter()
        .zip(eps_bar)
        .map(|(z, e)| {
            let x0 = (z - sb * e) / sa;
            let mut out = spa * x0 + dir * e;
            if noisy {
                let xi: f64 = rng.sample(StandardNormal);
                out += sigma * xi;
            }
            out
        })
        .collect())
}

/// `ε̄ = (1 + ω)·ε_c − ω·ε_u`, evaluated as `ε_c + ω·(ε_c − ε_u)` so that
/// `ω = 0` and `ε_c = ε_u` both return `ε_c` exactly.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], omega: f64) -> Result<Vec<f64>> {
    same_len(eps_cond, eps_uncond, "cfg_combine")?;
    Ok(eps_cond.iter().zip(eps_uncond).map(|(c, u)| c + omega * (c - u)).collect())
}
