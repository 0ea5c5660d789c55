//! Guided DDIM sampling from the EMA model, decoding to patches, and
//! sample-balance dataset expansion.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::LATENT_CHANNELS;
use crate::error::{bail, Result};
use crate::hsicube::{count_labels, sbr_expansion_plan, CaptionCorpus, CaptionRef, Patch};
use crate::params::ParamStore;
use crate::schedule::{cfg_combine, ddim_step, NoiseSchedule};
use crate::tensor::Matrix;
use crate::textcond::{tokenize, Vocabulary};
use crate::trainer::LdmModel;
use crate::vae::Vae;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub caption: String,
    pub count: usize,
    pub omega: f64,
    /// Length of the DDIM subsequence.
    pub steps: usize,
    /// Sample `k` of the request is drawn with seed `seed + k`.
    pub seed: u64,
}

impl GenerationRequest {
    fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.count == 0 {
            bail!(Argument, "generation count must be at least 1");
        }
        if self.steps == 0 || self.steps > sched.steps() {
            bail!(Argument, "DDIM steps must be in 1..={}, got {}", sched.steps(), self.steps);
        }
        if !(self.omega >= 0.0) {
            bail!(Argument, "guidance coefficient must be nonnegative, got {}", self.omega);
        }
        Ok(())
    }
}

/// A generated patch with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPatch {
    pub patch: Patch,
    pub caption: String,
    pub seed: u64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticDataset {
    pub patches: Vec<SyntheticPatch>,
}

/// Real training patches together with the synthetic additions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedDataset {
    pub real: Vec<Patch>,
    pub synthetic: SyntheticDataset,
}

impl ExpandedDataset {
    /// Every patch with a flag telling whether it is synthetic.
    pub fn samples(&self) -> impl Iterator<Item = (&Patch, bool)> {
        self.real.iter().map(|p| (p, false)).chain(self.synthetic.patches.iter().map(|s| (&s.patch, true)))
    }

    pub fn class_counts(&self, class_count: u16) -> Vec<usize> {
        let mut counts = count_labels(&self.real, class_count);
        for s in &self.synthetic.patches {
            let l = s.patch.center_label;
            if l > 0 && l <= class_count {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }
}

/// Which noise prediction a sampler callback must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Caption,
    Null,
}

/// Runs the guided reverse process from `z_T` along `timesteps` (descending)
/// down to a clean latent. With `ω = 0` the unconditional prediction is not
/// requested.
pub fn guided_ddim<R, F>(
    z_t: Matrix,
    timesteps: &[usize],
    sched: &NoiseSchedule,
    omega: f64,
    eta: f64,
    rng: &mut R,
    mut predict: F,
) -> Result<Matrix>
where
    R: Rng + ?Sized,
    F: FnMut(&Matrix, usize, Conditioning) -> Result<Matrix>,
{
    let mut z = z_t;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let eps_c = predict(&z, t, Conditioning::Caption)?;
        let eps = if omega == 0.0 {
            eps_c.into_data()
        } else {
            let eps_u = predict(&z, t, Conditioning::Null)?;
            cfg_combine(eps_c.data(), eps_u.data(), omega)?
        };
        let next = ddim_step(z.data(), t, t_prev, &eps, sched, eta, rng)?;
        z = Matrix::from_vec(z.rows(), z.cols(), next);
    }
    Ok(z)
}

/// Frozen models used for generation.
pub struct Generator<'a> {
    pub model: &'a LdmModel,
    /// EMA parameters of the text encoder and denoiser.
    pub ema: &'a ParamStore,
    pub vocab: &'a Vocabulary,
    pub vae: &'a Vae,
    pub schedule: &'a NoiseSchedule,
    /// Diffusion latents are VAE means multiplied by this factor.
    pub latent_scale: f64,
    pub eta: f64,
}

impl Generator<'_> {
    /// Clean latents in diffusion space, one per requested sample.
    pub fn sample_latent(&self, req: &GenerationRequest) -> Result<Vec<Matrix>> {
        req.validate(self.schedule)?;
        if self.model.denoiser.is_untrained(self.ema) {
            bail!(State, "the denoiser has not been trained");
        }
        let tokens = tokenize(&req.caption, self.vocab);
        let cond = self.model.text.encode_text(self.ema, &tokens);
        let null = self.model.text.null_embedding(self.ema);
        let timesteps = self.schedule.ddim_timesteps(req.steps)?;
        let pixels = self.model.config.side * self.model.config.side;
        (0..req.count)
            .map(|k| {
                let mut rng = crate::rng_stream(req.seed.wrapping_add(k as u64), 0);
                let data = (0..pixels * LATENT_CHANNELS).map(|_| rng.sample(StandardNormal)).collect();
                let z_t = Matrix::from_vec(pixels, LATENT_CHANNELS, data);
                guided_ddim(z_t, &timesteps, self.schedule, req.omega, self.eta, &mut rng, |z, t, which| {
                    let c = match which {
                        Conditioning::Caption => &cond,
                        Conditioning::Null => &null,
                    };
                    Ok(self.model.denoiser.denoise(self.ema, z, t, c, false)?.0)
                })
            })
            .collect()
    }

    /// Samples and decodes; the label is the class owning the caption in
    /// `corpus`, or 0 when no class does.
    pub fn generate_patches(&self, req: &GenerationRequest, corpus: &CaptionCorpus) -> Result<SyntheticDataset> {
        let latents: Vec<Matrix> = self.sample_latent(req)?.iter().map(|z| z.map(|v| v / self.latent_scale)).collect();
        let side = self.model.config.side;
        let decoded = self.vae.decode_batch(&latents, side)?;
        let class = corpus.class_of(&req.caption);
        let caption_ref = class.and_then(|c| corpus.captions(c).iter().position(|s| *s == req.caption).map(|index| CaptionRef { class: c, index }));
        let patches = decoded
            .into_iter()
            .enumerate()
            .map(|(k, mut patch)| {
                patch.center_label = class.unwrap_or(0);
                patch.caption = caption_ref;
                SyntheticPatch { patch, caption: req.caption.clone(), seed: req.seed.wrapping_add(k as u64), omega: req.omega }
            })
            .collect();
        Ok(SyntheticDataset { patches })
    }
}

/// One single-sample request per synthetic patch needed to bring class
/// counts up to the sample-balance plan. Captions of a class are used
/// round-robin; seeds come from a per-class stream of `seed`.
pub fn expansion_requests(
    counts: &[usize],
    corpus: &CaptionCorpus,
    lambda: f64,
    omega: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<(u16, GenerationRequest)>> {
    let plan = sbr_expansion_plan(counts, lambda)?;
    let mut requests = Vec::new();
    for (i, (&target, &n)) in plan.iter().zip(counts).enumerate() {
        let class = (i + 1) as u16;
        let extra = target - n;
        if extra == 0 {
            continue;
        }
        let captions = corpus.captions(class);
        if captions.is_empty() {
            bail!(Validation, "class {class} needs {extra} synthetic patches but has no caption");
        }
        let mut seeds = crate::rng_stream(seed, (7 << 32) | class as u64);
        for j in 0..extra {
            let caption = captions[j % captions.len()].clone();
            requests.push((class, GenerationRequest { caption, count: 1, omega, steps, seed: seeds.random() }));
        }
    }
    Ok(requests)
}

/// Real training patches plus enough synthetic patches per class to match
/// the sample-balance plan for `lambda`.
pub fn expand_dataset(
    train: &[Patch],
    corpus: &CaptionCorpus,
    class_count: u16,
    lambda: f64,
    omega: f64,
    steps: usize,
    seed: u64,
    generator: &Generator,
) -> Result<ExpandedDataset> {
    let counts = count_labels(train, class_count);
    let mut synthetic = SyntheticDataset::default();
    for (class, req) in expansion_requests(&counts, corpus, lambda, omega, steps, seed)? {
        let mut out = generator.generate_patches(&req, corpus)?;
        for s in &mut out.patches {
            s.patch.center_label = class;
        }
        synthetic.patches.append(&mut out.patches);
    }
    Ok(ExpandedDataset { real: train.to_vec(), synthetic })
}
