//! Semi-supervised diffusion training: three-branch stochastic augmentation
//! of labeled latents, guidance dropout to the null embedding, consistency
//! against an EMA teacher on unlabeled latents, AdamW on the student and an
//! EMA update after every step.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::augment::{lfue, random_polygon_mask, rpsc_mix, PolygonMask};
use crate::autograd::{Tape, Var};
use crate::denoiser::{Denoiser, DenoiserConfig, LATENT_CHANNELS};
use crate::error::{bail, Result};
use crate::params::{AdamW, AdamWConfig, Bound, Fwd, ParamId, ParamStore};
use crate::schedule::{q_sample, NoiseSchedule};
use crate::tensor::Matrix;
use crate::textcond::{mix_text_vars, TextEmbedding, TextEncoder, TextEncoderConfig, TextVar, TokenSequence};

/// Architecture of the text encoder + denoiser pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdmConfig {
    pub side: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub text_layers: usize,
    pub vocab_size: usize,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl LdmConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

/// Text encoder and denoiser sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct LdmModel {
    pub config: LdmConfig,
    pub text: TextEncoder,
    pub denoiser: Denoiser,
}

impl LdmModel {
    pub fn new<R: Rng + ?Sized>(config: LdmConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        if config.dim == 0 || config.heads == 0 || !config.dim.is_multiple_of(config.heads) || !config.dim.is_multiple_of(4) {
            bail!(Argument, "embedding width {} must be a positive multiple of 4 and of the head count {}", config.dim, config.heads);
        }
        if config.vocab_size < 4 || config.side == 0 || config.blocks == 0 {
            bail!(Argument, "invalid model configuration {config:?}");
        }
        config.schedule()?;
        let mut store = ParamStore::new();
        let text = TextEncoder::new(
            &mut store,
            TextEncoderConfig { vocab_size: config.vocab_size, dim: config.dim, heads: config.heads, layers: config.text_layers },
            rng,
        );
        let denoiser = Denoiser::new(
            &mut store,
            DenoiserConfig { side: config.side, dim: config.dim, heads: config.heads, blocks: config.blocks, steps: config.steps },
            rng,
        );
        Ok((Self { config, text, denoiser }, store))
    }

    /// Architecture for `config` with the parameter layout of
    /// [`LdmModel::new`]; values must be loaded separately.
    pub fn skeleton(config: LdmConfig) -> Result<(Self, ParamStore)> {
        Self::new(config, &mut crate::rng_stream(0, 0))
    }

    pub fn null_slot(&self) -> ParamId {
        self.text.null_slot()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub unlabeled_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    pub cond_drop_prob: f64,
    /// Upper bounds of the plain and LF-UE branches on the uniform draw.
    pub thresholds: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 64,
            unlabeled_batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.01,
            ema_alpha: 0.99,
            cond_drop_prob: 0.1,
            thresholds: (1.0 / 3.0, 2.0 / 3.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            bail!(Argument, "EMA coefficient {} outside (0, 1)", self.ema_alpha);
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) && self.cond_drop_prob != 1.0 {
            bail!(Argument, "conditioning drop probability {} outside [0, 1]", self.cond_drop_prob);
        }
        let (a, b) = self.thresholds;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            bail!(Argument, "branch thresholds {a}, {b} not ordered within [0, 1]");
        }
        if self.batch_size == 0 {
            bail!(Argument, "batch size must be positive");
        }
        if !(self.lr > 0.0) {
            bail!(Argument, "learning rate must be positive");
        }
        Ok(())
    }
}

/// A labeled latent with its tokenized caption.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLatent {
    pub z0: Matrix,
    pub tokens: TokenSequence,
    pub class: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Plain,
    Lfue,
    Rpsc,
}

pub fn branch_for(p: f64, thresholds: (f64, f64)) -> Branch {
    if p <= thresholds.0 {
        Branch::Plain
    } else if p <= thresholds.1 {
        Branch::Lfue
    } else {
        Branch::Rpsc
    }
}

/// `β ← α·β + (1 − α)·θ`, elementwise.
pub fn ema_update(ema: &mut [f64], base: &[f64], alpha: f64) -> Result<()> {
    if ema.len() != base.len() {
        bail!(Argument, "EMA length {} differs from base length {}", ema.len(), base.len());
    }
    for (e, b) in ema.iter_mut().zip(base) {
        *e = alpha * *e + (1.0 - alpha) * b;
    }
    Ok(())
}

/// Factor bringing latents to unit standard deviation over all elements.
pub fn latent_scale_factor(latents: &[Matrix]) -> Result<f64> {
    let n: usize = latents.iter().map(Matrix::len).sum();
    if n < 2 {
        bail!(Argument, "need at least two latent values to estimate a scale");
    }
    let mean = latents.iter().flat_map(|m| m.data()).sum::<f64>() / n as f64;
    let var = latents.iter().flat_map(|m| m.data()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        bail!(NumericDomain, "latents have zero variance");
    }
    Ok(1.0 / libm::sqrt(var))
}

/// Every random quantity consumed by one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub p: f64,
    pub t: Vec<usize>,
    pub eps: Vec<Matrix>,
    pub drop: Vec<bool>,
    pub eps_mu: Vec<Vec<f64>>,
    pub eps_sigma: Vec<Vec<f64>>,
    pub masks: Vec<PolygonMask>,
    pub t_unlabeled: Vec<usize>,
    pub eps_unlabeled: Vec<Matrix>,
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Independent per-purpose streams for one epoch.
struct EpochRngs {
    branch: crate::Rng,
    noise: crate::Rng,
    dropout: crate::Rng,
    augment: crate::Rng,
}

impl EpochRngs {
    fn new(seed: u64, epoch: usize) -> Self {
        let s = |purpose: u64| crate::rng_stream(seed, (purpose << 32) | epoch as u64);
        Self { branch: s(2), noise: s(3), dropout: s(4), augment: s(5) }
    }

    fn draw(&mut self, labeled: usize, unlabeled: usize, side: usize, steps: usize, cond_drop: f64) -> Result<StepDraws> {
        let pixels = side * side;
        let p = self.branch.random::<f64>();
        let t = (0..labeled).map(|_| self.noise.random_range(1..=steps)).collect();
        let eps = (0..labeled).map(|_| normal_matrix(pixels, LATENT_CHANNELS, &mut self.noise)).collect();
        let t_unlabeled = (0..unlabeled).map(|_| self.noise.random_range(1..=steps)).collect();
        let eps_unlabeled = (0..unlabeled).map(|_| normal_matrix(pixels, LATENT_CHANNELS, &mut self.noise)).collect();
        let drop = (0..labeled).map(|_| self.dropout.random::<f64>() < cond_drop).collect();
        let row = |rng: &mut crate::Rng| (0..LATENT_CHANNELS).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
        let eps_mu = (0..labeled).map(|_| row(&mut self.augment)).collect();
        let eps_sigma = (0..labeled).map(|_| row(&mut self.augment)).collect();
        let masks = (0..labeled)
            .map(|_| {
                let k = self.augment.random_range(3..=8);
                random_polygon_mask(side, k, &mut self.augment)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StepDraws { p, t, eps, drop, eps_mu, eps_sigma, masks, t_unlabeled, eps_unlabeled })
    }
}

/// Loss values and instrumentation of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub branch: Branch,
    /// Whether each labeled sample was conditioned on the null embedding.
    pub used_null: Vec<bool>,
    pub l_dm: f64,
    pub l_con: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_dm: f64,
    pub l_con: f64,
}

/// Mean squared difference of two noise predictions.
pub fn prediction_mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(Argument, "prediction shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn mse_var(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    tape.mean(sq)
}

fn noised(z0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    Ok(Matrix::from_vec(z0.rows(), z0.cols(), q_sample(z0.data(), t, eps.data(), sched)?))
}

/// `mean((ε − ε̂(q_sample(z0, t, ε), t, c))²)` under `params`.
pub fn supervised_loss(
    model: &LdmModel,
    params: &ParamStore,
    z0: &Matrix,
    c: &TextEmbedding,
    t: usize,
    eps: &Matrix,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let zt = noised(z0, t, eps, sched)?;
    let (eps_hat, _) = model.denoiser.denoise(params, &zt, t, c, false)?;
    prediction_mse(eps, &eps_hat)
}

/// `mean((ε̂_base(z_t, t, ∅) − ε̂_ema(z_t, t, ∅))²)` with a shared noise draw.
pub fn consistency_loss(
    model: &LdmModel,
    base: &ParamStore,
    ema: &ParamStore,
    z: &Matrix,
    t: usize,
    eps: &Matrix,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if !base.same_layout(ema) {
        bail!(Argument, "base and EMA parameter layouts differ");
    }
    let zt = noised(z, t, eps, sched)?;
    let (a, _) = model.denoiser.denoise(base, &zt, t, &model.text.null_embedding(base), false)?;
    let (b, _) = model.denoiser.denoise(ema, &zt, t, &model.text.null_embedding(ema), false)?;
    prediction_mse(&a, &b)
}

/// Tape-level consistency term; the EMA branch enters through a detached
/// copy, so `ema_bound` never receives a gradient.
fn consistency_on_tape(
    model: &LdmModel,
    tape: &mut Tape,
    base: &mut Bound,
    ema_bound: &mut Bound,
    zt: &Matrix,
    t: usize,
) -> Result<Var> {
    let teacher = {
        let mut f = Fwd::new(tape, ema_bound);
        let z = f.input(zt.clone());
        let null = model.text.null_var(&mut f);
        let out = model.denoiser.forward(&mut f, z, t, &null, false)?;
        f.tape.detach(out.eps)
    };
    let mut f = Fwd::new(tape, base);
    let z = f.input(zt.clone());
    let null = model.text.null_var(&mut f);
    let student = model.denoiser.forward(&mut f, z, t, &null, false)?;
    Ok(mse_var(f.tape, student.eps, teacher))
}

/// Gradient of the step objective `L_dm + L_con` with respect to the base
/// parameters, plus the loss values.
pub fn step_gradient(
    model: &LdmModel,
    base: &ParamStore,
    ema: &ParamStore,
    labeled: &[&LabeledLatent],
    unlabeled: &[&Matrix],
    draws: &StepDraws,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(StepReport, Vec<f64>, Vec<f64>)> {
    let n = labeled.len();
    if n == 0 {
        bail!(Argument, "empty labeled batch");
    }
    if draws.t.len() != n || draws.eps.len() != n || draws.drop.len() != n || draws.masks.len() != n {
        bail!(Argument, "step draws do not match the labeled batch size {n}");
    }
    if draws.t_unlabeled.len() < unlabeled.len() || draws.eps_unlabeled.len() < unlabeled.len() {
        bail!(Argument, "step draws do not cover the unlabeled batch");
    }
    let mut branch = branch_for(draws.p, cfg.thresholds);
    if branch == Branch::Lfue && n < 2 {
        branch = Branch::Plain;
    }
    let z0: Vec<Matrix> = labeled.iter().map(|l| l.z0.clone()).collect();
    let mut tape = Tape::new();
    let mut bound = Bound::new(base);

    let mut cache: BTreeMap<Vec<u32>, TextVar> = BTreeMap::new();
    let mut contexts = Vec::with_capacity(n);
    {
        let mut f = Fwd::new(&mut tape, &mut bound);
        for l in labeled {
            let ctx = match cache.get(&l.tokens.ids) {
                Some(c) => c.clone(),
                None => {
                    let c = model.text.forward(&mut f, &l.tokens);
                    cache.insert(l.tokens.ids.clone(), c.clone());
                    c
                }
            };
            contexts.push(ctx);
        }
    }

    let inputs: Vec<Matrix> = match branch {
        Branch::Plain => z0,
        Branch::Lfue => lfue(&z0, &draws.eps_mu, &draws.eps_sigma)?,
        Branch::Rpsc => {
            let mut mixed = Vec::with_capacity(n);
            let mut mixed_ctx = Vec::with_capacity(n);
            let mut f = Fwd::new(&mut tape, &mut bound);
            for i in 0..n {
                let j = (i + 1) % n;
                let (z, ratio) = rpsc_mix(&z0[i], &z0[j], &draws.masks[i])?;
                mixed.push(z);
                mixed_ctx.push(mix_text_vars(&mut f, &contexts[i], &contexts[j], ratio)?);
            }
            contexts = mixed_ctx;
            mixed
        }
    };

    let mut sup_terms = Vec::with_capacity(n);
    {
        let mut f = Fwd::new(&mut tape, &mut bound);
        let null = model.text.null_var(&mut f);
        for i in 0..n {
            let ctx = if draws.drop[i] { &null } else { &contexts[i] };
            let zt = f.input(noised(&inputs[i], draws.t[i], &draws.eps[i], sched)?);
            let out = model.denoiser.forward(&mut f, zt, draws.t[i], ctx, false)?;
            let target = f.input(draws.eps[i].clone());
            sup_terms.push(mse_var(f.tape, out.eps, target));
        }
    }
    let l_dm = mean_of(&mut tape, &sup_terms);

    let mut ema_bound = Bound::new(ema);
    let mut con_terms = Vec::with_capacity(unlabeled.len());
    for (k, z) in unlabeled.iter().enumerate() {
        let zt = noised(z, draws.t_unlabeled[k], &draws.eps_unlabeled[k], sched)?;
        con_terms.push(consistency_on_tape(model, &mut tape, &mut bound, &mut ema_bound, &zt, draws.t_unlabeled[k])?);
    }
    let total = if con_terms.is_empty() {
        l_dm
    } else {
        let l_con = mean_of(&mut tape, &con_terms);
        tape.add(l_dm, l_con)
    };
    let l_dm_value = tape.value(l_dm).item();
    let l_con_value = tape.value(total).item() - l_dm_value;
    if !tape.value(total).item().is_finite() {
        bail!(Training, "diffusion loss is not finite (L_dm {l_dm_value}, L_con {l_con_value})");
    }
    let grads = tape.backward(total);
    let report = StepReport { branch, used_null: draws.drop.clone(), l_dm: l_dm_value, l_con: if con_terms.is_empty() { 0.0 } else { l_con_value } };
    Ok((report, bound.flat_grad(&grads), ema_bound.flat_grad(&grads)))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Student, EMA teacher and optimizer state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: LdmModel,
    pub base: ParamStore,
    pub ema: ParamStore,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    /// The EMA starts as a copy of the freshly initialized base.
    pub fn new(model: LdmModel, base: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() }, base.len());
        Ok(Self { model, ema: base.clone(), base, optimizer, config, epoch: 0 })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.model.config.schedule()
    }

    /// One optimizer step on the base parameters followed by the EMA update.
    pub fn train_step(&mut self, labeled: &[&LabeledLatent], unlabeled: &[&Matrix], draws: &StepDraws) -> Result<StepReport> {
        let sched = self.schedule()?;
        let (report, grad, _) = step_gradient(&self.model, &self.base, &self.ema, labeled, unlabeled, draws, &self.config, &sched)?;
        self.optimizer.update(self.base.flat_mut(), &grad)?;
        if !self.base.is_finite() {
            bail!(Training, "parameters became non-finite at optimizer step {}", self.optimizer.step);
        }
        ema_update(self.ema.flat_mut(), self.base.flat(), self.config.ema_alpha)?;
        Ok(report)
    }

    /// One pass over the labeled set in shuffled batches; each step also
    /// draws a random unlabeled batch. `on_step` sees the base parameters
    /// after every update.
    pub fn run_epoch(
        &mut self,
        labeled: &[LabeledLatent],
        unlabeled: &[Matrix],
        mut on_step: impl FnMut(&StepReport, &ParamStore),
    ) -> Result<EpochRecord> {
        if labeled.is_empty() {
            bail!(Argument, "no labeled latents to train on");
        }
        let epoch = self.epoch + 1;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut crate::rng_stream(seed, (1 << 32) | epoch as u64));
        let mut pick = crate::rng_stream(seed, (6 << 32) | epoch as u64);
        let mut rngs = EpochRngs::new(seed, epoch);
        let side = self.model.config.side;
        let (mut dm, mut con, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&LabeledLatent> = chunk.iter().map(|&i| &labeled[i]).collect();
            let m = self.config.unlabeled_batch_size.min(unlabeled.len());
            let ub: Vec<&Matrix> = index::sample(&mut pick, unlabeled.len(), m).iter().map(|i| &unlabeled[i]).collect();
            let draws = rngs.draw(batch.len(), ub.len(), side, self.model.config.steps, self.config.cond_drop_prob)?;
            let report = self.train_step(&batch, &ub, &draws)?;
            dm += report.l_dm;
            con += report.l_con;
            steps += 1;
            on_step(&report, &self.base);
        }
        self.epoch = epoch;
        Ok(EpochRecord { epoch, l_dm: dm / steps as f64, l_con: con / steps as f64 })
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn train(&mut self, labeled: &[LabeledLatent], unlabeled: &[Matrix], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let rec = self.run_epoch(labeled, unlabeled, |_, _| {})?;
            on_epoch(&rec);
            history.push(rec);
        }
        Ok(history)
    }
}

/// Draws for a single step outside the epoch loop; used for probes.
pub fn draw_step(seed: u64, labeled: usize, unlabeled: usize, side: usize, steps: usize, cond_drop: f64) -> Result<StepDraws> {
    EpochRngs::new(seed, 0).draw(labeled, unlabeled, side, steps, cond_drop)
}

/// Fresh all-zero draws with `p` fixed; handy for deterministic probes.
pub fn fixed_draws(p: f64, labeled: usize, side: usize, t: usize) -> Result<StepDraws> {
    let pixels = side * side;
    let mask = PolygonMask::from_mask(side, (0..pixels).map(|i| i % 2 == 0).collect())?;
    Ok(StepDraws {
        p,
        t: vec![t; labeled],
        eps: vec![Matrix::zeros(pixels, LATENT_CHANNELS); labeled],
        drop: vec![false; labeled],
        eps_mu: vec![vec![0.0; LATENT_CHANNELS]; labeled],
        eps_sigma: vec![vec![0.0; LATENT_CHANNELS]; labeled],
        masks: vec![mask; labeled],
        t_unlabeled: Vec::new(),
        eps_unlabeled: Vec::new(),
    })
}
