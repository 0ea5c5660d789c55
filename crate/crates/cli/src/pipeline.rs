//! The subcommands as library functions. Each reads its inputs from the
//! paths in [`RunConfig`] and writes its artifacts under `paths.out`.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::RngCore;

use hsi_ldm_core::eval::{
    attention_rasters, pca_2d, point_fidelity_by_class, reference_classifier, score, spectral_stats, Scores, SpectralStats,
};
use hsi_ldm_core::hsicube::{generate_toy_cube, normalize, sample_issd_split, CaptionCorpus, HsiCube, IssdSplit, Patch, SplitSpec};
use hsi_ldm_core::schedule::{q_sample, NoiseSchedule};
use hsi_ldm_core::synth::{expand_dataset, ExpandedDataset, GenerationRequest, Generator, SyntheticDataset};
use hsi_ldm_core::tensor::Matrix;
use hsi_ldm_core::textcond::{build_vocab, tokenize, Vocabulary};
use hsi_ldm_core::trainer::{latent_scale_factor, EpochRecord, LabeledLatent, LdmModel, TrainState};
use hsi_ldm_core::vae::{Vae, VaeEpochRecord};
use hsi_ldm_core::{rng_stream, Rng};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, csv, LdmCheckpoint};

pub const VAE_CHECKPOINT: &str = "vae.ckpt";
pub const VAE_LOSS: &str = "vae_loss.csv";
pub const LDM_CHECKPOINT: &str = "ldm.ckpt";
pub const LDM_LOSS: &str = "ldm_loss.csv";
pub const VOCAB: &str = "vocab.json";

// rng stream ids of the pipeline's own draws
const STREAM_VAE_INIT: u64 = 0x100;
const STREAM_LDM_INIT: u64 = 0x101;
const STREAM_FIDELITY: u64 = 0x102;
const STREAM_EVAL: u64 = 0x103;
const STREAM_ATTENTION: u64 = 0x104;

/// Normalized cube, its captions and the seeded train/test/unlabeled split.
pub struct Dataset {
    pub cube: HsiCube,
    pub corpus: CaptionCorpus,
    pub split: IssdSplit,
}

impl Dataset {
    pub fn class_count(&self) -> u16 {
        self.cube.class_count()
    }

    /// Every labeled patch, train and test.
    pub fn labeled(&self) -> impl Iterator<Item = &Patch> {
        self.split.train.iter().chain(&self.split.test)
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let cube = normalize(&formats::read_cube(&cfg.paths.cube)?)?;
    let corpus = formats::read_captions(&cfg.paths.captions)?;
    if cfg.split.per_class_train.len() != cube.class_count() as usize {
        return Err(CliError::Config(format!(
            "split.per_class_train lists {} classes, the cube has {}",
            cfg.split.per_class_train.len(),
            cube.class_count()
        )));
    }
    let spec = SplitSpec {
        per_class_train: cfg.split.per_class_train.clone(),
        seed: cfg.seed,
        unlabeled_pool_size: cfg.split.unlabeled,
        patch_side: cfg.split.patch_side,
    };
    let split = sample_issd_split(&cube, &corpus, &spec)?;
    Ok(Dataset { cube, corpus, split })
}

/// Writes the toy cube and its captions to `paths.cube` / `paths.captions`.
pub fn cmd_gen_toy(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let t = &cfg.toy;
    let (cube, corpus) = generate_toy_cube(t.classes, t.bands, (t.height, t.width), cfg.seed)?;
    formats::write_cube(&cfg.paths.cube, &cube)?;
    formats::write_captions(&cfg.paths.captions, &corpus)?;
    Ok(vec![cfg.paths.cube.clone(), cfg.paths.captions.clone()])
}

pub struct VaeSummary {
    pub history: Vec<VaeEpochRecord>,
    /// Reconstruction MSE of the saved checkpoint on its training patches.
    pub recon_mse: f64,
}

/// Trains the VAE on the labeled training patches and the unlabeled pool.
pub fn cmd_train_vae(cfg: &RunConfig) -> Result<VaeSummary> {
    let ds = load_dataset(cfg)?;
    let patches: Vec<&Patch> = ds.split.train.iter().chain(&ds.split.unlabeled).collect();
    let mut vae = Vae::new(cfg.vae_config(ds.cube.bands()), &mut rng_stream(cfg.seed, STREAM_VAE_INIT))?;
    let history = vae.train(&patches, &cfg.vae_train_config())?;
    let bytes = formats::encode_vae(&vae);
    let path = cfg.out(VAE_CHECKPOINT);
    formats::write_bytes(&path, &bytes)?;
    let saved = formats::decode_vae(&path, &bytes)?;
    let recon_mse = saved.reconstruction_mse(&patches)?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| vec![r.epoch.to_string(), r.recon.to_string(), r.kl.to_string(), r.adv.to_string(), r.disc.to_string()])
        .collect();
    formats::write_bytes(&cfg.out(VAE_LOSS), csv(&["epoch", "recon", "kl", "adv", "disc"], &rows).as_bytes())?;
    Ok(VaeSummary { history, recon_mse })
}

fn mean_latents(vae: &Vae, patches: &[&Patch]) -> Result<Vec<Matrix>> {
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vae.encode_batch(patches)?.into_iter().map(|p| p.mu).collect())
}

fn load_vae(cfg: &RunConfig, bands: usize) -> Result<Vae> {
    let path = cfg.out(VAE_CHECKPOINT);
    let vae = formats::read_vae(&path)?;
    if vae.config.bands != bands {
        return Err(CliError::format(&path, format!("VAE expects {} bands, the cube has {bands}", vae.config.bands)));
    }
    Ok(vae)
}

/// Trains the text encoder and denoiser on VAE mean latents and writes the
/// checkpoint, vocabulary and loss history.
pub fn cmd_train_ldm(cfg: &RunConfig) -> Result<Vec<EpochRecord>> {
    let ds = load_dataset(cfg)?;
    let vae = load_vae(cfg, ds.cube.bands())?;
    let vocab = build_vocab(&ds.corpus);
    let train: Vec<&Patch> = ds.split.train.iter().collect();
    let unlabeled: Vec<&Patch> = ds.split.unlabeled.iter().collect();
    let z_train = mean_latents(&vae, &train)?;
    let z_unlabeled = mean_latents(&vae, &unlabeled)?;
    let all: Vec<Matrix> = z_train.iter().chain(&z_unlabeled).cloned().collect();
    let latent_scale = latent_scale_factor(&all)?;
    let labeled: Vec<LabeledLatent> = train
        .iter()
        .zip(&z_train)
        .map(|(p, z)| {
            let caption = p.caption.and_then(|r| ds.corpus.get(r)).unwrap_or_default();
            LabeledLatent { z0: z.map(|v| v * latent_scale), tokens: tokenize(caption, &vocab), class: p.center_label }
        })
        .collect();
    let unlabeled: Vec<Matrix> = z_unlabeled.iter().map(|z| z.map(|v| v * latent_scale)).collect();
    let (model, base) = LdmModel::new(cfg.ldm_config(vocab.len()), &mut rng_stream(cfg.seed, STREAM_LDM_INIT))?;
    let mut state = TrainState::new(model, base, cfg.train_config(cfg.seed))?;
    let history = state.train(&labeled, &unlabeled, |_| {})?;
    let ckpt = LdmCheckpoint {
        config: state.model.config,
        latent_scale,
        epoch: state.epoch as u64,
        base: state.base,
        ema: state.ema,
        optimizer: state.optimizer,
    };
    formats::write_ldm(&cfg.out(LDM_CHECKPOINT), &ckpt)?;
    formats::write_vocab(&cfg.out(VOCAB), &vocab)?;
    let rows: Vec<Vec<String>> = history.iter().map(|r| vec![r.epoch.to_string(), r.l_dm.to_string(), r.l_con.to_string()]).collect();
    formats::write_bytes(&cfg.out(LDM_LOSS), csv(&["epoch", "l_dm", "l_con"], &rows).as_bytes())?;
    Ok(history)
}

/// Frozen VAE, EMA diffusion model and vocabulary loaded from `paths.out`.
pub struct Models {
    pub vae: Vae,
    pub ckpt: LdmCheckpoint,
    pub model: LdmModel,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
}

impl Models {
    pub fn load(cfg: &RunConfig, bands: usize) -> Result<Self> {
        let vae = load_vae(cfg, bands)?;
        let ckpt = formats::read_ldm(&cfg.out(LDM_CHECKPOINT))?;
        let vocab = formats::read_vocab(&cfg.out(VOCAB))?;
        if vocab.len() != ckpt.config.vocab_size {
            return Err(CliError::format(&cfg.out(VOCAB), format!("{} words, checkpoint expects {}", vocab.len(), ckpt.config.vocab_size)));
        }
        let model = ckpt.model()?;
        let schedule = ckpt.config.schedule()?;
        Ok(Self { vae, ckpt, model, vocab, schedule })
    }

    pub fn generator(&self, eta: f64) -> Generator<'_> {
        Generator {
            model: &self.model,
            ema: &self.ckpt.ema,
            vocab: &self.vocab,
            vae: &self.vae,
            schedule: &self.schedule,
            latent_scale: self.ckpt.latent_scale,
            eta,
        }
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if omega >= 0.0 && omega.is_finite() {
        Ok(())
    } else {
        Err(hsi_ldm_core::error::Error::Argument(format!("guidance coefficient must be nonnegative, got {omega}")).into())
    }
}

/// Generates `count` patches for one caption into `samples.hsp` and its
/// manifest `samples.json`.
pub fn cmd_sample(cfg: &RunConfig, caption: &str, count: usize, omega: f64) -> Result<SyntheticDataset> {
    check_omega(omega)?;
    let ds_corpus = formats::read_captions(&cfg.paths.captions)?;
    let bands = formats::read_cube(&cfg.paths.cube)?.bands();
    let models = Models::load(cfg, bands)?;
    let req = GenerationRequest { caption: caption.into(), count, omega, steps: cfg.sample.steps, seed: cfg.seed };
    let set = models.generator(cfg.sample.eta).generate_patches(&req, &ds_corpus)?;
    formats::write_archive(&cfg.out("samples.hsp"), &cfg.out("samples.json"), &set)?;
    Ok(set)
}

/// `n` patches per class, captions round-robin, each with its own seed.
fn per_class_samples(generator: &Generator, corpus: &CaptionCorpus, classes: u16, n: usize, omega: f64, steps: usize, seed: u64) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for class in 1..=classes {
        let captions = corpus.captions(class);
        let mut seeds = rng_stream(seed, (STREAM_FIDELITY << 32) | class as u64);
        for j in 0..n {
            let req = GenerationRequest { caption: captions[j % captions.len()].clone(), count: 1, omega, steps, seed: seeds.next_u64() };
            out.extend(generator.generate_patches(&req, corpus)?.patches.into_iter().map(|s| s.patch));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    pub variant: &'static str,
    pub seed: u64,
    pub train_size: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassFidelity {
    pub class: u16,
    pub max: f64,
    pub min: f64,
    pub real: SpectralStats,
    pub generated: SpectralStats,
    /// Max-norm distance between the real and generated mean spectra.
    pub mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub runs: Vec<VariantRun>,
    /// Synthetic patches added per class, by eval seed.
    pub added: Vec<Vec<usize>>,
    pub fidelity: Vec<ClassFidelity>,
}

impl EvalReport {
    /// Mean OA, AA and κ of one variant over the eval seeds.
    pub fn mean(&self, variant: &str) -> (f64, f64, f64) {
        let runs: Vec<&VariantRun> = self.runs.iter().filter(|r| r.variant == variant).collect();
        let n = runs.len() as f64;
        let sum = |f: fn(&Scores) -> f64| runs.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
        (sum(|s| s.oa), sum(|s| s.aa), sum(|s| s.kappa))
    }
}

fn expand(ds: &Dataset, cfg: &RunConfig, generator: &Generator, omega: f64, seed: u64) -> Result<ExpandedDataset> {
    if cfg.sample.lambda == 0.0 {
        return Ok(ExpandedDataset { real: ds.split.train.clone(), synthetic: SyntheticDataset::default() });
    }
    Ok(expand_dataset(&ds.split.train, &ds.corpus, ds.class_count(), cfg.sample.lambda, omega, cfg.sample.steps, seed, generator)?)
}

/// Seed of repetition `offset` for generation and classifier training.
fn eval_seed(cfg: &RunConfig, offset: u64) -> u64 {
    rng_stream(cfg.seed, (STREAM_EVAL << 32) | offset).next_u64()
}

fn classify(ds: &Dataset, cfg: &RunConfig, train: &[&Patch], seed: u64) -> Result<Scores> {
    let test: Vec<&Patch> = ds.split.test.iter().collect();
    let cm = reference_classifier(train, &test, ds.class_count(), cfg.classifier_config(seed))?;
    Ok(score(&cm)?)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Sample-balance expansion and reference-classifier scoring with and
/// without synthetic data, plus the generation quality analyses.
pub fn cmd_expand_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ds = load_dataset(cfg)?;
    let models = Models::load(cfg, ds.cube.bands())?;
    let generator = models.generator(cfg.sample.eta);
    let classes = ds.class_count();

    let generated = per_class_samples(&generator, &ds.corpus, classes, cfg.eval.samples_per_class, cfg.sample.omega, cfg.sample.steps, cfg.seed)?;
    let real: Vec<Patch> = ds.labeled().cloned().collect();
    let fidelity_pairs = point_fidelity_by_class(&real, &generated, classes)?;
    let mut fidelity = Vec::new();
    for (class, pair) in (1..=classes).zip(fidelity_pairs) {
        let (max, min) = pair.ok_or_else(|| CliError::Config(format!("class {class} has no real or generated patches")))?;
        let r: Vec<&Patch> = real.iter().filter(|p| p.center_label == class).collect();
        let g: Vec<&Patch> = generated.iter().filter(|p| p.center_label == class).collect();
        let (rs, gs) = (spectral_stats(&r, class)?, spectral_stats(&g, class)?);
        let mean_gap = rs.mean.iter().zip(&gs.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        fidelity.push(ClassFidelity { class, max, min, real: rs, generated: gs, mean_gap });
    }

    let mut runs = Vec::new();
    let mut added = Vec::new();
    for &offset in &cfg.eval.seeds {
        let seed = eval_seed(cfg, offset);
        let expanded = expand(&ds, cfg, &generator, cfg.sample.omega, seed)?;
        let base_train: Vec<&Patch> = ds.split.train.iter().collect();
        let all_train: Vec<&Patch> = expanded.samples().map(|(p, _)| p).collect();
        let mut counts = vec![0usize; classes as usize];
        for s in &expanded.synthetic.patches {
            counts[s.patch.center_label as usize - 1] += 1;
        }
        added.push(counts);
        runs.push(VariantRun { variant: "baseline", seed: offset, train_size: base_train.len(), scores: classify(&ds, cfg, &base_train, seed)? });
        runs.push(VariantRun { variant: "expanded", seed: offset, train_size: all_train.len(), scores: classify(&ds, cfg, &all_train, seed)? });
    }
    let report = EvalReport { runs, added, fidelity };
    write_eval_outputs(cfg, &report, &real, &generated)?;
    Ok(report)
}

fn write_eval_outputs(cfg: &RunConfig, report: &EvalReport, real: &[Patch], generated: &[Patch]) -> Result<()> {
    let mut rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .map(|r| vec![r.variant.into(), r.seed.to_string(), r.train_size.to_string(), fmt(r.scores.oa), fmt(r.scores.aa), fmt(r.scores.kappa)])
        .collect();
    for variant in ["baseline", "expanded"] {
        let (oa, aa, k) = report.mean(variant);
        rows.push(vec![variant.into(), "mean".into(), String::new(), fmt(oa), fmt(aa), fmt(k)]);
    }
    formats::write_bytes(&cfg.out("metrics.csv"), csv(&["variant", "seed", "train_size", "oa", "aa", "kappa"], &rows).as_bytes())?;

    let per_class: Vec<Vec<String>> = report
        .runs
        .iter()
        .flat_map(|r| {
            r.scores.per_class.iter().enumerate().map(move |(i, acc)| {
                vec![r.variant.into(), r.seed.to_string(), (i + 1).to_string(), acc.map_or(String::new(), fmt)]
            })
        })
        .collect();
    formats::write_bytes(&cfg.out("per_class.csv"), csv(&["variant", "seed", "class", "accuracy"], &per_class).as_bytes())?;

    let fid: Vec<Vec<String>> = report.fidelity.iter().map(|f| vec![f.class.to_string(), fmt(f.max), fmt(f.min), fmt(f.mean_gap)]).collect();
    formats::write_bytes(&cfg.out("fidelity.csv"), csv(&["class", "max", "min", "mean_gap"], &fid).as_bytes())?;

    let mut stats = Vec::new();
    for f in &report.fidelity {
        for (source, s) in [("real", &f.real), ("generated", &f.generated)] {
            for (b, (m, sd)) in s.mean.iter().zip(&s.std).enumerate() {
                stats.push(vec![f.class.to_string(), source.into(), b.to_string(), fmt(*m), fmt(*sd)]);
            }
        }
    }
    formats::write_bytes(&cfg.out("spectral_stats.csv"), csv(&["class", "source", "band", "mean", "std"], &stats).as_bytes())?;

    let tagged: Vec<(&Patch, &str)> = real.iter().map(|p| (p, "real")).chain(generated.iter().map(|p| (p, "generated"))).collect();
    let bands = tagged[0].0.bands;
    let spectra = Matrix::from_vec(tagged.len(), bands, tagged.iter().flat_map(|(p, _)| p.center_spectrum()).collect());
    let pca = pca_2d(&spectra)?;
    let pts: Vec<Vec<String>> = tagged
        .iter()
        .enumerate()
        .map(|(i, (p, src))| vec![fmt(pca.scores.get(i, 0)), fmt(pca.scores.get(i, 1)), p.center_label.to_string(), src.to_string()])
        .collect();
    formats::write_bytes(&cfg.out("pca.csv"), csv(&["x", "y", "class", "source"], &pts).as_bytes())?;

    let mut text = String::new();
    writeln!(text, "lambda {}  omega {}  ddim steps {}", cfg.sample.lambda, cfg.sample.omega, cfg.sample.steps).ok();
    for (offset, counts) in cfg.eval.seeds.iter().zip(&report.added) {
        writeln!(text, "seed {offset}: synthetic patches per class {counts:?}").ok();
    }
    writeln!(text, "\n{:<10} {:>8} {:>8} {:>8}", "variant", "OA", "AA", "kappa").ok();
    for variant in ["baseline", "expanded"] {
        let (oa, aa, k) = report.mean(variant);
        writeln!(text, "{variant:<10} {oa:>8.4} {aa:>8.4} {k:>8.4}").ok();
    }
    writeln!(text, "\n{:<6} {:>8} {:>8} {:>9}", "class", "fid.max", "fid.min", "mean gap").ok();
    for f in &report.fidelity {
        writeln!(text, "{:<6} {:>8.4} {:>8.4} {:>9.4}", f.class, f.max, f.min, f.mean_gap).ok();
    }
    formats::write_bytes(&cfg.out("report.txt"), text.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega: f64,
    pub added: usize,
    pub scores: Scores,
}

/// Expansion + classifier scores for every ω in `eval.omegas`, using the
/// first eval seed.
pub fn cmd_sweep_omega(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    for &w in &cfg.eval.omegas {
        check_omega(w)?;
    }
    let ds = load_dataset(cfg)?;
    let models = Models::load(cfg, ds.cube.bands())?;
    let generator = models.generator(cfg.sample.eta);
    let seed = eval_seed(cfg, cfg.eval.seeds[0]);
    let mut rows = Vec::new();
    for &omega in &cfg.eval.omegas {
        let expanded = expand(&ds, cfg, &generator, omega, seed)?;
        let train: Vec<&Patch> = expanded.samples().map(|(p, _)| p).collect();
        rows.push(SweepRow { omega, added: expanded.synthetic.patches.len(), scores: classify(&ds, cfg, &train, seed)? });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.omega.to_string(), r.added.to_string(), fmt(r.scores.oa), fmt(r.scores.aa), fmt(r.scores.kappa)])
        .collect();
    formats::write_bytes(&cfg.out("sweep_omega.csv"), csv(&["omega", "synthetic", "oa", "aa", "kappa"], &table).as_bytes())?;
    Ok(rows)
}

fn file_word(word: &str) -> String {
    word.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Noises a real patch of the caption's class to `eval.attention_step`,
/// runs one conditioned denoiser pass, and writes one PGM and one CSV per
/// caption word under `attention/`.
pub fn cmd_attn_export(cfg: &RunConfig, caption: &str) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let models = Models::load(cfg, ds.cube.bands())?;
    let class = ds.corpus.class_of(caption);
    let patch = ds
        .split
        .train
        .iter()
        .find(|p| Some(p.center_label) == class)
        .or_else(|| ds.split.train.first())
        .ok_or_else(|| CliError::Config("no training patches".into()))?;
    let z0 = models.vae.encode(patch)?.mu.map(|v| v * models.ckpt.latent_scale);
    let t = cfg.eval.attention_step;
    let mut rng: Rng = rng_stream(cfg.seed, STREAM_ATTENTION);
    let eps: Vec<f64> = (0..z0.len()).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
    let zt = Matrix::from_vec(z0.rows(), z0.cols(), q_sample(z0.data(), t, &eps, &models.schedule)?);
    let tokens = tokenize(caption, &models.vocab);
    let c = models.model.text.encode_text(&models.ckpt.ema, &tokens);
    let (_, maps) = models.model.denoiser.denoise(&models.ckpt.ema, &zt, t, &c, true)?;
    let side = models.ckpt.config.side;
    let rasters = attention_rasters(&maps, &tokens, &models.vocab, side)?;
    let dir = cfg.out("attention");
    let mut written = Vec::new();
    for r in &rasters {
        let stem = format!("{:02}_{}", r.position, file_word(&r.word));
        let pgm = dir.join(format!("{stem}.pgm"));
        formats::write_bytes(&pgm, &formats::pgm(&r.normalized, side, side))?;
        let rows: Vec<Vec<String>> = (0..side * side)
            .map(|p| vec![p.to_string(), (p / side).to_string(), (p % side).to_string(), r.raw[p].to_string(), fmt(r.normalized[p])])
            .collect();
        let csv_path = dir.join(format!("{stem}.csv"));
        formats::write_bytes(&csv_path, csv(&["pixel", "row", "col", "raw", "normalized"], &rows).as_bytes())?;
        written.push(pgm);
        written.push(csv_path);
    }
    Ok(written)
}

/// Caption used when none is given: the configured one, else the first
/// caption of class 1.
pub fn default_caption(cfg: &RunConfig) -> Result<String> {
    if let Some(c) = &cfg.sample.caption {
        return Ok(c.clone());
    }
    let corpus = formats::read_captions(&cfg.paths.captions)?;
    corpus.captions(1).first().cloned().ok_or_else(|| CliError::Config("class 1 has no caption".into()))
}
