//! Acceptance checks, one PASS/FAIL line each. Expected values come either
//! from the published figures or from independent computations below; the
//! end-to-end run drives the same pipeline functions as the binary.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hsi_ldm::pipeline;
use hsi_ldm::RunConfig;
use hsi_ldm_core::augment::lfue;
use hsi_ldm_core::denoiser::{Denoiser, DenoiserConfig};
use hsi_ldm_core::eval::{attention_rasters, score, ConfusionMatrix};
use hsi_ldm_core::hsicube::{sbr_expansion_plan, CaptionCorpus, Granularity};
use hsi_ldm_core::nn::Attention;
use hsi_ldm_core::params::{Bound, Fwd, ParamStore};
use hsi_ldm_core::schedule::{cfg_combine, ddim_step, q_sample, NoiseSchedule};
use hsi_ldm_core::textcond::{build_vocab, tokenize, TextEncoder, TextEncoderConfig};
use hsi_ldm_core::trainer::{ema_update, LabeledLatent, LdmConfig, LdmModel, TrainConfig, TrainState};
use hsi_ldm_core::vae::{Vae, VaeConfig};
use hsi_ldm_core::{autograd::Tape, Matrix};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, || format!("took {:.2}s, limit {limit}s", elapsed.as_secs_f64()))
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(500, 1e-4, 0.02).unwrap()
}

fn schedule_oracle() -> Outcome {
    let start = Instant::now();
    let s = schedule();
    let mut product = 1.0;
    let mut worst: f64 = 0.0;
    for t in 1..=500 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 499.0;
        product *= 1.0 - beta;
        worst = worst.max((s.alpha_bar(t) - product).abs());
        if t > 1 {
            ensure(s.alpha_bar(t) < s.alpha_bar(t - 1), || format!("alpha_bar not decreasing at {t}"))?;
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 1.0)?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn forward_distribution() -> Outcome {
    let start = Instant::now();
    let s = schedule();
    let n = 100_000;
    let z0 = 0.8;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut notes = Vec::new();
    for t in [1, 250, 500] {
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = q_sample(&vec![z0; n], t, &eps, &s).map_err(|e| e.to_string())?;
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let (want_mean, want_var) = (ab.sqrt() * z0, 1.0 - ab);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        let (zm, zv) = ((mean - want_mean) / se_mean, (var - want_var) / se_var);
        ensure(zm.abs() <= 3.0 && zv.abs() <= 3.0, || format!("t={t}: mean off by {zm:.2} SE, variance by {zv:.2} SE"))?;
        notes.push(format!("t={t} {zm:+.2}/{zv:+.2} SE"));
    }
    within(start.elapsed(), 10.0)?;
    Ok(notes.join(", "))
}

fn perfect_oracle_ddim() -> Outcome {
    let start = Instant::now();
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0: Vec<f64> = (0..324).map(|_| rng.sample(StandardNormal)).collect();
    let ab = s.alpha_bar(500);
    let mut z: Vec<f64> = z0.iter().map(|v| ab.sqrt() * v + (1.0 - ab).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let steps = s.ddim_timesteps(50).map_err(|e| e.to_string())?;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let a = s.alpha_bar(t);
        let eps: Vec<f64> = z.iter().zip(&z0).map(|(zt, x)| (zt - a.sqrt() * x) / (1.0 - a).sqrt()).collect();
        z = ddim_step(&z, t, t_prev, &eps, &s, 0.0, &mut rng).map_err(|e| e.to_string())?;
    }
    let err = z.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-5, || format!("max-norm error {err:e}"))?;
    within(start.elapsed(), 1.0)?;
    Ok(format!("max-norm error {err:.1e}"))
}

fn cfg_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let (ec, eu) = (draw(64), draw(64));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure(cfg_combine(&ec, &eu, 0.0).unwrap() == ec, || "omega=0 differs from the conditional prediction".into())?;
    let mut worst: f64 = 0.0;
    for omega in [0.0, 0.35, 0.7, 1.0, 1.5, 2.0, 7.5] {
        ensure(cfg_combine(&ec, &ec, omega).unwrap() == ec, || format!("equal predictions do not collapse at omega={omega}"))?;
        let bar = cfg_combine(&ec, &eu, omega).unwrap();
        let lhs = norm(&bar.iter().zip(&eu).map(|(a, b)| a - b).collect::<Vec<_>>());
        let rhs = (1.0 + omega) * norm(&ec.iter().zip(&eu).map(|(a, b)| a - b).collect::<Vec<_>>());
        worst = worst.max((lhs - rhs).abs());
    }
    ensure(worst <= 1e-10, || format!("affine law off by {worst:e}"))?;
    Ok(format!("affine law residual {worst:.1e}"))
}

fn lfue_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch: Vec<Matrix> = (0..4).map(|_| Matrix::from_vec(81, 4, (0..324).map(|_| rng.sample(StandardNormal)).collect())).collect();
    let zeros = vec![vec![0.0; 4]; 4];
    let out = lfue(&batch, &zeros, &zeros).map_err(|e| e.to_string())?;
    let err = batch.iter().zip(&out).flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
    ensure(err <= 1e-6, || format!("zero noise changed the batch by {err:e}"))?;
    // sample means 0 and 1 give a batch spread of 0.5; unit noise on the
    // first sample's mean moves it by exactly that much
    let a = Matrix::from_vec(2, 1, vec![-1.0, 1.0]);
    let b = Matrix::from_vec(2, 1, vec![0.0, 2.0]);
    let out = lfue(&[a, b.clone()], &[vec![1.0], vec![0.0]], &[vec![0.0], vec![0.0]]).map_err(|e| e.to_string())?;
    ensure(out[0].data() == [-0.5, 1.5], || format!("shifted sample {:?}, expected [-0.5, 1.5]", out[0].data()))?;
    ensure(out[1] == b, || "unperturbed sample changed".into())?;
    Ok(format!("zero-noise residual {err:.1e}, hand example exact"))
}

fn toy_corpus() -> CaptionCorpus {
    let mut c = CaptionCorpus::new(Granularity::Fine);
    c.push(1, "class 1 region, narrow, adjacent to class 2");
    c.push(2, "class 2 region, rounded, adjacent to class 1");
    c
}

fn ema_closed_form() -> Outcome {
    let mut e = vec![0.0];
    for _ in 0..100 {
        ema_update(&mut e, &[1.0], 0.99).map_err(|e| e.to_string())?;
    }
    let want = 1.0 - 0.99f64.powi(100);
    ensure((e[0] - want).abs() <= 1e-9, || format!("{} vs {want}", e[0]))?;

    let corpus = toy_corpus();
    let vocab = build_vocab(&corpus);
    let cfg = LdmConfig { side: 3, dim: 8, heads: 2, blocks: 2, text_layers: 1, vocab_size: vocab.len(), steps: 500, beta_min: 1e-4, beta_max: 0.02 };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (model, base) = LdmModel::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let labeled: Vec<LabeledLatent> = (0..4)
        .map(|i| {
            let class = (i % 2) as u16 + 1;
            let z0 = Matrix::from_vec(9, 4, (0..36).map(|_| rng.sample(StandardNormal)).collect());
            LabeledLatent { z0, tokens: tokenize(&corpus.captions(class)[0], &vocab), class }
        })
        .collect();
    let unlabeled = vec![Matrix::filled(9, 4, 0.3), Matrix::filled(9, 4, -0.4)];
    let tc = TrainConfig { epochs: 3, batch_size: 2, unlabeled_batch_size: 2, lr: 1e-3, seed: 3, ..TrainConfig::default() };
    let mut state = TrainState::new(model, base.clone(), tc).map_err(|e| e.to_string())?;
    let mut trajectory = Vec::new();
    for _ in 0..3 {
        state.run_epoch(&labeled, &unlabeled, |_, p| trajectory.push(p.flat().to_vec())).map_err(|e| e.to_string())?;
    }
    let mut replay = base.flat().to_vec();
    for snapshot in &trajectory {
        ema_update(&mut replay, snapshot, 0.99).map_err(|e| e.to_string())?;
    }
    let same = replay.iter().zip(state.ema.flat()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "replayed EMA differs from the live state".into())?;
    Ok(format!("closed form residual {:.1e}, replay of {} steps bit-identical", (e[0] - want).abs(), trajectory.len()))
}

/// Central differences on `samples` random coordinates of `params`.
fn finite_difference_check(params: &mut [f64], samples: usize, seed: u64, mut loss: impl FnMut(&[f64]) -> (f64, Vec<f64>)) -> Result<f64, String> {
    let (_, analytic) = loss(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..params.len());
        let orig = params[i];
        params[i] = orig + h;
        let (up, _) = loss(params);
        params[i] = orig - h;
        let (down, _) = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    ensure(worst < 1e-3, || format!("relative error {worst:e}"))?;
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let corpus = toy_corpus();
    let vocab = build_vocab(&corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let text = TextEncoder::new(&mut store, TextEncoderConfig { vocab_size: vocab.len(), dim: 8, heads: 2, layers: 1 }, &mut rng);
    let den = Denoiser::new(&mut store, DenoiserConfig { side: 3, dim: 8, heads: 2, blocks: 2, steps: 500 }, &mut rng);
    // move off the zero-initialized output head so every path carries gradient
    let mut params: Vec<f64> = store.flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    let tokens = tokenize(&corpus.captions(1)[0], &vocab);
    let z = Matrix::from_vec(9, 4, (0..36).map(|_| rng.sample(StandardNormal)).collect());
    let eps = Matrix::from_vec(9, 4, (0..36).map(|_| rng.sample(StandardNormal)).collect());
    let diffusion = |p: &[f64]| {
        let mut s = store.clone();
        s.set_flat(p).unwrap();
        let mut tape = Tape::new();
        let mut bound = Bound::new(&s);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let ctx = text.forward(&mut f, &tokens);
        let zv = f.input(z.clone());
        let out = den.forward(&mut f, zv, 137, &ctx, false).unwrap();
        let target = f.input(eps.clone());
        let d = f.tape.sub(out.eps, target);
        let sq = f.tape.square(d);
        let loss = f.tape.mean(sq);
        let value = f.tape.value(loss).item();
        let grads = f.tape.backward(loss);
        (value, bound.flat_grad(&grads))
    };
    let dm = finite_difference_check(&mut params, 24, 10, diffusion)?;

    let cfg = VaeConfig { bands: 6, hidden: 5, lambda_kl: 0.2, lambda_adv: 0.0 };
    let vae = Vae::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let x = Matrix::from_vec(18, 6, (0..108).map(|_| rng.random_range(0.0..1.0)).collect());
    let noise = Matrix::from_vec(18, 4, (0..72).map(|_| rng.sample(StandardNormal)).collect());
    let mut gen = vae.generator.flat().to_vec();
    let vae_loss = |p: &[f64]| {
        let v = Vae::with_params(cfg, p, vae.discriminator.flat()).unwrap();
        let mut tape = Tape::new();
        let mut bound = Bound::new(&v.generator);
        let terms = v.generator_terms(&mut tape, &mut bound, &x, &noise, 3, 2);
        let value = tape.value(terms.total).item();
        let grads = tape.backward(terms.total);
        (value, bound.flat_grad(&grads))
    };
    let vm = finite_difference_check(&mut gen, 24, 11, vae_loss)?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("max relative error diffusion {dm:.1e}, VAE {vm:.1e}"))
}

fn attention_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let self_attn = Attention::new(&mut store, "self", 8, 2, true, &mut rng);
    let cross = Attention::new(&mut store, "cross", 8, 2, false, &mut rng);
    let mut tape = Tape::new();
    let mut bound = Bound::new(&store);
    let mut f = Fwd::new(&mut tape, &mut bound);
    let x = f.input(Matrix::from_vec(9, 8, (0..72).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect()));
    let ctx = f.input(Matrix::from_vec(77, 8, (0..616).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect()));
    let mask: Vec<bool> = (0..77).map(|i| i < 12).collect();
    let mut weights = self_attn.forward(&mut f, x, x, None).weights;
    weights.extend(cross.forward(&mut f, x, ctx, Some(&mask)).weights);
    let mut worst: f64 = 0.0;
    for w in weights {
        let m = f.tape.value(w);
        for r in 0..m.rows() {
            worst = worst.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("row sum off by {worst:e}"))?;

    let corpus = toy_corpus();
    let vocab = build_vocab(&corpus);
    let cfg = LdmConfig { side: 3, dim: 8, heads: 2, blocks: 2, text_layers: 1, vocab_size: vocab.len(), steps: 500, beta_min: 1e-4, beta_max: 0.02 };
    let (model, store) = LdmModel::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let tokens = tokenize(&corpus.captions(1)[0], &vocab);
    let c = model.text.encode_text(&store, &tokens);
    let z = Matrix::from_vec(9, 4, (0..36).map(|_| rng.sample(StandardNormal)).collect());
    let (_, maps) = model.denoiser.denoise(&store, &z, 250, &c, true).map_err(|e| e.to_string())?;
    for m in &maps {
        for r in 0..m.weights.rows() {
            worst = worst.max((m.weights.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("denoiser map row sum off by {worst:e}"))?;
    let rasters = attention_rasters(&maps, &tokens, &vocab, 3).map_err(|e| e.to_string())?;
    ensure(rasters.len() == tokens.real_length - 2, || format!("{} maps for {} real tokens", rasters.len(), tokens.real_length))?;
    Ok(format!("row sums within {worst:.1e}; {} word maps", rasters.len()))
}

fn sbr_plan() -> Outcome {
    let plan = sbr_expansion_plan(&[3, 12, 22], 0.4).map_err(|e| e.to_string())?;
    ensure(plan == [9, 12, 22], || format!("{plan:?}"))?;
    Ok(format!("{plan:?}"))
}

fn metric_oracles() -> Outcome {
    let s = score(&ConfusionMatrix::from_rows(&[vec![4, 1], vec![1, 4]]).unwrap()).unwrap();
    ensure(s.kappa == 0.6, || format!("kappa {}", s.kappa))?;
    let k: u16 = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pairs: Vec<(u16, u16)> = (0..1000).map(|_| (rng.random_range(1..=k), rng.random_range(1..=k))).collect();
    let mut cm = ConfusionMatrix::new(k as usize);
    for &(t, p) in &pairs {
        cm.record(t, p).unwrap();
    }
    let s = score(&cm).unwrap();
    let n = pairs.len() as f64;
    let oa = pairs.iter().filter(|(t, p)| t == p).count() as f64 / n;
    let aa = (1..=k)
        .map(|c| {
            let of_c: Vec<_> = pairs.iter().filter(|(t, _)| *t == c).collect();
            of_c.iter().filter(|(t, p)| t == p).count() as f64 / of_c.len() as f64
        })
        .sum::<f64>()
        / k as f64;
    let pe = (1..=k)
        .map(|c| {
            let truth = pairs.iter().filter(|(t, _)| *t == c).count() as f64;
            let pred = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
            truth * pred / (n * n)
        })
        .sum::<f64>();
    let kappa = (oa - pe) / (1.0 - pe);
    let gap = (s.oa - oa).abs().max((s.aa - aa).abs()).max((s.kappa - kappa).abs());
    ensure(gap <= 1e-12, || format!("tally mismatch {gap:e}"))?;
    Ok(format!("kappa 0.6 exact; tally residual {gap:.1e}"))
}

fn toy_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.paths.cube = dir.join("data/cube.hsc");
    cfg.paths.captions = dir.join("data/captions.jsonl");
    cfg.paths.out = dir.join("run");
    cfg
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = toy_config(dir.path());
    let step = |e: hsi_ldm::CliError| e.to_string();
    pipeline::cmd_gen_toy(&cfg).map_err(step)?;
    pipeline::cmd_train_vae(&cfg).map_err(step)?;
    pipeline::cmd_train_ldm(&cfg).map_err(step)?;
    let report = pipeline::cmd_expand_eval(&cfg).map_err(step)?;
    let elapsed = start.elapsed().as_secs_f64();
    let min_fid = report.fidelity.iter().map(|f| f.max).fold(f64::INFINITY, f64::min);
    let max_gap = report.fidelity.iter().map(|f| f.mean_gap).fold(0.0, f64::max);
    let (_, aa_base, _) = report.mean("baseline");
    let (_, aa_exp, _) = report.mean("expanded");
    let detail = format!(
        "fidelity max >= {min_fid:.3}; mean gap <= {max_gap:.3}; AA {aa_base:.4} -> {aa_exp:.4}; {elapsed:.0}s"
    );
    let mut failed = Vec::new();
    if min_fid < 0.9 {
        failed.push("(a)");
    }
    if max_gap > 0.15 {
        failed.push("(b)");
    }
    if aa_exp < aa_base {
        failed.push("(c)");
    }
    if elapsed > 900.0 {
        failed.push("runtime");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{} failed: {detail}", failed.join(" ")))
    }
}

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = toy_config(dir);
    cfg.toy.height = 20;
    cfg.toy.width = 20;
    cfg.split.per_class_train = vec![2, 3, 4];
    cfg.split.unlabeled = 12;
    cfg.vae.epochs = 2;
    cfg.ldm.epochs = 2;
    cfg.ldm.dim = 8;
    cfg.ldm.heads = 2;
    cfg.ldm.blocks = 1;
    cfg.ldm.text_layers = 1;
    cfg.ldm.unlabeled_batch_size = 4;
    cfg.sample.steps = 4;
    cfg.eval.seeds = vec![0];
    cfg.eval.samples_per_class = 2;
    cfg.eval.classifier_epochs = 3;
    cfg.eval.omegas = vec![0.0, 1.0];
    cfg
}

fn run_all(cfg: &RunConfig) -> Result<(), hsi_ldm::CliError> {
    pipeline::cmd_gen_toy(cfg)?;
    pipeline::cmd_train_vae(cfg)?;
    pipeline::cmd_train_ldm(cfg)?;
    let caption = pipeline::default_caption(cfg)?;
    pipeline::cmd_sample(cfg, &caption, 3, 0.7)?;
    pipeline::cmd_expand_eval(cfg)?;
    pipeline::cmd_attn_export(cfg, &caption)?;
    pipeline::cmd_sweep_omega(cfg)?;
    Ok(())
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(root).unwrap().display().to_string();
                out.push((name, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    run_all(&small_config(a.path())).map_err(|e| e.to_string())?;
    run_all(&small_config(b.path())).map_err(|e| e.to_string())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    ensure(names(&ta) == names(&tb), || "artifact sets differ".into())?;
    for ((name, x), (_, y)) in ta.iter().zip(&tb) {
        ensure(x == y, || format!("{name} differs"))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", ta.len()))
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let checks: [(&str, Check); 12] = [
        ("1 schedule oracle", schedule_oracle),
        ("2 forward-process distribution", forward_distribution),
        ("3 perfect-oracle DDIM", perfect_oracle_ddim),
        ("4 guidance identities", cfg_identities),
        ("5 LF-UE identity", lfue_identity),
        ("6 EMA closed form and replay", ema_closed_form),
        ("7 gradient checks", gradient_checks),
        ("8 attention laws", attention_laws),
        ("9 sample-balance plan", sbr_plan),
        ("10 metric oracles", metric_oracles),
        ("11 end-to-end toy run", end_to_end),
        ("12 determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in checks {
        let number = name.split(' ').next().unwrap();
        if !only.is_empty() && !only.iter().any(|o| o == number) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{failures} failed");
    // the report is the product; a failing exit status is opt-in
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
