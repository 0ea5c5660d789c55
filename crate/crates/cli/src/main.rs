use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hsi_ldm::pipeline;
use hsi_ldm::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "hsi-ldm", version, about = "Text-conditioned latent diffusion for hyperspectral patches")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic toy cube and its captions.
    GenToy {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train the spectral VAE.
    TrainVae,
    /// Train the text-conditioned diffusion model on VAE latents.
    TrainLdm,
    /// Generate patches for one caption.
    Sample {
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        omega: Option<f64>,
    },
    /// Expand the training set and compare classifiers with and without it.
    ExpandEval {
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Export per-word cross-attention maps.
    AttnExport {
        #[arg(long)]
        caption: Option<String>,
    },
    /// Classifier scores over a list of guidance coefficients.
    SweepOmega {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        omegas: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = out;
    }
    match cli.command {
        Command::GenToy { classes, bands, height, width } => {
            let t = &mut cfg.toy;
            t.classes = classes.unwrap_or(t.classes);
            t.bands = bands.unwrap_or(t.bands);
            t.height = height.unwrap_or(t.height);
            t.width = width.unwrap_or(t.width);
            cfg.validate()?;
            for p in pipeline::cmd_gen_toy(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::TrainVae => {
            cfg.validate()?;
            let s = pipeline::cmd_train_vae(&cfg)?;
            println!("vae: {} epochs, reconstruction MSE {:.6}", s.history.len(), s.recon_mse);
        }
        Command::TrainLdm => {
            cfg.validate()?;
            let h = pipeline::cmd_train_ldm(&cfg)?;
            if let (Some(first), Some(last)) = (h.first(), h.last()) {
                println!("ldm: epoch 1 loss {:.5}, epoch {} loss {:.5}", first.l_dm + first.l_con, last.epoch, last.l_dm + last.l_con);
            }
        }
        Command::Sample { caption, count, omega } => {
            cfg.validate()?;
            let caption = match caption {
                Some(c) => c,
                None => pipeline::default_caption(&cfg)?,
            };
            let set = pipeline::cmd_sample(&cfg, &caption, count.unwrap_or(cfg.sample.count), omega.unwrap_or(cfg.sample.omega))?;
            println!("wrote {} patches to {}", set.patches.len(), cfg.out("samples.hsp").display());
        }
        Command::ExpandEval { lambda } => {
            if let Some(l) = lambda {
                cfg.sample.lambda = l;
            }
            cfg.validate()?;
            let report = pipeline::cmd_expand_eval(&cfg)?;
            for variant in ["baseline", "expanded"] {
                let (oa, aa, k) = report.mean(variant);
                println!("{variant:<9} OA {oa:.4} AA {aa:.4} kappa {k:.4}");
            }
        }
        Command::AttnExport { caption } => {
            cfg.validate()?;
            let caption = match caption {
                Some(c) => c,
                None => pipeline::default_caption(&cfg)?,
            };
            let files = pipeline::cmd_attn_export(&cfg, &caption)?;
            println!("wrote {} files under {}", files.len(), cfg.out("attention").display());
        }
        Command::SweepOmega { omegas } => {
            if let Some(o) = omegas {
                cfg.eval.omegas = o;
            }
            cfg.validate()?;
            for row in pipeline::cmd_sweep_omega(&cfg)? {
                println!("omega {:<5} OA {:.4} AA {:.4} kappa {:.4}", row.omega, row.scores.oa, row.scores.aa, row.scores.kappa);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
