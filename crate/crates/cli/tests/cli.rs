use std::path::Path;
use std::process::{Command, Output};

use hsi_ldm::formats::decode_patches;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsi-ldm")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 3

[toy]
height = 16
width = 16

[split]
per_class_train = [2, 2, 3]
unlabeled = 8

[vae]
epochs = 2
hidden = 8

[ldm]
epochs = 2
dim = 8
heads = 2
blocks = 1
text_layers = 1
unlabeled_batch_size = 4

[sample]
steps = 4

[eval]
seeds = [0]
samples_per_class = 2
classifier_epochs = 2
omegas = [0.0, 1.0]
"#;

fn small_run(dir: &Path) {
    std::fs::write(dir.join("small.toml"), SMALL).unwrap();
    for cmd in ["gen-toy", "train-vae", "train-ldm"] {
        let out = run(dir, &["--config", "small.toml", cmd]);
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
    }
}

#[test]
fn missing_cube_is_a_file_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train-vae"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("cube.hsc"), "{}", stderr(&out));
}

#[test]
fn gen_toy_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let read = |seed: &str| {
        let out = run(dir.path(), &["--seed", seed, "gen-toy"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        (std::fs::read(dir.path().join("data/cube.hsc")).unwrap(), std::fs::read(dir.path().join("data/captions.jsonl")).unwrap())
    };
    let a = read("5");
    assert_eq!(a, read("5"));
    assert_ne!(a.0, read("6").0);
}

#[test]
fn invalid_arguments_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["gen-toy", "--classes", "1"])), 2);
    assert_eq!(code(&run(dir.path(), &["no-such-command"])), 2);
    std::fs::write(dir.path().join("bad.toml"), "[vae]\nepochs = 0\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["--config", "bad.toml", "gen-toy"])), 2);
    std::fs::write(dir.path().join("typo.toml"), "[vae]\nepoch = 3\n").unwrap();
    let out = run(dir.path(), &["--config", "typo.toml", "gen-toy"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
}

#[test]
fn negative_guidance_is_rejected_before_any_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sample", "--caption", "anything", "--omega", "-0.5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("-0.5"), "{}", stderr(&out));
}

#[test]
fn sampling_without_a_diffusion_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    assert_eq!(code(&run(dir.path(), &["--config", "small.toml", "gen-toy"])), 0);
    assert_eq!(code(&run(dir.path(), &["--config", "small.toml", "train-vae"])), 0);
    let out = run(dir.path(), &["--config", "small.toml", "sample", "--count", "2"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("ldm.ckpt"), "{}", stderr(&out));
}

#[test]
fn small_pipeline_runs_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    let caption = "class 2 region";
    let out = run(d, &["--config", "small.toml", "sample", "--count", "4", "--omega", "0.7"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bytes = std::fs::read(d.join("run/samples.hsp")).unwrap();
    let patches = decode_patches(&d.join("run/samples.hsp"), &bytes).unwrap();
    assert_eq!(patches.len(), 4);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/samples.json")).unwrap()).unwrap();
    assert_eq!(manifest["patches"].as_array().unwrap().len(), 4);

    // a caption outside the corpus still samples, labeled 0
    let out = run(d, &["--config", "small.toml", "sample", "--count", "1", "--caption", caption]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let patches = decode_patches(&d.join("run/samples.hsp"), &std::fs::read(d.join("run/samples.hsp")).unwrap()).unwrap();
    assert_eq!(patches[0].class_id, 0);

    for cmd in [&["expand-eval"][..], &["attn-export"], &["sweep-omega", "--omegas", "0,0.5"]] {
        let mut args = vec!["--config", "small.toml"];
        args.extend_from_slice(cmd);
        let out = run(d, &args);
        assert_eq!(code(&out), 0, "{cmd:?}: {}", stderr(&out));
    }
    for file in ["metrics.csv", "per_class.csv", "report.txt", "fidelity.csv", "spectral_stats.csv", "pca.csv", "sweep_omega.csv", "vae_loss.csv", "ldm_loss.csv"] {
        assert!(d.join("run").join(file).is_file(), "{file} missing");
    }
    let sweep = std::fs::read_to_string(d.join("run/sweep_omega.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    let maps = std::fs::read_dir(d.join("run/attention")).unwrap().count();
    assert!(maps > 0 && maps.is_multiple_of(2));
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let out = run(dir.path(), &["--config", "small.toml", "--out", "elsewhere", "gen-toy"]);
    assert_eq!(code(&out), 0);
    let out = run(dir.path(), &["--config", "small.toml", "--out", "elsewhere", "train-vae"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("elsewhere/vae.ckpt").is_file());
    assert!(!dir.path().join("run").exists());
}
