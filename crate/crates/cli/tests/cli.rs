use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
seed = 3

[dataset]
n_identities = 30
samples_per_identity = 4
image_size = 32
texture_size = 32
exterior_texture_size = 32
n_vertices = 256

[network]
image_size = 32
texture_size = 16
texture_channels = 4
encoder_width = 4
texture_width = 16
additive_width = 16
unet_width = 4
disc_width = 4

[training]
batch_size = 2
steps = 3
checkpoint_every = 2

[eval]
n_identities = 2
ffd_samples = 100
ablation_seeds = [0]
ablation_steps = 1
ablation_identities = 2

[eval.embedder]
width = 4
steps = 2
"#;

fn facetex(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_facetex")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "facetex {args:?} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn artifacts(run: &Path) -> Vec<String> {
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    manifest["artifacts"].as_array().unwrap().iter().map(|a| a.as_str().unwrap().to_string()).collect()
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.toml"), CONFIG).unwrap();
    let common = ["--config", "tiny.toml"];
    let with = |cmd: &str, run: &str, extra: &[&str]| {
        let mut a = vec![cmd];
        a.extend(common);
        a.extend(["--run-dir", run]);
        a.extend(extra);
        facetex(dir, &a)
    };

    with("gen-data", "data", &[]);
    assert!(dir.join("data/data/manifest.json").exists());

    with("train", "train", &[]);
    let ckpt = dir.join("train/checkpoints/last.ckpt");
    assert!(ckpt.exists() && dir.join("train/checkpoints/step_0000002.ckpt").exists());
    let csv = fs::read_to_string(dir.join("train/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let seed_in_manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("train/run.json")).unwrap()).unwrap();
    assert_eq!(seed_in_manifest["seed"], 3);

    let ckpt = ckpt.to_str().unwrap();
    let resumed = with("train", "resumed", &["--resume", ckpt, "--steps", "1"]);
    assert!(resumed.contains("step 4"), "{resumed}");

    with("sample", "sample", &["--checkpoint", ckpt, "--count", "4", "--mode", "posterior", "--dump-raster"]);
    assert!(artifacts(&dir.join("sample")).contains(&"samples.png".to_string()));
    assert!(dir.join("sample/raster/frontal/coverage.png").exists());

    with("repose", "repose", &["--checkpoint", ckpt, "--angles", "-60,0,60"]);
    let png = image::open(dir.join("repose/repose.png")).unwrap();
    assert_eq!((png.width(), png.height()), (3 * 32, 2 * 32));

    with("interpolate", "interp", &["--checkpoint", ckpt, "--frames", "3"]);
    assert!(dir.join("interp/interpolation.png").exists());

    let table = with("eval-consistency", "cons", &["--checkpoint", ckpt]);
    assert!(table.contains("yaw") && table.contains("pitch"));
    assert!(dir.join("cons/consistency.json").exists());

    let ffd = with("eval-ffd", "ffd", &["--checkpoint", ckpt]);
    assert!(ffd.contains("FFD"));

    let ablation = with("ablate", "ablate", &[]);
    assert_eq!(ablation.lines().filter(|l| l.contains("-dim ")).count(), 4);
}

#[test]
fn same_seed_gives_identical_samples_and_bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.toml"), CONFIG).unwrap();
    facetex(dir, &["train", "--config", "tiny.toml", "--run-dir", "t", "--steps", "1"]);
    for run in ["a", "b"] {
        facetex(dir, &["sample", "--config", "tiny.toml", "--run-dir", run, "--checkpoint", "t/checkpoints/last.ckpt", "--count", "2"]);
    }
    assert_eq!(fs::read(dir.join("a/samples.png")).unwrap(), fs::read(dir.join("b/samples.png")).unwrap());

    let out = Command::new(env!("CARGO_BIN_EXE_facetex")).current_dir(dir).args(["sample", "--checkpoint", "missing.ckpt", "--run-dir", "m"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}
