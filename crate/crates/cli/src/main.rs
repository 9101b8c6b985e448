//! Command-line front end: data generation, training, sampling, re-posing,
//! interpolation, evaluation and the ablation grid.
//!
//! Every subcommand takes `--config <file.toml>` and `--seed <int>` and writes
//! its outputs under a run directory together with a `run.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use facetex_core::ablation::run_ablation;
use facetex_core::imaging::{save_rgb_png, tile};
use facetex_core::metrics::{ffd_image_sets, frechet_feature_distance, identity_consistency, train_embedder, Embedder};
use facetex_core::pipeline::{interpolate, ExperimentConfig, Request, SampleMode, TrainState};
use facetex_core::raster::{project_model, rasterize};
use facetex_core::synthdata::{generate_dataset, Dataset, Split};
use facetex_core::geometry::Pose;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "facetex", version, about = "Variational neural face textures on a morphable mesh")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML); defaults are used for missing keys
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory [default: runs/<command>-seed<seed>]
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct FromCheckpoint {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,

    /// Also write the UV and coverage rasters of every render
    #[arg(long)]
    dump_raster: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Prior,
    Posterior,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise the dataset described by the config and write it to disk
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, writing losses.csv and periodic checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `training.steps`
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint instead of a fresh initialisation
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample identities and render them frontally
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: FromCheckpoint,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Mode::Prior)]
        mode: Mode,
        /// Dataset sample whose encoding seeds posterior sampling
        #[arg(long, default_value_t = 0)]
        reference: usize,
    },
    /// Render one sampled identity across yaw and pitch offsets
    Repose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: FromCheckpoint,
        /// Offsets in degrees, applied to yaw (first row) and pitch (second row)
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-75,-60,-45,-30,-15,0,15,30,45,60,75")]
        angles: Vec<f64>,
    },
    /// Interpolate between two sampled identities
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: FromCheckpoint,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Identity consistency across poses
    EvalConsistency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fréchet feature distance between real and generated images
    EvalFfd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the texture-dimension / RGB-term grid
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    config_file: Option<String>,
    checkpoint: Option<String>,
    version: &'static str,
    artifacts: Vec<String>,
}

struct Run {
    dir: PathBuf,
    config: ExperimentConfig,
    manifest: RunManifest,
}

impl Run {
    fn open(name: &str, common: &Common, checkpoint: Option<&Path>) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let dir = common.run_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{name}-seed{}", config.seed)));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.toml"), config.to_toml_string())?;
        let manifest = RunManifest {
            command: name.to_string(),
            seed: config.seed,
            config_file: common.config.as_ref().map(|p| p.display().to_string()),
            checkpoint: checkpoint.map(|p| p.display().to_string()),
            version: env!("CARGO_PKG_VERSION"),
            artifacts: vec!["config.toml".into()],
        };
        Ok(Self { dir, config, manifest })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.manifest.artifacts.push(rel.to_string());
        Ok(p)
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn finish(self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.dir.join("run.json"), json)?;
        println!("outputs in {}", self.dir.display());
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }
}

fn load_state(path: &Path) -> Result<TrainState> {
    TrainState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Dataset used for evaluation: the config's, which must share the
/// checkpoint's geometry.
fn eval_dataset(run: &Run, state: &TrainState) -> Result<Dataset> {
    let ds = run.config.dataset()?;
    if ds.scene.model != state.model {
        bail!("the configured dataset uses a different morphable model than the checkpoint");
    }
    Ok(ds)
}

fn embedder_for(run: &mut Run, dataset: &Dataset) -> Result<Embedder> {
    let cfg = &run.config;
    let emb = train_embedder(dataset, &cfg.eval.embedder, &cfg.augment, cfg.seed)?;
    if let Some(r) = &emb.report {
        info!("embedder held-out accuracy {:.3} (reliable: {})", r.heldout_accuracy, r.reliable);
        let json = serde_json::to_string_pretty(r)?;
        run.write("embedder.json", &json)?;
    }
    Ok(emb)
}

fn dump_raster(run: &mut Run, state: &TrainState, req: &Request, name: &str) -> Result<()> {
    let proj = project_model(&state.model, &req.alpha, &req.beta, &req.pose, &state.camera)?;
    let raster = rasterize(&proj.points, &proj.depth, &state.model.triangles, &state.model.uv_coords, state.camera.image_size());
    let dir = run.path(&format!("raster/{name}/uv.png"))?;
    let dir = dir.parent().expect("has parent").to_path_buf();
    raster.save_debug(&dir)?;
    run.manifest.artifacts.push(format!("raster/{name}/coverage.png"));
    Ok(())
}

fn neutral(state: &TrainState, z: facetex_core::networks::LatentCode, pose: Pose) -> Request {
    Request { z, alpha: vec![0.0; state.model.d_alpha], beta: vec![0.0; state.model.d_beta], pose }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { common } => {
            let mut run = Run::open("gen-data", &common, None)?;
            let mut ds_cfg = run.config.dataset.clone();
            ds_cfg.seed = run.config.seed;
            let dir = run.dir.join("data");
            let manifest = generate_dataset(&ds_cfg, &dir)?;
            run.manifest.artifacts.push("data/manifest.json".into());
            println!("wrote {} samples to {}", manifest.samples.len(), dir.display());
            run.finish()
        }
        Command::Train { common, steps, resume } => {
            let mut run = Run::open("train", &common, resume.as_deref())?;
            let dataset = run.config.dataset()?;
            let mut state = match &resume {
                Some(p) => load_state(p)?,
                None => TrainState::for_dataset(&run.config, &dataset)?,
            };
            let steps = steps.unwrap_or(run.config.training.steps);
            let (log_every, ckpt_every) = (run.config.training.log_every.max(1), run.config.training.checkpoint_every);
            let weights = state.config.loss.clone();
            let mut csv = String::from(facetex_core::losses::LossRecord::CSV_HEADER);
            csv.push('\n');
            let ckpt_dir = run.dir.join("checkpoints");
            fs::create_dir_all(&ckpt_dir)?;
            let mut saved = Vec::new();
            let mut save_error = None;
            state.train(&dataset, steps, |s, r| {
                csv += &r.csv_line(&weights);
                csv.push('\n');
                if r.step % log_every == 0 {
                    info!("step {:>6}  G {:.4}  D {:.4}  l2 {:.4}", r.step, r.generator_total, r.discriminator, r.l2);
                }
                if ckpt_every > 0 && s.step % ckpt_every == 0 {
                    let name = format!("checkpoints/step_{:07}.ckpt", s.step);
                    match s.save(&run.dir.join(&name)) {
                        Ok(()) => saved.push(name),
                        Err(e) => save_error = Some(e),
                    }
                }
            })?;
            if let Some(e) = save_error {
                return Err(e.into());
            }
            run.manifest.artifacts.extend(saved);
            run.write("losses.csv", &csv)?;
            let last = run.path("checkpoints/last.ckpt")?;
            state.save(&last)?;
            println!("trained to step {}; checkpoint {}", state.step, last.display());
            run.finish()
        }
        Command::Sample { common, ckpt, count, mode, reference } => {
            let mut run = Run::open("sample", &common, Some(&ckpt.checkpoint))?;
            let state = load_state(&ckpt.checkpoint)?;
            let mut rng = run.rng(50);
            let reference_image = match mode {
                Mode::Prior => None,
                Mode::Posterior => {
                    let ds = eval_dataset(&run, &state)?;
                    let s = ds.samples.get(reference).with_context(|| format!("no dataset sample {reference}"))?;
                    Some(s.masked_image())
                }
            };
            let mut requests = Vec::with_capacity(count);
            for _ in 0..count {
                let mode = match &reference_image {
                    None => SampleMode::Prior,
                    Some(img) => SampleMode::Posterior(Some(img)),
                };
                requests.push(neutral(&state, state.sample_identity(&mut rng, mode)?, Pose::identity()));
            }
            let cells: Vec<_> = state.generate_batch(&requests)?.into_iter().map(|g| g.masked_image()).collect();
            let grid = tile(&cells, (count as f64).sqrt().ceil().max(1.0) as usize)?;
            save_rgb_png(&grid, &run.path("samples.png")?)?;
            if ckpt.dump_raster {
                dump_raster(&mut run, &state, &requests[0], "frontal")?;
            }
            run.finish()
        }
        Command::Repose { common, ckpt, angles } => {
            let mut run = Run::open("repose", &common, Some(&ckpt.checkpoint))?;
            let state = load_state(&ckpt.checkpoint)?;
            let mut rng = run.rng(51);
            let z = state.sample_identity(&mut rng, SampleMode::Prior)?;
            let offsets: Vec<(f64, f64)> = angles.iter().map(|&a| (a, 0.0)).chain(angles.iter().map(|&a| (0.0, a))).collect();
            let alpha = vec![0.0; state.model.d_alpha];
            let beta = vec![0.0; state.model.d_beta];
            let grid = state.repose_grid(&z, &alpha, &beta, &offsets, angles.len())?;
            save_rgb_png(&grid.image, &run.path("repose.png")?)?;
            if ckpt.dump_raster {
                for &(yaw, pitch) in &offsets {
                    let req = neutral(&state, z.clone(), Pose::from_euler_deg(yaw, pitch, 0.0));
                    dump_raster(&mut run, &state, &req, &format!("yaw{yaw:+.0}_pitch{pitch:+.0}"))?;
                }
            }
            run.finish()
        }
        Command::Interpolate { common, ckpt, frames } => {
            let mut run = Run::open("interpolate", &common, Some(&ckpt.checkpoint))?;
            let state = load_state(&ckpt.checkpoint)?;
            if frames < 2 {
                bail!("need at least 2 frames");
            }
            let mut rng = run.rng(52);
            let a = state.sample_identity(&mut rng, SampleMode::Prior)?;
            let b = state.sample_identity(&mut rng, SampleMode::Prior)?;
            let requests = (0..frames)
                .map(|k| Ok(neutral(&state, interpolate(&a, &b, k as f64 / (frames - 1) as f64)?, Pose::identity())))
                .collect::<Result<Vec<_>>>()?;
            let cells: Vec<_> = state.generate_batch(&requests)?.into_iter().map(|g| g.masked_image()).collect();
            save_rgb_png(&tile(&cells, frames)?, &run.path("interpolation.png")?)?;
            if ckpt.dump_raster {
                dump_raster(&mut run, &state, &requests[0], "frontal")?;
            }
            run.finish()
        }
        Command::EvalConsistency { common, checkpoint } => {
            let mut run = Run::open("eval-consistency", &common, Some(&checkpoint))?;
            let state = load_state(&checkpoint)?;
            let dataset = eval_dataset(&run, &state)?;
            let embedder = embedder_for(&mut run, &dataset)?;
            let eval = run.config.eval.clone();
            let angles: Vec<f64> = eval.angles_deg.iter().chain(&eval.probe_angles_deg).copied().collect();
            let report = identity_consistency(&state, &embedder, eval.n_identities, &angles, run.config.seed)?;
            print!("{}", report.to_table());
            run.write("consistency.txt", &report.to_table())?;
            run.write("consistency.json", &report.to_json())?;
            run.finish()
        }
        Command::EvalFfd { common, checkpoint } => {
            let mut run = Run::open("eval-ffd", &common, Some(&checkpoint))?;
            let state = load_state(&checkpoint)?;
            let dataset = eval_dataset(&run, &state)?;
            let embedder = embedder_for(&mut run, &dataset)?;
            let (real, generated) = ffd_image_sets(&state, &dataset, run.config.eval.ffd_samples, run.config.seed)?;
            let ffd = frechet_feature_distance(&real, &generated, &embedder)?;
            println!("FFD {ffd:.4} ({} images per side)", real.len());
            run.write("ffd.json", &serde_json::to_string_pretty(&serde_json::json!({ "ffd": ffd, "n": real.len() }))?)?;
            run.finish()
        }
        Command::Ablate { common } => {
            let mut run = Run::open("ablate", &common, None)?;
            let dataset = run.config.dataset()?;
            if dataset.identities(Split::Train).is_empty() {
                bail!("dataset has no training identities");
            }
            let embedder = embedder_for(&mut run, &dataset)?;
            let table = run_ablation(&run.config, &dataset, &embedder)?;
            print!("{}", table.to_table());
            run.write("ablation.txt", &table.to_table())?;
            run.write("ablation.json", &table.to_json())?;
            run.finish()
        }
    }
}
