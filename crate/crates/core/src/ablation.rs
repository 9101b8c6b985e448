//! The texture-dimension / RGB-term ablation grid.

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ffd_image_sets, frechet_feature_distance, identity_consistency, Embedder};
use crate::pipeline::{ExperimentConfig, TrainState};
use crate::synthdata::Dataset;

/// `(texture channels, RGB term)` for the four rows, in report order.
pub const VARIANTS: [(usize, bool); 4] = [(3, true), (3, false), (16, true), (16, false)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub texture_channels: usize,
    pub rgb_loss: bool,
    /// Per seed, in seed order; seeds that failed are absent.
    pub ffd: Vec<f64>,
    pub consistency: Vec<f64>,
    /// Failure messages, one per failed seed.
    pub failures: Vec<String>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!("{}-dim {} L_RGB", self.texture_channels, if self.rgb_loss { "w/" } else { "w/o" })
    }

    pub fn ffd_mean(&self) -> Option<f64> {
        mean(&self.ffd)
    }

    pub fn consistency_mean(&self) -> Option<f64> {
        mean(&self.consistency)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub embedder_reliable: bool,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, texture_channels: usize, rgb_loss: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.texture_channels == texture_channels && r.rgb_loss == rgb_loss)
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>, prec: usize| v.map_or("failed".to_string(), |x| format!("{x:.prec$}"));
        let mut out = format!("{:<18} | {:>10} | {:>11}\n", "variant", "FFD", "consistency");
        out += &format!("{:-<18}-+-{:->10}-+-{:->11}\n", "", "", "");
        for r in &self.rows {
            out += &format!("{:<18} | {:>10} | {:>11}", r.label(), fmt(r.ffd_mean(), 3), fmt(r.consistency_mean(), 3));
            if !r.failures.is_empty() {
                out += &format!("  ({} of {} seeds failed)", r.failures.len(), self.seeds.len());
            }
            out.push('\n');
        }
        out += &format!(
            "mean over seeds {:?}, {} steps each{}\n",
            self.seeds,
            self.steps,
            if self.embedder_reliable { "" } else { "; embedder below accuracy gate, values unreliable" }
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }
}

/// Trains every variant for each seed under the same step budget and
/// evaluates FFD and mean in-range identity consistency with a shared
/// embedder. A diverged run is recorded on its row; the others continue.
pub fn run_ablation(config: &ExperimentConfig, dataset: &Dataset, embedder: &Embedder) -> Result<AblationTable> {
    let eval = &config.eval;
    if eval.ablation_seeds.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one seed".into()));
    }
    let in_range: Vec<f64> = eval
        .angles_deg
        .iter()
        .copied()
        .filter(|a| a.abs() <= config.dataset.max_yaw_deg.min(config.dataset.max_pitch_deg))
        .collect();
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (channels, rgb) in VARIANTS {
        let mut row = AblationRow { texture_channels: channels, rgb_loss: rgb, ffd: vec![], consistency: vec![], failures: vec![] };
        for &seed in &eval.ablation_seeds {
            let mut cfg = config.variant(channels, rgb);
            cfg.seed = seed;
            let outcome = (|| -> Result<(f64, f64)> {
                let mut state = TrainState::for_dataset(&cfg, dataset)?;
                state.train(dataset, eval.ablation_steps, |_, _| {})?;
                let (real, generated) = ffd_image_sets(&state, dataset, eval.ffd_samples, seed)?;
                let ffd = frechet_feature_distance(&real, &generated, embedder)?;
                let report = identity_consistency(&state, embedder, eval.ablation_identities, &in_range, seed)?;
                Ok((ffd, report.mean_in_range()))
            })();
            match outcome {
                Ok((ffd, cons)) => {
                    info!("ablation C={channels} rgb={rgb} seed={seed}: ffd {ffd:.4} consistency {cons:.4}");
                    row.ffd.push(ffd);
                    row.consistency.push(cons);
                }
                Err(e) => {
                    info!("ablation C={channels} rgb={rgb} seed={seed} failed: {e}");
                    row.failures.push(format!("seed {seed}: {e}"));
                }
            }
        }
        rows.push(row);
    }
    Ok(AblationTable {
        seeds: eval.ablation_seeds.clone(),
        steps: eval.ablation_steps,
        embedder_reliable: embedder.report.as_ref().map_or(false, |r| r.reliable),
        rows,
    })
}
