//! Evaluation: a small identity embedder trained on the synthetic identities,
//! the pose-consistency protocol built on it, and the Fréchet distance
//! between embedding distributions.

use facetex_grad::nn::{Conv2d, Linear};
use facetex_grad::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var, LEAKY_SLOPE};
use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_to_image, apply_to_mask, sample_affine, AugmentConfig};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::Mask;
use crate::networks::EMBEDDER_GROUP;
use crate::pipeline::{sample_prior, EmbedderConfig, Request, TrainState};
use crate::synthdata::{Dataset, Split};

pub const EMBEDDING_DIM: usize = 64;
const EMBED_CHUNK: usize = 32;

/// Outcome of embedder training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub n_classes: usize,
    pub heldout_accuracy: f64,
    /// Whether the accuracy gate was met.
    pub reliable: bool,
    pub same_identity_similarity: f64,
    pub cross_identity_similarity: f64,
}

/// Convolutional identity classifier; its 64-d penultimate layer,
/// normalised, is the embedding.
#[derive(Clone, Debug)]
pub struct Embedder {
    store: ParamStore<f32>,
    convs: Vec<Conv2d>,
    embed: Linear,
    classifier: Linear,
    image_size: usize,
    pub report: Option<EmbedderReport>,
}

impl Embedder {
    pub fn new(width: usize, image_size: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if !image_size.is_power_of_two() || image_size < 16 || width == 0 || n_classes < 2 {
            return Err(Error::InvalidInput("embedder needs a power-of-two image ≥ 16 and ≥ 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(30);
        let mut store = ParamStore::new(EMBEDDER_GROUP);
        let chans = [3, width, 2 * width, 4 * width, 4 * width];
        let convs = (0..4)
            .map(|i| Conv2d::new(&mut store, &format!("emb.c{i}"), chans[i], chans[i + 1], 3, 2, 1, &mut rng))
            .collect();
        let side = image_size / 16;
        let embed = Linear::new(&mut store, "emb.embed", 4 * width * side * side, EMBEDDING_DIM, 1.0, &mut rng);
        let classifier = Linear::new(&mut store, "emb.classifier", EMBEDDING_DIM, n_classes, 1.0, &mut rng);
        Ok(Self { store, convs, embed, classifier, image_size, report: None })
    }

    fn forward(&self, g: &Graph<f32>, x: Var) -> (Var, Var) {
        let mut h = x;
        for c in &self.convs {
            h = g.leaky_relu(c.forward(g, &self.store, h), LEAKY_SLOPE);
        }
        let s = g.shape(h);
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        let e = self.embed.forward(g, &self.store, flat);
        let logits = self.classifier.forward(g, &self.store, g.leaky_relu(e, LEAKY_SLOPE));
        (e, logits)
    }

    fn stack(&self, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        for im in images {
            if im.shape() != [3, self.image_size, self.image_size] {
                return Err(Error::Dimension(format!("embedder expects 3×{s}×{s} images, got {:?}", im.shape(), s = self.image_size)));
            }
        }
        let owned: Vec<Tensor<f32>> = images.iter().map(|t| (*t).clone()).collect();
        Ok(Tensor::stack(&owned))
    }

    /// Unit-norm embeddings of masked `3×H×W` images.
    pub fn embed(&self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
            let g = Graph::new();
            let (e, _) = self.forward(&g, g.constant(self.stack(&refs)?));
            for row in g.value(e).data().chunks(EMBEDDING_DIM) {
                out.push(normalize(row));
            }
        }
        Ok(out)
    }

    /// Most likely class per image.
    pub fn classify(&self, images: &[Tensor<f32>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
            let g = Graph::new();
            let (_, logits) = self.forward(&g, g.constant(self.stack(&refs)?));
            let lv = g.value(logits);
            let k = lv.shape()[1];
            for row in lv.data().chunks(k) {
                let best = row.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                out.push(best.0);
            }
        }
        Ok(out)
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }
}

fn normalize(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|&x| x as f64 / n).collect()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Trains the embedder on the training-split identities. The last
/// `holdout_fraction` of every identity's samples is kept for the accuracy
/// gate; missing the gate is reported on the result rather than failing.
pub fn train_embedder(dataset: &Dataset, config: &EmbedderConfig, augment: &AugmentConfig, seed: u64) -> Result<Embedder> {
    let ids = dataset.identities(Split::Train);
    if ids.len() < 20 {
        return Err(Error::InvalidInput(format!("embedder training needs ≥ 20 identities, dataset has {}", ids.len())));
    }
    let class_of = |id: usize| ids.iter().position(|&x| x == id).expect("train identity");
    let (mut fit, mut held) = (Vec::new(), Vec::new());
    for &id in &ids {
        let samples: Vec<_> = dataset.split(Split::Train).filter(|s| s.identity_id == id).collect();
        let n_hold = ((samples.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, samples.len() - 1);
        let cut = samples.len() - n_hold;
        fit.extend(samples[..cut].iter().map(|s| (s.masked_image(), s.mask.clone(), class_of(id))));
        held.extend(samples[cut..].iter().map(|s| (s.masked_image(), class_of(id))));
    }
    let size = dataset.config.image_size;
    let mut emb = Embedder::new(config.width, size, ids.len(), seed)?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &emb.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(31);
    for _ in 0..config.steps {
        let mut images = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let (img, mask, label) = &fit[rng.gen_range(0..fit.len())];
            let a = sample_affine(&mut rng, augment, size, size)?;
            let m = apply_to_mask(&a, mask)?;
            let w = apply_to_image(&a, img)?;
            let hw = size * size;
            images.push(Tensor::from_fn(w.shape(), |i| if m.data[i % hw] { w[i] } else { 0.0 }));
            labels.push(*label);
        }
        let g = Graph::with_trainable(&[EMBEDDER_GROUP]);
        let (_, logits) = emb.forward(&g, g.constant(Tensor::stack(&images)));
        let loss = g.softmax_cross_entropy(logits, &labels);
        if !g.value(loss)[0].is_finite() {
            return Err(Error::Numerical("embedder loss diverged".into()));
        }
        let grads = g.backward(loss);
        opt.update(&mut emb.store, &grads);
    }

    let held_images: Vec<Tensor<f32>> = held.iter().map(|(t, _)| t.clone()).collect();
    let predicted = emb.classify(&held_images)?;
    let correct = predicted.iter().zip(&held).filter(|(p, (_, l))| *p == l).count();
    let accuracy = correct as f64 / held.len() as f64;
    let embeddings = emb.embed(&held_images)?;
    let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..held.len() {
        for j in i + 1..held.len() {
            let s = cosine_similarity(&embeddings[i], &embeddings[j]);
            if held[i].1 == held[j].1 {
                same += s;
                n_same += 1;
            } else {
                cross += s;
                n_cross += 1;
            }
        }
    }
    let reliable = accuracy >= config.min_accuracy;
    if !reliable {
        warn!("embedder held-out accuracy {accuracy:.3} below gate {}; consistency metrics are unreliable", config.min_accuracy);
    }
    emb.report = Some(EmbedderReport {
        n_classes: ids.len(),
        heldout_accuracy: accuracy,
        reliable,
        same_identity_similarity: same / n_same.max(1) as f64,
        cross_identity_similarity: cross / n_cross.max(1) as f64,
    });
    Ok(emb)
}

/// PSNR in dB over the pixels where `mask` is set, for images in `[-1, 1]`
/// (rescaled to `[0, 1]` first). `None` for an empty mask; infinite for an
/// exact match.
pub fn psnr_in_mask(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Mask) -> Result<Option<f64>> {
    let hw = mask.height * mask.width;
    if pred.shape() != target.shape() || pred.data().len() % hw != 0 {
        return Err(Error::Dimension(format!("psnr inputs {:?} / {:?} vs mask {}×{}", pred.shape(), target.shape(), mask.height, mask.width)));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if mask.data[i % hw] {
            se += (0.5 * (p as f64 - t as f64)).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let mse = se / n as f64;
    Ok(Some(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Yaw,
    Pitch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyEntry {
    pub axis: Axis,
    pub angle_deg: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Beyond the pose range seen in training.
    pub extrapolated: bool,
    /// Extrapolated and below every in-range mean on the same axis.
    pub degraded: bool,
}

/// Cosine similarity between each re-posed render and the frontal render of
/// the same generated identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_identities: usize,
    pub seed: u64,
    pub training_range_deg: [f64; 2],
    pub embedder_reliable: bool,
    pub entries: Vec<ConsistencyEntry>,
}

impl ConsistencyReport {
    pub fn entry(&self, axis: Axis, angle_deg: f64) -> Option<&ConsistencyEntry> {
        self.entries.iter().find(|e| e.axis == axis && e.angle_deg == angle_deg)
    }

    /// Mean similarity over `±angle`.
    pub fn symmetric_mean(&self, axis: Axis, angle_deg: f64) -> Option<f64> {
        let a = self.entry(axis, angle_deg)?;
        let b = self.entry(axis, -angle_deg)?;
        Some(0.5 * (a.mean + b.mean))
    }

    /// Mean similarity over every non-frontal, in-range entry.
    pub fn mean_in_range(&self) -> f64 {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.angle_deg != 0.0 && !e.extrapolated).map(|e| e.mean).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Plain-text table with angles as columns and one row per axis.
    pub fn to_table(&self) -> String {
        let mut angles: Vec<f64> = self.entries.iter().map(|e| e.angle_deg).collect();
        angles.sort_by(f64::total_cmp);
        angles.dedup();
        let mut out = format!("{:<6}", "axis");
        for a in &angles {
            out += &format!(" | {:>13}", format!("{a:+.0}°"));
        }
        out.push('\n');
        for axis in [Axis::Yaw, Axis::Pitch] {
            out += &format!("{:<6}", format!("{axis:?}").to_lowercase());
            for &a in &angles {
                let cell = match self.entry(axis, a) {
                    Some(e) => format!("{:.3}±{:.3}{}", e.mean, e.std, if e.degraded { "!" } else if e.extrapolated { "*" } else { "" }),
                    None => "-".into(),
                };
                out += &format!(" | {cell:>13}");
            }
            out.push('\n');
        }
        out += &format!(
            "n = {} identities; training poses within ±{:.0}° yaw, ±{:.0}° pitch; * beyond training range, ! degraded beyond it{}\n",
            self.n_identities,
            self.training_range_deg[0],
            self.training_range_deg[1],
            if self.embedder_reliable { "" } else { "; embedder below accuracy gate, values unreliable" }
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Renders `n_identities` prior samples frontally and at each yaw and pitch
/// offset in `angles_deg` (0° is always included), then reports the cosine
/// similarity of each offset render to the frontal one.
pub fn identity_consistency(state: &TrainState, embedder: &Embedder, n_identities: usize, angles_deg: &[f64], seed: u64) -> Result<ConsistencyReport> {
    let mut angles: Vec<f64> = angles_deg.iter().copied().filter(|&a| a != 0.0).collect();
    angles.insert(0, 0.0);
    let ds = &state.config.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(40);
    let alpha_dist = Normal::new(0.0, ds.alpha_std.max(0.0)).expect("finite std");
    let beta_dist = Normal::new(0.0, ds.beta_std.max(0.0)).expect("finite std");
    let mut sims = vec![vec![Vec::with_capacity(n_identities); angles.len()]; 2];
    for _ in 0..n_identities {
        let z = sample_prior(&mut rng)?;
        let alpha: Vec<f64> = (0..state.model.d_alpha).map(|_| alpha_dist.sample(&mut rng)).collect();
        let beta: Vec<f64> = (0..state.model.d_beta).map(|_| beta_dist.sample(&mut rng)).collect();
        let request = |yaw: f64, pitch: f64| Request { z: z.clone(), alpha: alpha.clone(), beta: beta.clone(), pose: Pose::from_euler_deg(yaw, pitch, 0.0) };
        let mut requests = vec![request(0.0, 0.0)];
        for &a in &angles {
            requests.push(request(a, 0.0));
        }
        for &a in &angles {
            requests.push(request(0.0, a));
        }
        let images: Vec<Tensor<f32>> = state.generate_batch(&requests)?.into_iter().map(|g| g.masked_image()).collect();
        let emb = embedder.embed(&images)?;
        for (k, _) in angles.iter().enumerate() {
            sims[0][k].push(cosine_similarity(&emb[0], &emb[1 + k]));
            sims[1][k].push(cosine_similarity(&emb[0], &emb[1 + angles.len() + k]));
        }
    }
    let range = [ds.max_yaw_deg.abs(), ds.max_pitch_deg.abs()];
    let mut entries = Vec::new();
    for (ai, axis) in [Axis::Yaw, Axis::Pitch].into_iter().enumerate() {
        let stats: Vec<(f64, f64)> = sims[ai].iter().map(|v| mean_std(v)).collect();
        let floor = angles
            .iter()
            .zip(&stats)
            .filter(|(&a, _)| a.abs() <= range[ai])
            .map(|(_, s)| s.0)
            .fold(f64::INFINITY, f64::min);
        for (&a, &(mean, std)) in angles.iter().zip(&stats) {
            let extrapolated = a.abs() > range[ai];
            entries.push(ConsistencyEntry { axis, angle_deg: a, mean, std, n: n_identities, extrapolated, degraded: extrapolated && mean < floor });
        }
    }
    Ok(ConsistencyReport {
        n_identities,
        seed,
        training_range_deg: range,
        embedder_reliable: embedder.report.as_ref().map_or(false, |r| r.reliable),
        entries,
    })
}

fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 feature vectors".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Dimension("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Symmetric PSD square root; negative eigenvalues within rounding noise are
/// clamped, larger ones are an error.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-8 * scale) {
        return Err(Error::Numerical("covariance is not positive semi-definite".into()));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between Gaussians fitted to two
/// feature sets. The cross term uses `tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, s1) = moments(a)?;
    let (mu2, s2) = moments(b)?;
    if mu1.len() != mu2.len() {
        return Err(Error::Dimension("feature sets differ in dimension".into()));
    }
    let r1 = psd_sqrt(&s1)?;
    psd_sqrt(&s2)?;
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let cross: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Minimum images per side for [`frechet_feature_distance`].
pub const MIN_FFD_IMAGES: usize = 100;

/// Fréchet distance between embedder features of two sets of masked images.
pub fn frechet_feature_distance(real: &[Tensor<f32>], generated: &[Tensor<f32>], embedder: &Embedder) -> Result<f64> {
    if real.len() < MIN_FFD_IMAGES || generated.len() < MIN_FFD_IMAGES {
        return Err(Error::InvalidInput(format!("need ≥ {MIN_FFD_IMAGES} images per side, got {} and {}", real.len(), generated.len())));
    }
    frechet_distance(&embedder.embed(real)?, &embedder.embed(generated)?)
}

/// Matched real and generated images for the Fréchet distance: `n` samples
/// drawn from the dataset and, for each, a prior identity rendered with the
/// sample's shape, expression and pose. Both sides are masked to their
/// foreground.
pub fn ffd_image_sets(state: &TrainState, dataset: &Dataset, n: usize, seed: u64) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(41);
    let picks = rand::seq::index::sample(&mut rng, dataset.samples.len(), n.min(dataset.samples.len()));
    let mut real = Vec::with_capacity(n);
    let mut requests = Vec::with_capacity(n);
    for i in picks {
        let s = &dataset.samples[i];
        real.push(s.masked_image());
        requests.push(Request { z: sample_prior(&mut rng)?, alpha: s.alpha.clone(), beta: s.beta.clone(), pose: s.pose });
    }
    let generated = state.generate_batch(&requests)?.into_iter().map(|g| g.masked_image()).collect();
    Ok((real, generated))
}
