//! Training orchestration and inference: batching with augmentation,
//! alternating discriminator/generator updates, generation from latent codes,
//! sampling, interpolation and re-posing.

use std::path::Path;
use std::sync::Arc;

use facetex_grad::{Adam, AdamConfig, Graph, Tensor, Var};
use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_to_image, apply_to_mask, compose_with_projection, sample_affine, AffineTransform, AugmentConfig};
use crate::error::{Error, Result};
use crate::geometry::{MorphableModel, Pose};
use crate::imaging::{tile, Mask};
use crate::losses::{
    adv_discriminator, adv_generator, kl_divergence, mask_bce, perceptual, photometric_l2, rgb_texture_loss,
    total_generator_loss, GeneratorTerms, LossRecord, LossWeights,
};
use crate::networks::{
    reparameterize, ConvStackExtractor, Discriminator, Generator, LatentCode, LatentDistribution, NetworkConfig,
    PerceptualExtractor, DISCRIMINATOR_GROUP, GENERATOR_GROUP, LATENT_DIM, LATENT_SPLIT,
};
use crate::raster::{project_model, rasterize, sample_texture_batch, Camera, SamplePlan};
use crate::synthdata::{Dataset, DatasetConfig, Sample, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Consecutive non-finite steps tolerated before training stops.
    pub max_nonfinite_steps: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { batch_size: 8, steps: 2000, log_every: 50, checkpoint_every: 500, max_nonfinite_steps: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub width: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each training identity's samples held out for the accuracy gate.
    pub holdout_fraction: f64,
    pub min_accuracy: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { width: 16, steps: 600, batch_size: 32, lr: 1e-3, holdout_fraction: 0.2, min_accuracy: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_identities: usize,
    /// Yaw and pitch offsets evaluated against the frontal render.
    pub angles_deg: Vec<f64>,
    /// Extra offsets beyond the training range, reported as extrapolation.
    pub probe_angles_deg: Vec<f64>,
    /// Images per side for the Fréchet feature distance.
    pub ffd_samples: usize,
    pub embedder: EmbedderConfig,
    /// Training seeds per ablation variant.
    pub ablation_seeds: Vec<u64>,
    /// Training steps per ablation run; every variant gets the same budget.
    pub ablation_steps: u64,
    /// Identities per consistency estimate inside the ablation.
    pub ablation_identities: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_identities: 256,
            angles_deg: vec![-45.0, -30.0, -15.0, 15.0, 30.0, 45.0],
            probe_angles_deg: vec![-75.0, -60.0, 60.0, 75.0],
            ffd_samples: 200,
            embedder: EmbedderConfig::default(),
            ablation_seeds: vec![0, 1],
            ablation_steps: 600,
            ablation_identities: 32,
        }
    }
}

/// Everything needed to reproduce a run. Loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Generated dataset to train on; synthesised in memory when absent.
    pub dataset_dir: Option<String>,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub rgb_loss: bool,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub perceptual_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_dir: None,
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            loss: LossWeights::default(),
            rgb_loss: false,
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            perceptual_seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.network.image_size != self.dataset.image_size {
            return Err(Error::InvalidInput(format!(
                "network image size {} differs from dataset image size {}",
                self.network.image_size, self.dataset.image_size
            )));
        }
        if self.training.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        if self.eval.angles_deg.contains(&0.0) {
            return Err(Error::InvalidInput("evaluation angles are offsets from the frontal reference; drop 0".into()));
        }
        Ok(())
    }

    /// Replaces the texture channel count and RGB term switch, the two axes
    /// of the ablation grid.
    pub fn variant(&self, texture_channels: usize, rgb_loss: bool) -> Self {
        let mut c = self.clone();
        c.network.texture_channels = texture_channels;
        c.rgb_loss = rgb_loss;
        c
    }

    /// Loads the configured dataset from disk or synthesises it.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset_dir {
            Some(dir) => {
                let ds = Dataset::load(Path::new(dir))?;
                if ds.config.image_size != self.network.image_size {
                    return Err(Error::InvalidInput("dataset resolution differs from the network config".into()));
                }
                Ok(ds)
            }
            None => Dataset::synthesize(&self.dataset),
        }
    }
}

/// One augmented training batch. The encoder input is built from the
/// un-augmented masked images; only the targets and the sample plans see
/// the affine transforms.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sample_indices: Vec<usize>,
    /// `I ⊙ M`, `[N, 3, H, W]`.
    pub encoder_input: Tensor<f32>,
    /// `A(I) ⊙ A(M)`, `[N, 3, H, W]`.
    pub target_image: Tensor<f32>,
    /// `A(M)`, `[N, 1, H, W]`.
    pub target_mask: Tensor<f32>,
    pub plans: Vec<Arc<SamplePlan>>,
    pub transforms: Vec<AffineTransform>,
    /// Reparameterisation noise, `[N, 256]`.
    pub noise: Tensor<f32>,
    source_hashes: Vec<u64>,
}

fn hash_f32(data: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    /// Fails unless every encoder input is the un-augmented masked source
    /// image it was built from.
    pub fn verify_unaugmented(&self) -> Result<()> {
        for (k, &h) in self.source_hashes.iter().enumerate() {
            if hash_f32(self.encoder_input.item(k)) != h {
                return Err(Error::InvalidInput(format!("encoder input {k} is not the un-augmented source image")));
            }
        }
        Ok(())
    }
}

/// Rasterizes `(α, β, pose)` after composing `transform` into the projection
/// and prepares bilinear taps into a `tex_size²` texture.
pub fn sample_plan(
    model: &MorphableModel,
    camera: &Camera,
    alpha: &[f64],
    beta: &[f64],
    pose: &Pose,
    transform: Option<&AffineTransform>,
    tex_size: usize,
) -> Result<SamplePlan> {
    let proj = project_model(model, alpha, beta, pose, camera)?;
    let points = match transform {
        Some(a) => compose_with_projection(a, &proj.points),
        None => proj.points,
    };
    let raster = rasterize(&points, &proj.depth, &model.triangles, &model.uv_coords, camera.image_size());
    SamplePlan::new(&raster, tex_size, tex_size)
}

/// Output of one generator forward pass for a single item.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// `3×H×W` in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// Mask probability, `1×H×W`.
    pub soft_mask: Tensor<f32>,
    /// `soft_mask ≥ 0.5`.
    pub mask: Mask,
    /// Neural texture, `C×Ht×Wt`.
    pub texture: Tensor<f32>,
}

impl Generated {
    pub fn masked_image(&self) -> Tensor<f32> {
        let hw = self.mask.height * self.mask.width;
        Tensor::from_fn(self.image.shape(), |i| if self.mask.data[i % hw] { self.image[i] } else { 0.0 })
    }
}

/// Conditions for one generated image.
#[derive(Clone, Debug)]
pub struct Request {
    pub z: LatentCode,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub pose: Pose,
}

/// Where latent codes are drawn from.
#[derive(Clone, Debug)]
pub enum SampleMode<'a> {
    /// `z ~ N(0, I)`.
    Prior,
    /// `z ~ N(μ, Σ)` of a masked `3×H×W` reference image.
    Posterior(Option<&'a Tensor<f32>>),
}

/// Network weights, optimizer moments and the sampling RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub step: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
    pub extractor: ConvStackExtractor,
    pub model: MorphableModel,
    pub camera: Camera,
    pub rng: ChaCha8Rng,
}

/// Intermediate values of one generator pass in a graph.
struct Forward {
    mu: Var,
    log_var: Var,
    f_face: Var,
    image: Var,
    mask_logits: Var,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, model: MorphableModel, camera: Camera) -> Result<Self> {
        config.validate()?;
        if camera.image_size() != (config.network.image_size, config.network.image_size) {
            return Err(Error::InvalidInput("camera resolution differs from the network config".into()));
        }
        let generator = Generator::new(&config.network, config.seed)?;
        let discriminator = Discriminator::new(&config.network, config.seed)?;
        let adam = config.optimizer.adam();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(100);
        Ok(Self {
            generator_opt: Adam::new(adam, &generator.store),
            discriminator_opt: Adam::new(adam, &discriminator.store),
            generator,
            discriminator,
            extractor: ConvStackExtractor::new(config.perceptual_seed),
            config: config.clone(),
            step: 0,
            model,
            camera,
            rng,
        })
    }

    /// A fresh state for `dataset`'s geometry.
    pub fn for_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        Self::new(config, dataset.scene.model.clone(), dataset.scene.camera)
    }

    /// Draws a batch from the training split using the state's RNG.
    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        let train: Vec<usize> = dataset.split(Split::Train).map(|s| s.index).collect();
        if train.is_empty() {
            return Err(Error::InvalidInput("dataset has no training samples".into()));
        }
        let n = self.config.training.batch_size;
        let picks: Vec<usize> = if n <= train.len() {
            sample_indices(&mut self.rng, train.len(), n).into_iter().map(|i| train[i]).collect()
        } else {
            (0..n).map(|_| train[self.rng.gen_range(0..train.len())]).collect()
        };
        let mut rng = self.rng.clone();
        let batch = make_batch(&self.config, &self.model, dataset, &picks, &mut rng)?;
        self.rng = rng;
        Ok(batch)
    }

    fn forward(&self, g: &Graph<f32>, batch: &Batch) -> Result<Forward> {
        let gen = &self.generator;
        let x = g.constant(batch.encoder_input.clone());
        let (mu, log_var) = gen.encode(g, x)?;
        let eps = g.constant(batch.noise.clone());
        let z = g.add(mu, g.mul(g.exp(g.scale(log_var, 0.5)), eps));
        let z_face = g.narrow(z, 0, LATENT_SPLIT);
        let z_add = g.narrow(z, LATENT_SPLIT, LATENT_DIM - LATENT_SPLIT);
        let texture = gen.decode_texture(g, z_face);
        let f_face = sample_texture_batch(g, texture, &batch.plans)?;
        let f_add = gen.decode_additive(g, z_add, f_face)?;
        let (image, mask_logits) = gen.feature2image(g, f_face, f_add)?;
        Ok(Forward { mu, log_var, f_face, image, mask_logits })
    }

    fn discriminator_loss(&self, g: &Graph<f32>, fake: Var, real: Var) -> Result<Var> {
        let d_fake: Vec<Var> = self.discriminator.forward(g, fake).into_iter().map(|o| o.scores).collect();
        let d_real: Vec<Var> = self.discriminator.forward(g, real).into_iter().map(|o| o.scores).collect();
        adv_discriminator(g, &d_fake, &d_real, self.config.loss.adv)
    }

    fn generator_terms(&self, g: &Graph<f32>, fwd: &Forward, batch: &Batch) -> Result<GeneratorTerms> {
        let target = g.constant(batch.target_image.clone());
        let target_mask = g.constant(batch.target_mask.clone());
        let l2 = photometric_l2(g, fwd.image, target)?;
        let vgg = perceptual(g, fwd.image, target, &self.extractor as &dyn PerceptualExtractor<f32>)?;
        let mask = mask_bce(g, g.sigmoid(fwd.mask_logits), target_mask)?;
        let kl = kl_divergence(g, fwd.mu, fwd.log_var)?;
        let fake_out = self.discriminator.forward(g, fwd.image);
        let real_out = self.discriminator.forward(g, target);
        let scores: Vec<Var> = fake_out.iter().map(|o| o.scores).collect();
        let ff: Vec<Vec<Var>> = fake_out.iter().map(|o| o.features.clone()).collect();
        let rf: Vec<Vec<Var>> = real_out.iter().map(|o| o.features.clone()).collect();
        let adv = adv_generator(g, &scores, &ff, &rf)?;
        let rgb = if self.config.rgb_loss { Some(rgb_texture_loss(g, fwd.f_face, target)?) } else { None };
        Ok(GeneratorTerms { l2, vgg, mask, kl, adv, rgb })
    }

    /// Generator and discriminator gradients for one batch under the current
    /// weights, without updating anything.
    pub fn gradients(&self, batch: &Batch) -> Result<(facetex_grad::Gradients<f32>, facetex_grad::Gradients<f32>)> {
        let gd = Graph::with_trainable(&[DISCRIMINATOR_GROUP]);
        let fwd = self.forward(&gd, batch)?;
        let d_loss = self.discriminator_loss(&gd, gd.detach(fwd.image), gd.constant(batch.target_image.clone()))?;
        let d_grads = gd.backward(d_loss);
        let gg = Graph::with_trainable(&[GENERATOR_GROUP]);
        let fwd = self.forward(&gg, batch)?;
        let terms = self.generator_terms(&gg, &fwd, batch)?;
        let total = total_generator_loss(&gg, &terms, &self.config.loss);
        Ok((gg.backward(total), d_grads))
    }

    /// One discriminator update on `A(I)` vs `Î`, then one generator update.
    /// A non-finite loss leaves the state untouched and returns an error.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        batch.verify_unaugmented()?;
        let g = Graph::with_trainable(&[GENERATOR_GROUP]);
        let fwd = self.forward(&g, batch)?;
        let fake_value = (*g.value(fwd.image)).clone();

        let gd = Graph::with_trainable(&[DISCRIMINATOR_GROUP]);
        let d_loss = self.discriminator_loss(&gd, gd.constant(fake_value), gd.constant(batch.target_image.clone()))?;
        let d_value = gd.value(d_loss)[0] as f64;
        if !d_value.is_finite() {
            return Err(self.nonfinite(format!("discriminator loss {d_value}")));
        }
        let d_grads = gd.backward(d_loss);
        let saved = (self.discriminator.store.clone(), self.discriminator_opt.clone());
        self.discriminator_opt.update(&mut self.discriminator.store, &d_grads);

        let terms = self.generator_terms(&g, &fwd, batch)?;
        let total = total_generator_loss(&g, &terms, &self.config.loss);
        let v = |x: Var| g.value(x)[0] as f64;
        let record = LossRecord {
            step: self.step,
            l2: v(terms.l2),
            vgg: v(terms.vgg),
            mask: v(terms.mask),
            kl: v(terms.kl),
            adv: v(terms.adv),
            rgb: terms.rgb.map(v).unwrap_or(0.0),
            generator_total: v(total),
            discriminator: d_value,
        };
        if !record.is_finite() {
            (self.discriminator.store, self.discriminator_opt) = saved;
            return Err(self.nonfinite(format!("{record:?}")));
        }
        let g_grads = g.backward(total);
        self.generator_opt.update(&mut self.generator.store, &g_grads);
        self.step += 1;
        Ok(record)
    }

    fn nonfinite(&self, detail: String) -> Error {
        warn!("step {}: non-finite loss, update skipped: {detail}", self.step);
        Error::NonFiniteLoss { step: self.step, detail }
    }

    /// Runs `steps` updates, calling `on_step` after each successful one.
    /// Isolated non-finite steps are skipped; a run of them aborts.
    pub fn train(&mut self, dataset: &Dataset, steps: u64, mut on_step: impl FnMut(&TrainState, &LossRecord)) -> Result<Vec<LossRecord>> {
        let mut records = Vec::with_capacity(steps as usize);
        let mut failures = 0u32;
        while records.len() < steps as usize {
            let batch = self.next_batch(dataset)?;
            match self.train_step(&batch) {
                Ok(r) => {
                    failures = 0;
                    on_step(self, &r);
                    records.push(r);
                }
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    failures += 1;
                    if failures > self.config.training.max_nonfinite_steps {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(records)
    }

    /// Encodes a masked `3×H×W` image.
    pub fn encode(&self, masked_image: &Tensor<f32>) -> Result<LatentDistribution> {
        let g = Graph::new();
        let x = g.constant(masked_image.clone().reshape(&[1, 3, masked_image.shape()[1], masked_image.shape()[2]]));
        let (mu, lv) = self.generator.encode(&g, x)?;
        Ok(LatentDistribution { mu: g.value(mu).data().to_vec(), log_var: g.value(lv).data().to_vec() })
    }

    /// The neural texture of `z_face`; no pose or geometry enters.
    pub fn decode_texture(&self, z_face: &[f32]) -> Result<Tensor<f32>> {
        if z_face.len() != LATENT_SPLIT {
            return Err(Error::Dimension(format!("z_face has {} entries", z_face.len())));
        }
        let g = Graph::new();
        let t = self.generator.decode_texture(&g, g.constant(Tensor::new(&[1, LATENT_SPLIT], z_face.to_vec())));
        let v = (*g.value(t)).clone();
        let s = v.shape()[1..].to_vec();
        Ok(v.reshape(&s))
    }

    /// Full forward path for one latent code and geometry.
    pub fn generate(&self, z: &LatentCode, alpha: &[f64], beta: &[f64], pose: &Pose) -> Result<Generated> {
        let req = Request { z: z.clone(), alpha: alpha.to_vec(), beta: beta.to_vec(), pose: *pose };
        Ok(self.generate_batch(std::slice::from_ref(&req))?.pop().expect("one request"))
    }

    /// Batched [`TrainState::generate`]. Results are identical to
    /// generating every request on its own.
    pub fn generate_batch(&self, requests: &[Request]) -> Result<Vec<Generated>> {
        let mut out = Vec::with_capacity(requests.len());
        for r in requests {
            let plan = sample_plan(&self.model, &self.camera, &r.alpha, &r.beta, &r.pose, None, self.config.network.texture_size)?;
            let g = Graph::new();
            let z = g.constant(Tensor::new(&[1, LATENT_DIM], r.z.as_slice().to_vec()));
            let texture = self.generator.decode_texture(&g, g.narrow(z, 0, LATENT_SPLIT));
            let f_face = sample_texture_batch(&g, texture, &[Arc::new(plan)])?;
            let f_add = self.generator.decode_additive(&g, g.narrow(z, LATENT_SPLIT, LATENT_DIM - LATENT_SPLIT), f_face)?;
            let (image, logits) = self.generator.feature2image(&g, f_face, f_add)?;
            let prob = g.value(g.sigmoid(logits));
            let (h, w) = self.camera.image_size();
            let mask = Mask::new(h, w, prob.data().iter().map(|&p| p >= 0.5).collect());
            let tex = g.value(texture);
            let ts = tex.shape()[1..].to_vec();
            out.push(Generated {
                image: (*g.value(image)).clone().reshape(&[3, h, w]),
                soft_mask: (*prob).clone().reshape(&[1, h, w]),
                mask,
                texture: (*tex).clone().reshape(&ts),
            });
        }
        Ok(out)
    }

    /// Re-renders a dataset sample from its encoding's posterior mean with
    /// the sample's own shape, expression and pose.
    pub fn reconstruct(&self, sample: &Sample) -> Result<Generated> {
        let dist = self.encode(&sample.masked_image())?;
        self.generate(&LatentCode::new(dist.mu)?, &sample.alpha, &sample.beta, &sample.pose)
    }

    /// Draws a latent code from the prior or from an encoded image's posterior.
    pub fn sample_identity(&self, rng: &mut impl Rng, mode: SampleMode<'_>) -> Result<LatentCode> {
        match mode {
            SampleMode::Prior => sample_prior(rng),
            SampleMode::Posterior(None) => Err(Error::InvalidInput("posterior sampling needs a reference image".into())),
            SampleMode::Posterior(Some(img)) => sample_posterior(rng, &self.encode(img)?),
        }
    }

    /// Renders one identity at each `(yaw, pitch)` offset and tiles the
    /// results into rows of `cols` cells.
    pub fn repose_grid(&self, z: &LatentCode, alpha: &[f64], beta: &[f64], angles: &[(f64, f64)], cols: usize) -> Result<ReposeGrid> {
        let requests: Vec<Request> = angles
            .iter()
            .map(|&(yaw, pitch)| Request { z: z.clone(), alpha: alpha.to_vec(), beta: beta.to_vec(), pose: Pose::from_euler_deg(yaw, pitch, 0.0) })
            .collect();
        let cells: Vec<Tensor<f32>> = self.generate_batch(&requests)?.into_iter().map(|g| g.masked_image()).collect();
        let image = tile(&cells, cols.max(1))?;
        Ok(ReposeGrid { image, cells, angles: angles.to_vec() })
    }
}

#[derive(Clone, Debug)]
pub struct ReposeGrid {
    /// All cells tiled into one image.
    pub image: Tensor<f32>,
    pub cells: Vec<Tensor<f32>>,
    pub angles: Vec<(f64, f64)>,
}

/// Builds a batch from dataset samples, drawing transforms and noise from `rng`.
pub fn make_batch(
    config: &ExperimentConfig,
    model: &MorphableModel,
    dataset: &Dataset,
    indices: &[usize],
    rng: &mut impl Rng,
) -> Result<Batch> {
    let n = indices.len();
    let size = config.network.image_size;
    let hw = size * size;
    let mut encoder_input = Tensor::zeros(&[n, 3, size, size]);
    let mut target_image = Tensor::zeros(&[n, 3, size, size]);
    let mut target_mask = Tensor::zeros(&[n, 1, size, size]);
    let mut plans = Vec::with_capacity(n);
    let mut transforms = Vec::with_capacity(n);
    let mut noise = Tensor::zeros(&[n, LATENT_DIM]);
    let mut source_hashes = Vec::with_capacity(n);
    for (k, &idx) in indices.iter().enumerate() {
        let s = dataset
            .samples
            .get(idx)
            .ok_or_else(|| Error::InvalidInput(format!("sample index {idx} out of range")))?;
        if s.mask.height != size || s.mask.width != size {
            return Err(Error::Dimension(format!("sample {idx} is not {size}×{size}")));
        }
        let masked = s.masked_image();
        source_hashes.push(hash_f32(masked.data()));
        encoder_input.data_mut()[k * 3 * hw..(k + 1) * 3 * hw].copy_from_slice(masked.data());

        let a = sample_affine(rng, &config.augment, size, size)?;
        let warped_mask = apply_to_mask(&a, &s.mask)?;
        let warped = apply_to_image(&a, &masked)?;
        for c in 0..3 {
            for p in 0..hw {
                target_image[(k * 3 + c) * hw + p] = if warped_mask.data[p] { warped[c * hw + p] } else { 0.0 };
            }
        }
        for p in 0..hw {
            target_mask[k * hw + p] = warped_mask.data[p] as u8 as f32;
        }
        let plan = sample_plan(model, &s.camera, &s.alpha, &s.beta, &s.pose, Some(&a), config.network.texture_size)?;
        plans.push(Arc::new(plan));
        transforms.push(a);
        for v in &mut noise.data_mut()[k * LATENT_DIM..(k + 1) * LATENT_DIM] {
            *v = rng.sample(StandardNormal);
        }
    }
    Ok(Batch { sample_indices: indices.to_vec(), encoder_input, target_image, target_mask, plans, transforms, noise, source_hashes })
}

pub fn sample_prior(rng: &mut impl Rng) -> Result<LatentCode> {
    LatentCode::new((0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect())
}

pub fn sample_posterior(rng: &mut impl Rng, dist: &LatentDistribution) -> Result<LatentCode> {
    let noise: Vec<f32> = (0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize(dist, &noise)
}

/// `(1 − t)·z_a + t·z_b` for `t ∈ [0, 1]`.
pub fn interpolate(z_a: &LatentCode, z_b: &LatentCode, t: f64) -> Result<LatentCode> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("interpolation weight {t} outside [0, 1]")));
    }
    let t = t as f32;
    LatentCode::new(z_a.as_slice().iter().zip(z_b.as_slice()).map(|(&a, &b)| (1.0 - t) * a + t * b).collect())
}
