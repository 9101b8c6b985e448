//! The learnable components: variational encoder, face texture decoder,
//! additive decoder, feature-to-image U-Net and a two-scale patch
//! discriminator, plus the frozen perceptual feature extractor.
//!
//! All generator-side weights live in one [`ParamStore`] so a single
//! optimizer drives them; the discriminator and the extractor each own a
//! separate store.

use facetex_grad::nn::{Conv2d, Linear};
use facetex_grad::{GroupId, Graph, ParamId, ParamStore, Scalar, Tensor, Var, LEAKY_SLOPE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 256;
/// `z[..128]` drives the face texture, `z[128..]` the additive decoder.
pub const LATENT_SPLIT: usize = 128;
/// Spatial size the latent halves are broadcast to before decoding.
pub const LATENT_GRID: usize = 8;
/// Initial bias of the encoder's log-variance outputs.
pub const LOG_VAR_INIT: f64 = -6.0;

pub const GENERATOR_GROUP: GroupId = 1;
pub const DISCRIMINATOR_GROUP: GroupId = 2;
pub const PERCEPTUAL_GROUP: GroupId = 3;
pub const EMBEDDER_GROUP: GroupId = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub texture_size: usize,
    pub texture_channels: usize,
    pub encoder_width: usize,
    pub texture_width: usize,
    pub additive_width: usize,
    pub unet_width: usize,
    pub disc_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            texture_size: 64,
            texture_channels: 16,
            encoder_width: 16,
            texture_width: 64,
            additive_width: 32,
            unet_width: 16,
            disc_width: 16,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |n: usize, min: usize| n.is_power_of_two() && n >= min;
        if !pow2(self.image_size, 16) {
            return Err(Error::InvalidInput(format!("image size {} must be a power of two ≥ 16", self.image_size)));
        }
        if !pow2(self.texture_size, LATENT_GRID) {
            return Err(Error::InvalidInput(format!("texture size {} must be a power of two ≥ 8", self.texture_size)));
        }
        if self.texture_channels < 3 {
            return Err(Error::InvalidInput("texture needs at least 3 channels".into()));
        }
        if [self.encoder_width, self.texture_width, self.additive_width, self.unet_width, self.disc_width].contains(&0) {
            return Err(Error::InvalidInput("network widths must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the additive feature image, equal to the texture's.
    pub fn additive_channels(&self) -> usize {
        self.texture_channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    z: Vec<f32>,
}

impl LatentCode {
    pub fn new(z: Vec<f32>) -> Result<Self> {
        if z.len() != LATENT_DIM {
            return Err(Error::Dimension(format!("latent code has {} entries, expected {LATENT_DIM}", z.len())));
        }
        Ok(Self { z })
    }

    pub fn from_parts(face: &[f32], additive: &[f32]) -> Result<Self> {
        Self::new([face, additive].concat())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.z
    }

    pub fn face(&self) -> &[f32] {
        &self.z[..LATENT_SPLIT]
    }

    pub fn additive(&self) -> &[f32] {
        &self.z[LATENT_SPLIT..]
    }
}

/// Diagonal Gaussian over latent codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

/// `z = μ + exp(½·log σ²) ⊙ noise`.
pub fn reparameterize(dist: &LatentDistribution, noise: &[f32]) -> Result<LatentCode> {
    if dist.mu.len() != LATENT_DIM || dist.log_var.len() != LATENT_DIM || noise.len() != LATENT_DIM {
        return Err(Error::Dimension("latent distribution and noise must have 256 entries".into()));
    }
    LatentCode::new(
        dist.mu
            .iter()
            .zip(&dist.log_var)
            .zip(noise)
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect(),
    )
}

fn lrelu<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, LEAKY_SLOPE)
}

fn spatial(g: &Graph<impl Scalar>, x: Var) -> (usize, usize, usize, usize) {
    let s = g.shape(x);
    (s[0], s[1], s[2], s[3])
}

fn log2(n: usize) -> usize {
    n.trailing_zeros() as usize
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Residual downsampling block.
#[derive(Clone, Debug)]
struct ResDown {
    a: Conv2d,
    b: Conv2d,
    skip: Conv2d,
}

impl ResDown {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.a"), c_in, c_out, 3, 2, 1, rng),
            b: Conv2d::with_gain(store, &format!("{name}.b"), c_out, c_out, 3, 1, 1, 0.5, rng),
            skip: Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 2, 0, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let h = lrelu(g, self.a.forward(g, s, x));
        let h = self.b.forward(g, s, h);
        lrelu(g, g.add(h, self.skip.forward(g, s, x)))
    }
}

/// Residual convolutional encoder producing `(μ, log σ²)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv2d,
    blocks: Vec<ResDown>,
    head: Linear,
    input_size: usize,
}

impl Encoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.encoder_width;
        let stem = Conv2d::new(store, "enc.stem", 3, w, 3, 2, 1, rng);
        // Downsample from H/2 to 4×4.
        let n_blocks = log2(cfg.image_size) - 3;
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut c = w;
        for k in 0..n_blocks {
            let c_out = (w << (k + 1)).min(4 * w);
            blocks.push(ResDown::new(store, &format!("enc.block{k}"), c, c_out, rng));
            c = c_out;
        }
        let head = Linear::new(store, "enc.head", c * 16, 2 * LATENT_DIM, 0.5, rng);
        // Start with a narrow posterior so the decoders see the encoded signal
        // rather than reparameterisation noise.
        let bias = store.get_mut(head.bias);
        for k in LATENT_DIM..2 * LATENT_DIM {
            bias[k] = T::cst(LOG_VAR_INIT);
        }
        Self { stem, blocks, head, input_size: cfg.image_size }
    }

    /// `x: [N, 3, H, W]` → `(μ, log σ²)`, each `[N, 256]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let (n, c, h, w) = spatial(g, x);
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(Error::Dimension(format!(
                "encoder expects [N, 3, {0}, {0}], got [{n}, {c}, {h}, {w}]",
                self.input_size
            )));
        }
        let mut h = lrelu(g, self.stem.forward(g, s, x));
        for b in &self.blocks {
            h = b.forward(g, s, h);
        }
        let flat_len: usize = g.shape(h)[1..].iter().product();
        let out = self.head.forward(g, s, g.reshape(h, &[n, flat_len]));
        let mu = g.narrow(out, 0, LATENT_DIM);
        // Bounded so that exp(½·log σ²) stays finite early in training.
        let log_var = g.clamp(g.narrow(out, LATENT_DIM, LATENT_DIM), -12.0, 8.0);
        Ok((mu, log_var))
    }
}

/// `[N, 2, h, w]` normalised pixel-centre coordinates in `[-1, 1]`.
fn coordinate_grid<T: Scalar>(n: usize, h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, 2, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = (i / (h * w)) % 2;
        let (p, size) = if ch == 0 { (x, w) } else { (y, h) };
        T::cst((2.0 * p as f64 + 1.0) / size as f64 - 1.0)
    })
}

/// Upsampling stage: nearest ×2, coordinate channels, conv, then a residual conv.
#[derive(Clone, Debug)]
struct UpStage {
    conv: Conv2d,
    res: Conv2d,
}

fn with_coords<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    let (n, _, h, w) = spatial(g, x);
    g.concat(&[x, g.constant(coordinate_grid(n, h, w))])
}

impl UpStage {
    fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let h = lrelu(g, self.conv.forward(g, s, with_coords(g, g.upsample2x(x))));
        g.add(h, self.res.forward(g, s, lrelu(g, h)))
    }
}

/// `z_face` → neural texture `[N, C, Ht, Wt]`. Takes no pose or expression input.
#[derive(Clone, Debug)]
pub struct TextureDecoder {
    input: Conv2d,
    stages: Vec<UpStage>,
    out: Conv2d,
    /// Identity-independent texture `[C·Ht·Wt, 1]` added to every output.
    base: ParamId,
    shape: [usize; 3],
}

impl TextureDecoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.texture_width;
        let input = Conv2d::new(store, "tex.input", LATENT_SPLIT + 2, w, 3, 1, 1, rng);
        let n_up = log2(cfg.texture_size) - log2(LATENT_GRID);
        let mut stages = Vec::with_capacity(n_up);
        let mut c = w;
        for k in 0..n_up {
            let c_out = (w >> (k + 1)).max(16).min(w);
            stages.push(UpStage {
                conv: Conv2d::same(store, &format!("tex.up{k}"), c + 2, c_out, rng),
                res: Conv2d::with_gain(store, &format!("tex.res{k}"), c_out, c_out, 3, 1, 1, 0.5, rng),
            });
            c = c_out;
        }
        let out = Conv2d::same(store, "tex.out", c + 2, cfg.texture_channels, rng);
        let shape = [cfg.texture_channels, cfg.texture_size, cfg.texture_size];
        let base = store.add("tex.base", Tensor::zeros(&[shape.iter().product(), 1]));
        Self { input, stages, out, base, shape }
    }

    /// `z_face: [N, 128]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, z_face: Var) -> Var {
        let x = with_coords(g, g.broadcast_spatial(z_face, LATENT_GRID, LATENT_GRID));
        let mut h = lrelu(g, self.input.forward(g, s, x));
        for st in &self.stages {
            h = st.forward(g, s, h);
        }
        let n = g.shape(z_face)[0];
        let [c, th, tw] = self.shape;
        let base = g.reshape(g.linear(g.constant(Tensor::full(&[n, 1], T::one())), g.param(s, self.base), None), &[n, c, th, tw]);
        g.add(self.out.forward(g, s, with_coords(g, h)), base)
    }
}

/// `(z_additive, F_face)` → `F_additive`, conditioned on the face feature
/// image rescaled to every decoder resolution.
#[derive(Clone, Debug)]
pub struct AdditiveDecoder {
    input: Conv2d,
    stages: Vec<Conv2d>,
    out: Conv2d,
    channels: usize,
    image_size: usize,
}

impl AdditiveDecoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.additive_width;
        let c_face = cfg.texture_channels;
        let input = Conv2d::new(store, "add.input", LATENT_SPLIT + c_face, w, 3, 1, 1, rng);
        let n_up = log2(cfg.image_size) - log2(LATENT_GRID);
        let mut stages = Vec::with_capacity(n_up);
        let mut c = w;
        for k in 0..n_up {
            let c_out = (w >> (k + 1)).max(16).min(w);
            stages.push(Conv2d::same(store, &format!("add.up{k}"), c + c_face, c_out, rng));
            c = c_out;
        }
        let out = Conv2d::same(store, "add.out", c, cfg.additive_channels(), rng);
        Self { input, stages, out, channels: c_face, image_size: cfg.image_size }
    }

    /// `z_additive: [N, 128]`, `f_face: [N, C, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, z_additive: Var, f_face: Var) -> Result<Var> {
        let (n, c, h, w) = spatial(g, f_face);
        if c != self.channels || h != self.image_size || w != self.image_size {
            return Err(Error::Dimension(format!(
                "additive decoder expects face features [N, {}, {}, {}], got [{n}, {c}, {h}, {w}]",
                self.channels,
                self.image_size,
                self.image_size
            )));
        }
        // Pyramid of the face features, finest first.
        let mut pyramid = vec![f_face];
        while g.shape(*pyramid.last().expect("nonempty"))[2] > LATENT_GRID {
            let next = g.avgpool2x(*pyramid.last().expect("nonempty"));
            pyramid.push(next);
        }
        let coarse = pyramid.pop().expect("nonempty");
        let x = g.concat(&[g.broadcast_spatial(z_additive, LATENT_GRID, LATENT_GRID), coarse]);
        let mut hdd = lrelu(g, self.input.forward(g, s, x));
        for conv in &self.stages {
            let cond = pyramid.pop().expect("one level per stage");
            hdd = lrelu(g, conv.forward(g, s, g.concat(&[g.upsample2x(hdd), cond])));
        }
        Ok(self.out.forward(g, s, hdd))
    }
}

/// Four-level U-Net mapping stacked feature images to an RGB image in
/// `[-1, 1]` and mask logits.
#[derive(Clone, Debug)]
pub struct Feature2Image {
    e0: Conv2d,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    bottleneck: Conv2d,
    d2: Conv2d,
    d1: Conv2d,
    d0: Conv2d,
    rgb: Conv2d,
    mask: Conv2d,
    in_channels: usize,
}

impl Feature2Image {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let u = cfg.unet_width;
        let c_in = cfg.texture_channels + cfg.additive_channels();
        Self {
            e0: Conv2d::same(store, "f2i.e0", c_in, u, rng),
            e1: Conv2d::new(store, "f2i.e1", u, 2 * u, 3, 2, 1, rng),
            e2: Conv2d::new(store, "f2i.e2", 2 * u, 4 * u, 3, 2, 1, rng),
            e3: Conv2d::new(store, "f2i.e3", 4 * u, 4 * u, 3, 2, 1, rng),
            bottleneck: Conv2d::same(store, "f2i.bottleneck", 4 * u, 4 * u, rng),
            d2: Conv2d::same(store, "f2i.d2", 8 * u, 4 * u, rng),
            d1: Conv2d::same(store, "f2i.d1", 6 * u, 2 * u, rng),
            d0: Conv2d::same(store, "f2i.d0", 3 * u, u, rng),
            rgb: Conv2d::with_gain(store, "f2i.rgb", u, 3, 3, 1, 1, 0.5, rng),
            mask: Conv2d::with_gain(store, "f2i.mask", u, 1, 3, 1, 1, 0.5, rng),
            in_channels: c_in,
        }
    }

    /// Returns `(image [N,3,H,W], mask_logits [N,1,H,W])`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, f_face: Var, f_additive: Var) -> Result<(Var, Var)> {
        let (a, b) = (g.shape(f_face), g.shape(f_additive));
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
            return Err(Error::Dimension(format!("feature images {a:?} and {b:?} are not pixel-aligned")));
        }
        if a[1] + b[1] != self.in_channels {
            return Err(Error::Dimension(format!("expected {} stacked channels, got {}", self.in_channels, a[1] + b[1])));
        }
        let x = g.concat(&[f_face, f_additive]);
        let e0 = lrelu(g, self.e0.forward(g, s, x));
        let e1 = lrelu(g, self.e1.forward(g, s, e0));
        let e2 = lrelu(g, self.e2.forward(g, s, e1));
        let e3 = lrelu(g, self.e3.forward(g, s, e2));
        let b = lrelu(g, self.bottleneck.forward(g, s, e3));
        let d2 = lrelu(g, self.d2.forward(g, s, g.concat(&[g.upsample2x(b), e2])));
        let d1 = lrelu(g, self.d1.forward(g, s, g.concat(&[g.upsample2x(d2), e1])));
        let d0 = lrelu(g, self.d0.forward(g, s, g.concat(&[g.upsample2x(d1), e0])));
        Ok((g.tanh(self.rgb.forward(g, s, d0)), self.mask.forward(g, s, d0)))
    }
}

/// Encoder, both decoders and the U-Net, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar = f32> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub texture: TextureDecoder,
    pub additive: AdditiveDecoder,
    pub feature2image: Feature2Image,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(GENERATOR_GROUP);
        let encoder = Encoder::new(&mut store, config, &mut stream(seed, 1));
        let texture = TextureDecoder::new(&mut store, config, &mut stream(seed, 2));
        let additive = AdditiveDecoder::new(&mut store, config, &mut stream(seed, 3));
        let feature2image = Feature2Image::new(&mut store, config, &mut stream(seed, 4));
        Ok(Self { config: config.clone(), store, encoder, texture, additive, feature2image })
    }

    pub fn encode(&self, g: &Graph<T>, masked_image: Var) -> Result<(Var, Var)> {
        self.encoder.forward(g, &self.store, masked_image)
    }

    pub fn decode_texture(&self, g: &Graph<T>, z_face: Var) -> Var {
        self.texture.forward(g, &self.store, z_face)
    }

    pub fn decode_additive(&self, g: &Graph<T>, z_additive: Var, f_face: Var) -> Result<Var> {
        self.additive.forward(g, &self.store, z_additive, f_face)
    }

    pub fn feature2image(&self, g: &Graph<T>, f_face: Var, f_additive: Var) -> Result<(Var, Var)> {
        self.feature2image.forward(g, &self.store, f_face, f_additive)
    }

    /// Parameter names grouped by sub-network prefix.
    pub fn component_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }
}

/// Convolution geometry `(kernel, stride, pad)` of the patch discriminator.
const DISC_LAYERS: [(usize, usize, usize); 4] = [(4, 2, 1), (4, 2, 1), (3, 1, 1), (3, 1, 1)];

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
}

impl PatchDiscriminator {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let chans = [3, width, 2 * width, 4 * width, 1];
        let layers = DISC_LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(k, s, p))| Conv2d::new(store, &format!("{name}.l{i}"), chans[i], chans[i + 1], k, s, p, rng))
            .collect();
        Self { layers }
    }

    /// Patch scores and the activations of every hidden layer.
    fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut feats = Vec::with_capacity(self.layers.len() - 1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, s, h);
            if i + 1 < self.layers.len() {
                h = lrelu(g, h);
                feats.push(h);
            }
        }
        (h, feats)
    }
}

/// Scores and hidden activations of one discriminator scale.
#[derive(Clone, Debug)]
pub struct ScaleOutput {
    pub scores: Var,
    pub features: Vec<Var>,
}

/// Patch discriminator applied to the image and to its 2× average-pooled copy.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar = f32> {
    pub store: ParamStore<T>,
    scales: Vec<PatchDiscriminator>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(DISCRIMINATOR_GROUP);
        let scales = (0..2)
            .map(|k| PatchDiscriminator::new(&mut store, &format!("disc.s{k}"), config.disc_width, &mut stream(seed, 10 + k)))
            .collect();
        Ok(Self { store, scales })
    }

    pub fn forward(&self, g: &Graph<T>, image: Var) -> Vec<ScaleOutput> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.scales.len());
        for (k, d) in self.scales.iter().enumerate() {
            if k > 0 {
                x = g.avgpool2x(x);
            }
            let (scores, features) = d.forward(g, &self.store, x);
            out.push(ScaleOutput { scores, features });
        }
        out
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    /// Inclusive input-pixel range `[lo, hi]` (along one axis, full
    /// resolution) that can influence score cell `index` at `scale`.
    pub fn input_window(scale: usize, index: usize) -> (isize, isize) {
        let (mut lo, mut hi) = (index as isize, index as isize);
        for &(k, s, p) in DISC_LAYERS.iter().rev() {
            lo = lo * s as isize - p as isize;
            hi = hi * s as isize - p as isize + k as isize - 1;
        }
        for _ in 0..scale {
            lo *= 2;
            hi = 2 * hi + 1;
        }
        (lo, hi)
    }
}

/// Frozen feature stack for the perceptual loss.
pub trait PerceptualExtractor<T: Scalar>: Send + Sync {
    /// Feature maps to compare, in layer order.
    fn features(&self, g: &Graph<T>, image: Var) -> Vec<Var>;
    /// One weight per feature map.
    fn layer_weights(&self) -> Vec<f64>;
    /// Hash of the frozen weights.
    fn fingerprint(&self) -> u64;
}

/// Seed-initialised 5-layer strided conv stack, tapped after every layer,
/// with unit layer weights. Its parameter group is never trainable.
#[derive(Clone, Debug)]
pub struct ConvStackExtractor<T: Scalar = f32> {
    pub store: ParamStore<T>,
    layers: Vec<Conv2d>,
}

impl<T: Scalar> ConvStackExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new(PERCEPTUAL_GROUP);
        let mut rng = stream(seed, 20);
        let chans = [3, 8, 16, 32, 32, 32];
        let layers = (0..5)
            .map(|i| Conv2d::new(&mut store, &format!("perc.l{i}"), chans[i], chans[i + 1], 3, 2, 1, &mut rng))
            .collect();
        Self { store, layers }
    }
}

impl<T: Scalar> PerceptualExtractor<T> for ConvStackExtractor<T> {
    fn features(&self, g: &Graph<T>, image: Var) -> Vec<Var> {
        let mut h = image;
        self.layers
            .iter()
            .map(|l| {
                h = lrelu(g, l.forward(g, &self.store, h));
                h
            })
            .collect()
    }

    fn layer_weights(&self) -> Vec<f64> {
        vec![1.0; self.layers.len()]
    }

    fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }
}

/// Single-layer identity map; reduces the perceptual loss to mean absolute error.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> PerceptualExtractor<T> for IdentityExtractor {
    fn features(&self, _: &Graph<T>, image: Var) -> Vec<Var> {
        vec![image]
    }

    fn layer_weights(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn fingerprint(&self) -> u64 {
        0
    }
}
