//! Procedural stand-in for a real face dataset.
//!
//! Each identity owns a shape vector, a smooth RGB face texture with dark
//! eye/mouth blobs, and a texture for an exterior "hood" mesh that wraps the
//! face like hair. The hood is rendered into the images but is not part of the
//! morphable model, so the learned model has to explain it some other way.

use std::fs;
use std::path::{Path, PathBuf};

use facetex_grad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_synthetic_model, pose_mesh, MorphableModel, Pose, SphereGrid, Vec3};
use crate::imaging::{from_u8, load_rgb_png, save_rgb_png, to_u8, Mask};
use crate::raster::{bilinear_taps, project, rasterize, Camera, RasterOutput};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.bin";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub image_size: usize,
    pub texture_size: usize,
    pub exterior_texture_size: usize,
    pub n_vertices: usize,
    pub d_alpha: usize,
    pub d_beta: usize,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub alpha_std: f64,
    pub beta_std: f64,
    /// Fraction of identities (taken from the end of the id range) held out.
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_identities: 50,
            samples_per_identity: 40,
            image_size: 64,
            texture_size: 128,
            exterior_texture_size: 64,
            n_vertices: 1024,
            d_alpha: 8,
            d_beta: 8,
            max_yaw_deg: 30.0,
            max_pitch_deg: 30.0,
            alpha_std: 0.4,
            beta_std: 0.5,
            test_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.samples_per_identity == 0 {
            return Err(Error::InvalidInput("dataset must contain at least one sample".into()));
        }
        if self.image_size < 8 || self.texture_size < 2 || self.exterior_texture_size < 2 {
            return Err(Error::InvalidInput("image or texture size too small".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidInput("test_fraction must lie in [0, 1)".into()));
        }
        if self.max_yaw_deg.abs() > 90.0 || self.max_pitch_deg.abs() > 90.0 {
            return Err(Error::InvalidInput("pose range beyond ±90°".into()));
        }
        Ok(())
    }

    pub fn n_test_identities(&self) -> usize {
        (self.n_identities as f64 * self.test_fraction).round() as usize
    }

    pub fn is_test_identity(&self, id: usize) -> bool {
        id >= self.n_identities - self.n_test_identities()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: usize,
    /// `3×Ht×Wt` in `[-1, 1]`.
    pub texture_rgb: Tensor<f32>,
    pub alpha: Vec<f64>,
    pub exterior_texture: Tensor<f32>,
    pub exterior_seed: u64,
}

/// Canonical UV centres and radii `(u, v, ru, rv)` of the dark facial blobs.
const LANDMARKS: [(f64, f64, f64, f64); 3] = [(0.37, 0.42, 0.05, 0.035), (0.63, 0.42, 0.05, 0.035), (0.5, 0.73, 0.11, 0.035)];

fn identity_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sum of random low-frequency cosines over `[0,1]²`, one field per channel.
fn smooth_texture(rng: &mut ChaCha8Rng, size: usize, base: [f64; 3], amplitude: f64, max_freq: u32) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    for (c, &b) in base.iter().enumerate() {
        let n_terms = rng.gen_range(4..=8);
        let terms: Vec<(f64, f64, f64, f64)> = (0..n_terms)
            .map(|_| {
                (
                    rng.gen_range(-amplitude..amplitude),
                    rng.gen_range(0..=max_freq) as f64,
                    rng.gen_range(0..=max_freq) as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for y in 0..size {
            let v = y as f64 / (size - 1) as f64;
            for x in 0..size {
                let u = x as f64 / (size - 1) as f64;
                let s: f64 = terms
                    .iter()
                    .map(|&(a, fu, fv, ph)| a * (std::f64::consts::TAU * (fu * u + fv * v) / 2.0 + ph).cos())
                    .sum();
                out[(c * size + y) * size + x] = b + s;
            }
        }
    }
    out
}

fn finish(values: Vec<f64>, size: usize) -> Tensor<f32> {
    Tensor::new(&[3, size, size], values.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect())
}

/// Deterministic from `(dataset_seed, id)`.
pub fn make_identity(dataset_seed: u64, id: usize, config: &DatasetConfig) -> Identity {
    let mut rng = identity_rng(dataset_seed, 2 * id as u64);
    let tone = rng.gen_range(-0.4..0.6);
    let base = [tone + 0.25, tone - 0.05, tone - 0.2].map(|b| b + rng.gen_range(-0.2..0.2));
    let size = config.texture_size;
    let mut face = smooth_texture(&mut rng, size, base, 0.18, 3);
    for y in 0..size {
        let v = y as f64 / (size - 1) as f64;
        for x in 0..size {
            let u = x as f64 / (size - 1) as f64;
            let w = LANDMARKS
                .iter()
                .map(|&(cu, cv, ru, rv)| (-0.5 * (((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2))).exp())
                .fold(0.0, f64::max);
            for c in 0..3 {
                let p = &mut face[(c * size + y) * size + x];
                *p = *p * (1.0 - w) - 0.85 * w;
            }
        }
    }
    let normal = Normal::new(0.0, config.alpha_std.max(0.0)).expect("finite std");
    let alpha = (0..config.d_alpha).map(|_| round9(normal.sample(&mut rng))).collect();

    let exterior_seed = rng.gen();
    let mut ext_rng = identity_rng(exterior_seed, 0);
    let shade = ext_rng.gen_range(-0.9..0.4);
    let ext_base = [shade + 0.1, shade, shade - 0.1].map(|b| b + ext_rng.gen_range(-0.15..0.15));
    let exterior = smooth_texture(&mut ext_rng, config.exterior_texture_size, ext_base, 0.12, 6);
    Identity {
        id,
        texture_rgb: finish(face, size),
        alpha,
        exterior_texture: finish(exterior, config.exterior_texture_size),
        exterior_seed,
    }
}

/// The hair-like surface surrounding the face, rigidly attached to the head.
#[derive(Clone, Debug)]
pub struct ExteriorMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub uv_coords: Vec<[f64; 2]>,
}

impl ExteriorMesh {
    /// A larger sphere section set behind the face cap so it shows around the
    /// face silhouette without covering it.
    pub fn standard() -> Self {
        let g = SphereGrid::new(20, 24, 80.0, 105.0, 1.12, [0.0, 0.12, -0.45]);
        Self { vertices: g.vertices, triangles: g.triangles, uv_coords: g.uvs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// `3×H×W` in `[-1, 1]`, exactly 0 outside the mask.
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub pose: Pose,
    pub camera: Camera,
    pub identity_id: usize,
    pub split: Split,
}

impl Sample {
    /// The image with every channel multiplied by the mask.
    pub fn masked_image(&self) -> Tensor<f32> {
        let hw = self.mask.height * self.mask.width;
        Tensor::from_fn(self.image.shape(), |i| if self.mask.data[i % hw] { self.image[i] } else { 0.0 })
    }
}

/// Face model, exterior mesh and camera shared by every sample.
#[derive(Clone, Debug)]
pub struct Scene {
    pub model: MorphableModel,
    pub exterior: ExteriorMesh,
    pub camera: Camera,
}

/// Joint rasterization of the face and exterior meshes.
#[derive(Clone, Debug)]
pub struct SceneRaster {
    pub raster: RasterOutput,
    /// Triangle indices below this belong to the face mesh.
    pub n_face_triangles: usize,
}

impl SceneRaster {
    pub fn face_coverage(&self) -> Mask {
        let data = self.raster.tri_index.iter().map(|&t| t >= 0 && (t as usize) < self.n_face_triangles).collect();
        Mask::new(self.raster.height, self.raster.width, data)
    }
}

impl Scene {
    pub fn new(config: &DatasetConfig) -> Result<Self> {
        Ok(Self {
            model: make_synthetic_model(config.seed, config.n_vertices, config.d_alpha, config.d_beta)?,
            exterior: ExteriorMesh::standard(),
            camera: Camera::for_resolution(config.image_size),
        })
    }

    pub fn rasterize(&self, alpha: &[f64], beta: &[f64], pose: &Pose) -> Result<SceneRaster> {
        let mut verts = pose_mesh(&self.model.compute_mesh(alpha, beta)?, pose)?;
        verts.extend(pose_mesh(&self.exterior.vertices, pose)?);
        let cam: Vec<Vec3> = verts.iter().map(|&v| self.camera.world_to_camera(v)).collect();
        let proj = project(&cam, &self.camera)?;
        let offset = self.model.n_vertices() as u32;
        let mut tris = self.model.triangles.clone();
        tris.extend(self.exterior.triangles.iter().map(|t| t.map(|i| i + offset)));
        let mut uvs = self.model.uv_coords.clone();
        uvs.extend_from_slice(&self.exterior.uv_coords);
        let raster = rasterize(&proj.points, &proj.depth, &tris, &uvs, self.camera.image_size());
        Ok(SceneRaster { raster, n_face_triangles: self.model.triangles.len() })
    }

    /// Unlit render of one identity; returns the quantised image and mask.
    pub fn render(&self, identity: &Identity, beta: &[f64], pose: &Pose) -> Result<(Tensor<f32>, Mask)> {
        let sr = self.rasterize(&identity.alpha, beta, pose)?;
        let r = &sr.raster;
        let (h, w) = (r.height, r.width);
        let mut image = Tensor::zeros(&[3, h, w]);
        for p in 0..h * w {
            if !r.coverage[p] {
                continue;
            }
            let tex = if (r.tri_index[p] as usize) < sr.n_face_triangles { &identity.texture_rgb } else { &identity.exterior_texture };
            let (th, tw) = (tex.shape()[1], tex.shape()[2]);
            let (idx, wt) = bilinear_taps(r.uv[p], th, tw);
            for c in 0..3 {
                let plane = &tex.data()[c * th * tw..(c + 1) * th * tw];
                let v: f64 = (0..4).map(|k| wt[k] * plane[idx[k]] as f64).sum();
                image[c * h * w + p] = from_u8(to_u8(v as f32));
            }
        }
        Ok((image, Mask::new(h, w, r.coverage.clone())))
    }
}

/// Rounds to 9 decimal places, the precision stored in the manifest.
pub fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Pose and expression of every sample, drawn from a stream separate from
/// the identities so the two can be regenerated independently.
fn sample_conditions(config: &DatasetConfig, index: usize) -> (Vec<f64>, [f64; 3]) {
    let mut rng = identity_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15, index as u64);
    let normal = Normal::new(0.0, config.beta_std.max(0.0)).expect("finite std");
    let beta = (0..config.d_beta).map(|_| round9(normal.sample(&mut rng))).collect();
    let uniform = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..m) } else { 0.0 };
    let yaw = uniform(&mut rng, config.max_yaw_deg);
    let pitch = uniform(&mut rng, config.max_pitch_deg);
    (beta, [yaw, pitch, 0.0])
}

fn rounded_pose(yaw: f64, pitch: f64, roll: f64) -> Result<Pose> {
    let r = Pose::from_euler_deg(yaw, pitch, roll).rotation_row_major().map(round9);
    Pose::from_row_major(&r, [0.0; 3])
}

/// A fully materialised dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub scene: Scene,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Renders every sample in memory, bit-identical to what
    /// [`Dataset::load`] returns for the same config.
    pub fn synthesize(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let scene = Scene::new(config)?;
        let mut samples = Vec::with_capacity(config.n_identities * config.samples_per_identity);
        for id in 0..config.n_identities {
            let identity = make_identity(config.seed, id, config);
            for k in 0..config.samples_per_identity {
                let index = id * config.samples_per_identity + k;
                let (beta, [yaw, pitch, roll]) = sample_conditions(config, index);
                let pose = rounded_pose(yaw, pitch, roll)?;
                let (image, mask) = scene.render(&identity, &beta, &pose)?;
                samples.push(Sample {
                    index,
                    image,
                    mask,
                    alpha: identity.alpha.clone(),
                    beta,
                    pose,
                    camera: scene.camera,
                    identity_id: id,
                    split: if config.is_test_identity(id) { Split::Test } else { Split::Train },
                });
            }
        }
        Ok(Self { config: config.clone(), scene, samples })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn identities(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self.split(split).map(|s| s.identity_id).collect();
        ids.dedup();
        ids
    }

    /// Writes images, masks, the model and the manifest under `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        self.scene.model.save(&dir.join(MODEL_FILE))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image = format!("images/{:05}.png", s.index);
            let mask = format!("masks/{:05}.png", s.index);
            save_rgb_png(&s.image, &dir.join(&image))?;
            s.mask.save_png(&dir.join(&mask))?;
            records.push(SampleRecord {
                index: s.index,
                identity: s.identity_id,
                split: s.split,
                image,
                mask,
                alpha: s.alpha.clone(),
                beta: s.beta.clone(),
                rotation: s.pose.rotation_row_major(),
                translation: *s.pose.translation(),
            });
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            camera: self.scene.camera,
            model_file: MODEL_FILE.into(),
            samples: records,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported manifest schema {}", manifest.schema_version)));
        }
        let model = MorphableModel::load(&dir.join(&manifest.model_file))?;
        let scene = Scene { model, exterior: ExteriorMesh::standard(), camera: manifest.camera };
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            let mut image = load_rgb_png(&dir.join(&r.image))?;
            let mask = Mask::load_png(&dir.join(&r.mask))?;
            if image.shape() != [3, mask.height, mask.width] {
                return Err(Error::Format(format!("sample {} image and mask sizes differ", r.index)));
            }
            // 8-bit storage cannot hold an exact 0, so the background is restored from the mask.
            let hw = mask.height * mask.width;
            for (i, v) in image.data_mut().iter_mut().enumerate() {
                if !mask.data[i % hw] {
                    *v = 0.0;
                }
            }
            samples.push(Sample {
                index: r.index,
                image,
                mask,
                alpha: r.alpha.clone(),
                beta: r.beta.clone(),
                pose: Pose::from_row_major(&r.rotation, r.translation)?,
                camera: manifest.camera,
                identity_id: r.identity,
                split: r.split,
            });
        }
        Ok(Self { config: manifest.config, scene, samples })
    }
}

/// On-disk index of a generated dataset.
///
/// `samples[*].rotation` is the head rotation, row-major, rounded to nine
/// decimals; `image` and `mask` are paths relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub camera: Camera,
    pub model_file: String,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub identity: usize,
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Synthesises and writes a dataset.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    Dataset::synthesize(config)?.save(dir)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
