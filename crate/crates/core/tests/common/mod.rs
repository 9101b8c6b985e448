#![allow(dead_code)]

use facetex_core::pipeline::ExperimentConfig;
use facetex_core::raster::RasterOutput;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct RandomScene {
    pub points: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub uvs: Vec<[f64; 2]>,
    pub size: (usize, usize),
}

/// Up to 20 independent triangles with random depths on an image of at most 16×16.
pub fn random_scene(rng: &mut ChaCha8Rng) -> RandomScene {
    let size = (rng.gen_range(4..=16), rng.gen_range(4..=16));
    let n_tri = rng.gen_range(1..=20);
    let mut s = RandomScene { points: vec![], depth: vec![], triangles: vec![], uvs: vec![], size };
    for t in 0..n_tri {
        for _ in 0..3 {
            s.points.push([rng.gen_range(-2.0..size.1 as f64 + 2.0), rng.gen_range(-2.0..size.0 as f64 + 2.0)]);
            s.depth.push(rng.gen_range(1.0..5.0));
            s.uvs.push([rng.gen(), rng.gen()]);
        }
        let b = 3 * t as u32;
        s.triangles.push([b, b + 1, b + 2]);
    }
    s
}

pub struct OracleRaster {
    pub coverage: Vec<bool>,
    pub tri_index: Vec<i32>,
    pub uv: Vec<[f64; 2]>,
}

fn det2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Every pixel centre against every triangle. Barycentric coordinates come
/// from Cramer's rule on `p − p0 = b1 (p1 − p0) + b2 (p2 − p0)`; the nearest
/// perspective-correct depth wins, the lower index on ties.
pub fn oracle_rasterize(points: &[[f64; 2]], depth: &[f64], triangles: &[[u32; 3]], uvs: &[[f64; 2]], (h, w): (usize, usize)) -> OracleRaster {
    let mut out = OracleRaster { coverage: vec![false; h * w], tri_index: vec![-1; h * w], uv: vec![[0.0; 2]; h * w] };
    for i in 0..h {
        for j in 0..w {
            let p = [j as f64 + 0.5, i as f64 + 0.5];
            let mut best: Option<(f64, usize, [f64; 2])> = None;
            for (t, tri) in triangles.iter().enumerate() {
                let [a, b, c] = tri.map(|k| k as usize);
                let e1 = [points[b][0] - points[a][0], points[b][1] - points[a][1]];
                let e2 = [points[c][0] - points[a][0], points[c][1] - points[a][1]];
                let r = [p[0] - points[a][0], p[1] - points[a][1]];
                let d = det2(e1, e2);
                if d == 0.0 {
                    continue;
                }
                let b1 = det2(r, e2) / d;
                let b2 = det2(e1, r) / d;
                let b0 = 1.0 - b1 - b2;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let inv = b0 / depth[a] + b1 / depth[b] + b2 / depth[c];
                let z = 1.0 / inv;
                if best.map_or(true, |(bz, _, _)| z < bz) {
                    let wts = [b0 / depth[a] * z, b1 / depth[b] * z, b2 / depth[c] * z];
                    let uv = [0, 1].map(|k| (wts[0] * uvs[a][k] + wts[1] * uvs[b][k] + wts[2] * uvs[c][k]).clamp(0.0, 1.0));
                    best = Some((z, t, uv));
                }
            }
            if let Some((_, t, uv)) = best {
                let idx = i * w + j;
                out.coverage[idx] = true;
                out.tri_index[idx] = t as i32;
                out.uv[idx] = uv;
            }
        }
    }
    out
}

/// Pixels whose centre lies within `margin` of some triangle edge line, where
/// two correct implementations may legitimately disagree on inclusion.
pub fn near_edge(points: &[[f64; 2]], triangles: &[[u32; 3]], (h, w): (usize, usize), margin: f64) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for tri in triangles {
        for k in 0..3 {
            let a = points[tri[k] as usize];
            let b = points[tri[(k + 1) % 3] as usize];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if len == 0.0 {
                continue;
            }
            for i in 0..h {
                for j in 0..w {
                    let p = [j as f64 + 0.5, i as f64 + 0.5];
                    let dist = det2([b[0] - a[0], b[1] - a[1]], [p[0] - a[0], p[1] - a[1]]).abs() / len;
                    if dist < margin {
                        out[i * w + j] = true;
                    }
                }
            }
        }
    }
    out
}

pub struct OracleComparison {
    pub coverage_mismatch: usize,
    pub tri_mismatch: usize,
    pub max_uv_error: f64,
}

pub fn compare_with_oracle(r: &RasterOutput, o: &OracleRaster) -> OracleComparison {
    let mut c = OracleComparison { coverage_mismatch: 0, tri_mismatch: 0, max_uv_error: 0.0 };
    for k in 0..o.coverage.len() {
        c.coverage_mismatch += (r.coverage[k] != o.coverage[k]) as usize;
        c.tri_mismatch += (r.tri_index[k] != o.tri_index[k]) as usize;
        if r.coverage[k] && o.coverage[k] {
            for d in 0..2 {
                c.max_uv_error = c.max_uv_error.max((r.uv[k][d] - o.uv[k][d]).abs());
            }
        }
    }
    c
}

/// 4 identities × 40 samples at 64×64, all used for training, batch 16.
pub fn micro_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.n_identities = 4;
    cfg.dataset.samples_per_identity = 40;
    cfg.dataset.test_fraction = 0.0;
    cfg.training.batch_size = 16;
    cfg
}

/// Same as [`micro_config`] with every size shrunk so a step takes milliseconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = micro_config();
    cfg.dataset.n_identities = 3;
    cfg.dataset.samples_per_identity = 4;
    cfg.dataset.image_size = 32;
    cfg.dataset.texture_size = 32;
    cfg.dataset.exterior_texture_size = 32;
    cfg.dataset.n_vertices = 256;
    cfg.network.image_size = 32;
    cfg.network.texture_size = 16;
    cfg.network.texture_width = 16;
    cfg.network.additive_width = 16;
    cfg.network.unet_width = 8;
    cfg.network.disc_width = 8;
    cfg.network.encoder_width = 8;
    cfg.training.batch_size = 2;
    cfg
}

pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
}

/// Central differences (ε = 1e-4) of `Σ w·F²`, `F = sample_texture(T)`, on
/// `n` random texels that receive gradient. Pixels whose UV lands within
/// 1e-3 texel of the lattice are dropped from the raster first.
pub fn texture_gradient_check(seed: u64, n: usize) -> GradCheck {
    use facetex_core::geometry::{make_synthetic_model, Pose};
    use facetex_core::raster::{project_model, rasterize, sample_texture_batch, Camera, SamplePlan};
    use facetex_grad::{Graph, Tensor};
    use std::sync::Arc;

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let (ts, channels) = (16, 3);
    let model = make_synthetic_model(seed, 1024, 8, 8).unwrap();
    let cam = Camera::for_resolution(64);
    let pose = Pose::from_euler_deg(rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0), 0.0);
    let proj = project_model(&model, &[0.0; 8], &[0.0; 8], &pose, &cam).unwrap();
    let mut raster = rasterize(&proj.points, &proj.depth, &model.triangles, &model.uv_coords, (64, 64));
    let near_lattice = |x: f64| {
        let t = x * (ts - 1) as f64;
        (t - t.round()).abs() < 1e-3
    };
    for p in 0..raster.coverage.len() {
        if raster.coverage[p] && (near_lattice(raster.uv[p][0]) || near_lattice(raster.uv[p][1])) {
            raster.coverage[p] = false;
        }
    }
    let plan = Arc::new(SamplePlan::new(&raster, ts, ts).unwrap());
    let texture = Tensor::<f64>::from_fn(&[1, channels, ts, ts], |_| rng.gen_range(-1.0..1.0));
    let weights = Tensor::<f64>::from_fn(&[1, channels, 64, 64], |_| rng.gen_range(-1.0..1.0));
    let loss = |t: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
        let g = Graph::new();
        let tv = g.input(t.clone());
        let f = sample_texture_batch(&g, tv, &[plan.clone()]).unwrap();
        let l = g.sum(g.mul(g.square(f), g.constant(weights.clone())));
        let value = g.value(l)[0];
        let grads = g.backward(l);
        (value, grads.wrt(tv).cloned())
    };
    let (_, grad) = loss(&texture);
    let grad = grad.expect("texture gradient");
    let candidates: Vec<usize> = (0..grad.data().len()).filter(|&k| grad[k] != 0.0).collect();
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), n.min(candidates.len()));
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for i in picks.iter() {
        let k = candidates[i];
        let mut plus = texture.clone();
        plus[k] += eps;
        let mut minus = texture.clone();
        minus[k] -= eps;
        let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * eps);
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-12));
    }
    GradCheck { checked: picks.len(), max_relative_error: worst }
}

/// IoU between rasterizing after composing `A` into the projection and
/// transforming the rasterized coverage with `A`, for `n` sampled transforms
/// on random face geometry rendered at `size`×`size`.
pub fn alignment_ious(seed: u64, n: usize, size: usize) -> Vec<f64> {
    use facetex_core::augment::{apply_to_mask, compose_with_projection, sample_affine, AugmentConfig};
    use facetex_core::geometry::{make_synthetic_model, Pose};
    use facetex_core::imaging::Mask;
    use facetex_core::raster::{project_model, rasterize, Camera};

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let model = make_synthetic_model(seed, 1024, 8, 8).unwrap();
    let cam = Camera::for_resolution(size);
    let cfg = AugmentConfig::default();
    (0..n)
        .map(|_| {
            let alpha: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let beta: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pose = Pose::from_euler_deg(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 0.0);
            let a = sample_affine(&mut rng, &cfg, size, size).unwrap();
            let proj = project_model(&model, &alpha, &beta, &pose, &cam).unwrap();
            let direct = rasterize(&compose_with_projection(&a, &proj.points), &proj.depth, &model.triangles, &model.uv_coords, (size, size));
            let plain = rasterize(&proj.points, &proj.depth, &model.triangles, &model.uv_coords, (size, size));
            let warped = apply_to_mask(&a, &Mask::from_coverage(&plain)).unwrap();
            Mask::from_coverage(&direct).iou(&warped)
        })
        .collect()
}

pub struct ArchitectureReport {
    /// Texture of a fixed `z` rendered under two poses is bit-identical.
    pub texture_pose_independent: bool,
    /// Changing `z_additive` leaves the texture bit-identical.
    pub texture_ignores_additive: bool,
    /// The additive decoder's output has no gradient path to `z_face` and
    /// the texture none to `z_additive`.
    pub gradient_paths_split: bool,
    /// Names of parameters whose gradient is zero everywhere for one batch.
    pub dead_parameters: Vec<String>,
}

pub fn architecture_report(cfg: &ExperimentConfig) -> ArchitectureReport {
    use facetex_core::geometry::Pose;
    use facetex_core::networks::{LatentCode, LATENT_DIM, LATENT_SPLIT};
    use facetex_core::pipeline::{sample_prior, TrainState};
    use facetex_grad::{Graph, Tensor};

    let dataset = cfg.dataset().unwrap();
    let mut state = TrainState::for_dataset(cfg, &dataset).unwrap();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let z = sample_prior(&mut rng).unwrap();
    let (da, db) = (state.model.d_alpha, state.model.d_beta);
    let a = state.generate(&z, &vec![0.1; da], &vec![0.0; db], &Pose::from_euler_deg(-20.0, 5.0, 0.0)).unwrap();
    let b = state.generate(&z, &vec![0.1; da], &vec![0.3; db], &Pose::from_euler_deg(25.0, -10.0, 0.0)).unwrap();
    let texture_pose_independent = a.texture.data() == b.texture.data() && a.image.data() != b.image.data();

    let other = sample_prior(&mut rng).unwrap();
    let swapped = LatentCode::from_parts(z.face(), other.additive()).unwrap();
    let c = state.generate(&swapped, &vec![0.1; da], &vec![0.0; db], &Pose::from_euler_deg(-20.0, 5.0, 0.0)).unwrap();
    let texture_ignores_additive = c.texture.data() == a.texture.data() && c.image.data() != a.image.data();

    let gradient_paths_split = {
        let g = Graph::<f32>::new();
        let zv = g.input(Tensor::new(&[1, LATENT_DIM], z.as_slice().to_vec()));
        let tex = state.generator.decode_texture(&g, g.narrow(zv, 0, LATENT_SPLIT));
        let tex_grad = g.backward(g.sum(g.square(tex))).wrt(zv).cloned().unwrap();
        let g2 = Graph::<f32>::new();
        let zv2 = g2.input(Tensor::new(&[1, LATENT_DIM], z.as_slice().to_vec()));
        let n = cfg.network.image_size;
        let f_face = g2.constant(Tensor::full(&[1, cfg.network.texture_channels, n, n], 0.3));
        let add = state.generator.decode_additive(&g2, g2.narrow(zv2, LATENT_SPLIT, LATENT_DIM - LATENT_SPLIT), f_face).unwrap();
        let add_grad = g2.backward(g2.sum(g2.square(add))).wrt(zv2).cloned().unwrap();
        let (tf, ta) = tex_grad.data().split_at(LATENT_SPLIT);
        let (af, aa) = add_grad.data().split_at(LATENT_SPLIT);
        ta.iter().all(|&v| v == 0.0) && tf.iter().any(|&v| v != 0.0) && af.iter().all(|&v| v == 0.0) && aa.iter().any(|&v| v != 0.0)
    };

    let batch = state.next_batch(&dataset).unwrap();
    let (gg, dg) = state.gradients(&batch).unwrap();
    let mut dead = Vec::new();
    for (grads, store) in [(&gg, &state.generator.store), (&dg, &state.discriminator.store)] {
        for (id, name, _) in store.iter() {
            if grads.of(store, id).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)) {
                dead.push(name.to_string());
            }
        }
    }
    ArchitectureReport { texture_pose_independent, texture_ignores_additive, gradient_paths_split, dead_parameters: dead }
}
