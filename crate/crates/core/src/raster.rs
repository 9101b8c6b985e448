//! Pinhole projection, z-buffered UV rasterization and bilinear texture
//! sampling with a texture-space adjoint.
//!
//! Pixel `(i, j)` (row, column) is sampled at the continuous image point
//! `(j + 0.5, i + 0.5)`. Texture lookups use the align-corners convention:
//! `uv = (0, 0)` hits texel centre `(0, 0)` and `uv = (1, 1)` hits
//! `(Ht − 1, Wt − 1)`.

use std::path::Path;
use std::sync::Arc;

use facetex_grad::{CustomOp, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_mesh, MorphableModel, Pose, Vec3};

/// Pinhole intrinsics plus the camera's distance from the model origin.
///
/// World-to-camera is a fixed half turn about x followed by a shift along the
/// optical axis: `(x, y, z) ↦ (x, −y, distance − z)`. The camera therefore
/// sits on +z looking at the origin, with image rows growing downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub height: usize,
    pub width: usize,
    pub distance: f64,
}

impl Camera {
    pub fn new(focal: f64, principal_point: [f64; 2], height: usize, width: usize, distance: f64) -> Result<Self> {
        let cam = Self { focal, principal_point, height, width, distance };
        cam.validate()?;
        Ok(cam)
    }

    /// Fixed intrinsics used throughout the synthetic data at a given resolution.
    pub fn for_resolution(size: usize) -> Self {
        Self {
            focal: 0.9 * size as f64,
            principal_point: [size as f64 / 2.0, size as f64 / 2.0],
            height: size,
            width: size,
            distance: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidInput(format!("focal length {} must be positive", self.focal)));
        }
        let [cx, cy] = self.principal_point;
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return Err(Error::InvalidInput("principal point outside the image".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidInput("empty image size".into()));
        }
        if !(self.distance > 0.0 && self.distance.is_finite()) {
            return Err(Error::InvalidInput("camera distance must be positive".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, v: Vec3) -> Vec3 {
        [v[0], -v[1], self.distance - v[2]]
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Pixel coordinates and camera depth per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub points: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
}

/// `u = f·x/z + cx`, `v = f·y/z + cy` for camera-frame vertices.
pub fn project(vertices: &[Vec3], camera: &Camera) -> Result<Projected> {
    let mut points = Vec::with_capacity(vertices.len());
    let mut depth = Vec::with_capacity(vertices.len());
    for (index, v) in vertices.iter().enumerate() {
        if !(v[2] > 0.0) {
            return Err(Error::BehindCamera { index, depth: v[2] });
        }
        points.push([
            camera.focal * v[0] / v[2] + camera.principal_point[0],
            camera.focal * v[1] / v[2] + camera.principal_point[1],
        ]);
        depth.push(v[2]);
    }
    Ok(Projected { points, depth })
}

/// Synthesises, poses and projects the model mesh.
pub fn project_model(model: &MorphableModel, alpha: &[f64], beta: &[f64], pose: &Pose, camera: &Camera) -> Result<Projected> {
    let mesh = pose_mesh(&model.compute_mesh(alpha, beta)?, pose)?;
    let cam: Vec<Vec3> = mesh.iter().map(|&v| camera.world_to_camera(v)).collect();
    project(&cam, camera)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterOutput {
    pub height: usize,
    pub width: usize,
    pub uv: Vec<[f64; 2]>,
    pub coverage: Vec<bool>,
    pub depth: Vec<f64>,
    pub tri_index: Vec<i32>,
}

impl RasterOutput {
    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    /// Writes `uv.png` (u in red, v in green) and `coverage.png` into `dir`.
    pub fn save_debug(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (w, h) = (self.width as u32, self.height as u32);
        let uv = image::RgbImage::from_fn(w, h, |x, y| {
            let i = y as usize * self.width + x as usize;
            if self.coverage[i] {
                let [u, v] = self.uv[i];
                image::Rgb([(u * 255.0).round() as u8, (v * 255.0).round() as u8, 0])
            } else {
                image::Rgb([0, 0, 0])
            }
        });
        uv.save(dir.join("uv.png"))?;
        let cov = image::GrayImage::from_fn(w, h, |x, y| {
            image::Luma([if self.coverage[y as usize * self.width + x as usize] { 255 } else { 0 }])
        });
        cov.save(dir.join("coverage.png"))?;
        Ok(())
    }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Z-buffered rasterization with perspective-correct UV interpolation.
///
/// Triangles are visited in index order and a pixel is only overwritten by a
/// strictly nearer fragment, so equal depths keep the lower triangle index.
/// Both windings are accepted; zero-area triangles are skipped.
pub fn rasterize(
    points: &[[f64; 2]],
    depth: &[f64],
    triangles: &[[u32; 3]],
    uv_coords: &[[f64; 2]],
    image_size: (usize, usize),
) -> RasterOutput {
    let (h, w) = image_size;
    let mut out = RasterOutput {
        height: h,
        width: w,
        uv: vec![[0.0; 2]; h * w],
        coverage: vec![false; h * w],
        depth: vec![f64::INFINITY; h * w],
        tri_index: vec![-1; h * w],
    };
    if h == 0 || w == 0 {
        return out;
    }
    for (ti, tri) in triangles.iter().enumerate() {
        let [i0, i1, i2] = tri.map(|i| i as usize);
        let (p0, p1, p2) = (points[i0], points[i1], points[i2]);
        let area = edge(p0, p1, p2);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let xmin = p0[0].min(p1[0]).min(p2[0]);
        let xmax = p0[0].max(p1[0]).max(p2[0]);
        let ymin = p0[1].min(p1[1]).min(p2[1]);
        let ymax = p0[1].max(p1[1]).max(p2[1]);
        // Pixel j is sampled at j + 0.5.
        if xmax < 0.5 || ymax < 0.5 || xmin > w as f64 - 0.5 || ymin > h as f64 - 0.5 {
            continue;
        }
        let j0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let i0p = (ymin - 0.5).ceil().max(0.0) as usize;
        let j1 = ((xmax - 0.5).floor() as usize).min(w - 1);
        let i1p = ((ymax - 0.5).floor() as usize).min(h - 1);
        let (z0, z1, z2) = (depth[i0], depth[i1], depth[i2]);
        for i in i0p..=i1p {
            for j in j0..=j1 {
                let p = [j as f64 + 0.5, i as f64 + 0.5];
                let b0 = edge(p1, p2, p) / area;
                let b1 = edge(p2, p0, p) / area;
                let b2 = edge(p0, p1, p) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let inv_z = b0 / z0 + b1 / z1 + b2 / z2;
                let z = 1.0 / inv_z;
                let idx = i * w + j;
                if z < out.depth[idx] {
                    let (w0, w1, w2) = (b0 / z0 * z, b1 / z1 * z, b2 / z2 * z);
                    let (uv0, uv1, uv2) = (uv_coords[i0], uv_coords[i1], uv_coords[i2]);
                    out.uv[idx] = [
                        (w0 * uv0[0] + w1 * uv1[0] + w2 * uv2[0]).clamp(0.0, 1.0),
                        (w0 * uv0[1] + w1 * uv1[1] + w2 * uv2[1]).clamp(0.0, 1.0),
                    ];
                    out.depth[idx] = z;
                    out.tri_index[idx] = ti as i32;
                    out.coverage[idx] = true;
                }
            }
        }
    }
    for (d, &c) in out.depth.iter_mut().zip(&out.coverage) {
        if !c {
            *d = 0.0;
        }
    }
    out
}

/// Texel indices (row-major within a `Ht×Wt` plane) and bilinear weights.
pub fn bilinear_taps(uv: [f64; 2], tex_h: usize, tex_w: usize) -> ([usize; 4], [f64; 4]) {
    let x = uv[0].clamp(0.0, 1.0) * (tex_w - 1) as f64;
    let y = uv[1].clamp(0.0, 1.0) * (tex_h - 1) as f64;
    let x0 = (x.floor() as usize).min(tex_w - 2);
    let y0 = (y.floor() as usize).min(tex_h - 2);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let base = y0 * tex_w + x0;
    (
        [base, base + 1, base + tex_w, base + tex_w + 1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

/// Precomputed bilinear taps for every covered pixel of one raster.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub height: usize,
    pub width: usize,
    pub tex_h: usize,
    pub tex_w: usize,
    entries: Vec<(usize, [usize; 4], [f64; 4])>,
}

impl SamplePlan {
    pub fn new(raster: &RasterOutput, tex_h: usize, tex_w: usize) -> Result<Self> {
        if tex_h < 2 || tex_w < 2 {
            return Err(Error::InvalidInput(format!("texture must be at least 2×2, got {tex_h}×{tex_w}")));
        }
        let entries = raster
            .coverage
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(p, _)| {
                let (idx, w) = bilinear_taps(raster.uv[p], tex_h, tex_w);
                (p, idx, w)
            })
            .collect();
        Ok(Self { height: raster.height, width: raster.width, tex_h, tex_w, entries })
    }

    pub fn covered(&self) -> usize {
        self.entries.len()
    }

    /// `texture: C×Ht×Wt` → `C×H×W`, zero where uncovered.
    pub fn apply<T: Scalar>(&self, texture: &[T], channels: usize, out: &mut [T]) {
        let (tp, ip) = (self.tex_h * self.tex_w, self.height * self.width);
        debug_assert_eq!(texture.len(), channels * tp);
        debug_assert_eq!(out.len(), channels * ip);
        out.fill(T::zero());
        for &(p, idx, w) in &self.entries {
            let w = w.map(T::cst);
            for c in 0..channels {
                let t = &texture[c * tp..(c + 1) * tp];
                out[c * ip + p] = w[0] * t[idx[0]] + w[1] * t[idx[1]] + w[2] * t[idx[2]] + w[3] * t[idx[3]];
            }
        }
    }

    /// Adjoint of [`SamplePlan::apply`], accumulating into `grad_texture`.
    pub fn apply_adjoint<T: Scalar>(&self, grad_out: &[T], channels: usize, grad_texture: &mut [T]) {
        let (tp, ip) = (self.tex_h * self.tex_w, self.height * self.width);
        for &(p, idx, w) in &self.entries {
            let w = w.map(T::cst);
            for c in 0..channels {
                let g = grad_out[c * ip + p];
                let t = &mut grad_texture[c * tp..(c + 1) * tp];
                for k in 0..4 {
                    t[idx[k]] = t[idx[k]] + w[k] * g;
                }
            }
        }
    }
}

/// Samples a `C×Ht×Wt` texture through a raster into a `C×H×W` feature image.
pub fn sample_texture<T: Scalar>(texture: &Tensor<T>, raster: &RasterOutput) -> Result<Tensor<T>> {
    if texture.shape().len() != 3 {
        return Err(Error::Dimension(format!("texture must be C×Ht×Wt, got {:?}", texture.shape())));
    }
    let (c, th, tw) = (texture.shape()[0], texture.shape()[1], texture.shape()[2]);
    let plan = SamplePlan::new(raster, th, tw)?;
    let mut out = Tensor::zeros(&[c, raster.height, raster.width]);
    plan.apply(texture.data(), c, out.data_mut());
    Ok(out)
}

struct SampleOp {
    plans: Vec<Arc<SamplePlan>>,
}

impl<T: Scalar> CustomOp<T> for SampleOp {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (n, c, th, tw) = inputs[0].dims4();
        let mut gt = Tensor::zeros(&[n, c, th, tw]);
        let item_t = c * th * tw;
        for (b, plan) in self.plans.iter().enumerate() {
            plan.apply_adjoint(grad.item(b), c, &mut gt.data_mut()[b * item_t..(b + 1) * item_t]);
        }
        vec![Some(gt)]
    }
}

/// Differentiable batched sampling: `textures: [N, C, Ht, Wt]` with one plan
/// per batch item → `[N, C, H, W]`.
pub fn sample_texture_batch<T: Scalar>(g: &Graph<T>, textures: Var, plans: &[Arc<SamplePlan>]) -> Result<Var> {
    let tv = g.value(textures);
    let (n, c, th, tw) = tv.dims4();
    if plans.len() != n {
        return Err(Error::Dimension(format!("{} sample plans for a batch of {n}", plans.len())));
    }
    let (h, w) = (plans[0].height, plans[0].width);
    for p in plans {
        if (p.tex_h, p.tex_w) != (th, tw) || (p.height, p.width) != (h, w) {
            return Err(Error::Dimension("sample plan does not match texture or image size".into()));
        }
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let item = c * h * w;
    for (b, plan) in plans.iter().enumerate() {
        plan.apply(tv.item(b), c, &mut out.data_mut()[b * item..(b + 1) * item]);
    }
    Ok(g.custom(&[textures], out, Arc::new(SampleOp { plans: plans.to_vec() })))
}
