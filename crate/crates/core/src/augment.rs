//! In-plane affine augmentation of training targets, and its composition
//! with the camera projection so rasterized features stay aligned with the
//! transformed target.
//!
//! Transforms act on pixel-index coordinates, where the centre of column `j`
//! sits at `x = j`. Projected vertex coordinates use the rasterizer's
//! continuous convention (centre at `j + 0.5`) and are shifted accordingly.

use facetex_grad::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{chw, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation drawn from `U(-max, max)` degrees.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-axis translation drawn from `U(-t, t)` as a fraction of image size.
    pub max_translation: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            max_translation: 0.05,
            flip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every draw is the identity.
    pub fn disabled() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            max_translation: 0.0,
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_rotation_deg >= 0.0
            && self.max_rotation_deg <= 180.0
            && self.scale_min <= self.scale_max
            && self.scale_min >= 0.5f64.sqrt()
            && self.scale_max <= 2.0f64.sqrt()
            && (0.0..=0.5).contains(&self.max_translation)
            && (0.0..=1.0).contains(&self.flip_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("augmentation ranges out of bounds: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub scale: f64,
    /// Pixels, `(x, y)`.
    pub translation: [f64; 2],
    pub flip: bool,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { angle_deg: 0.0, scale: 1.0, translation: [0.0; 2], flip: false }
    }
}

/// `p ↦ L·p + t` on pixel-index coordinates, with `|det L| ∈ [0.5, 2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    matrix: [[f64; 3]; 2],
    /// Generating parameters, absent for transforms built from raw matrices.
    params: Option<AffineParams>,
    height: usize,
    width: usize,
}

impl AffineTransform {
    /// Rotation, scale and flip about the image centre, then translation.
    pub fn from_params(params: AffineParams, height: usize, width: usize) -> Result<Self> {
        let c = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
        let (s, co) = params.angle_deg.to_radians().sin_cos();
        let f = if params.flip { -1.0 } else { 1.0 };
        let l = [[params.scale * co * f, -params.scale * s], [params.scale * s * f, params.scale * co]];
        let t = [
            c[0] + params.translation[0] - (l[0][0] * c[0] + l[0][1] * c[1]),
            c[1] + params.translation[1] - (l[1][0] * c[0] + l[1][1] * c[1]),
        ];
        let mut a = Self::from_matrix([[l[0][0], l[0][1], t[0]], [l[1][0], l[1][1], t[1]]], height, width)?;
        a.params = Some(params);
        Ok(a)
    }

    pub fn from_matrix(matrix: [[f64; 3]; 2], height: usize, width: usize) -> Result<Self> {
        let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        if !(0.5..=2.0).contains(&det.abs()) || matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("affine determinant {det} outside [0.5, 2]")));
        }
        Ok(Self { matrix, params: None, height, width })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            params: Some(AffineParams::identity()),
            height,
            width,
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 2] {
        &self.matrix
    }

    pub fn params(&self) -> Option<&AffineParams> {
        self.params.as_ref()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    }

    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    /// Maps a pixel-index coordinate.
    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    pub fn inverse_point(&self, q: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        let det = self.determinant();
        let (dx, dy) = (q[0] - m[0][2], q[1] - m[1][2]);
        [(m[1][1] * dx - m[0][1] * dy) / det, (-m[1][0] * dx + m[0][0] * dy) / det]
    }

    /// `self` after `first`, i.e. `p ↦ self(first(p))`.
    pub fn after(&self, first: &AffineTransform) -> Result<Self> {
        let (a, b) = (&self.matrix, &first.matrix);
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + if j == 2 { a[i][2] } else { 0.0 };
            }
        }
        Self::from_matrix(m, self.height, self.width)
    }
}

/// Draws one transform from the configured ranges.
pub fn sample_affine(rng: &mut impl Rng, config: &AugmentConfig, height: usize, width: usize) -> Result<AffineTransform> {
    config.validate()?;
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let angle_deg = uniform(rng, -config.max_rotation_deg, config.max_rotation_deg);
    let scale = uniform(rng, config.scale_min, config.scale_max);
    let tx = uniform(rng, -config.max_translation, config.max_translation) * width as f64;
    let ty = uniform(rng, -config.max_translation, config.max_translation) * height as f64;
    let flip = config.flip_probability > 0.0 && rng.gen_bool(config.flip_probability);
    AffineTransform::from_params(AffineParams { angle_deg, scale, translation: [tx, ty], flip }, height, width)
}

fn check_size(a: &AffineTransform, h: usize, w: usize) -> Result<()> {
    if a.size() != (h, w) {
        return Err(Error::Dimension(format!("transform built for {:?}, image is {h}×{w}", a.size())));
    }
    Ok(())
}

/// Bilinear inverse warp of a `C×H×W` image; sources outside the frame read 0.
pub fn apply_to_image(a: &AffineTransform, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image)?;
    check_size(a, h, w)?;
    if a.is_identity() {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let src = image.data();
    let fetch = |ch: usize, y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let [sx, sy] = a.inverse_point([x as f64, y as f64]);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fx) * (1.0 - fy) * fetch(ch, y0, x0)
                    + fx * (1.0 - fy) * fetch(ch, y0, x0 + 1)
                    + (1.0 - fx) * fy * fetch(ch, y0 + 1, x0)
                    + fx * fy * fetch(ch, y0 + 1, x0 + 1);
                out[(ch * h + y) * w + x] = v;
            }
        }
    }
    Ok(out)
}

/// Standard deviation, in pixels, of the blur applied to a mask before it is
/// resampled.
pub const MASK_BLUR_SIGMA: f64 = 1.2;

/// Separable Gaussian blur of the 0/1 mask field; outside the frame reads 0.
fn blurred_field(mask: &Mask, sigma: f64) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let field: Vec<f64> = mask.data.iter().map(|&b| b as u8 as f64).collect();
    if sigma <= 0.0 {
        return field;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], stride: usize, len: usize, lanes: usize, lane_stride: usize| {
        let mut dst = vec![0.0; src.len()];
        for lane in 0..lanes {
            for i in 0..len as isize {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let j = i + k as isize - radius;
                    if j >= 0 && j < len as isize {
                        acc += wgt * src[lane * lane_stride + j as usize * stride];
                    }
                }
                dst[lane * lane_stride + i as usize * stride] = acc;
            }
        }
        dst
    };
    let rows = pass(&field, 1, w, h, w);
    pass(&rows, w, h, w, 1)
}

/// Inverse warp of a binary mask. The 0/1 field is blurred by
/// [`MASK_BLUR_SIGMA`], sampled bilinearly and thresholded at ½, which places
/// the warped outline between pixel centres instead of on a staircase.
pub fn apply_to_mask(a: &AffineTransform, mask: &Mask) -> Result<Mask> {
    let (h, w) = (mask.height, mask.width);
    check_size(a, h, w)?;
    if a.is_identity() {
        return Ok(mask.clone());
    }
    // Maps taking pixel centres onto pixel centres are plain lookups.
    let sigma = if a.matrix.iter().flatten().all(|v| v.fract() == 0.0) { 0.0 } else { MASK_BLUR_SIGMA };
    let field = blurred_field(mask, sigma);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            field[y as usize * w + x as usize]
        }
    };
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let [sx, sy] = a.inverse_point([x as f64, y as f64]);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fx) * (1.0 - fy) * at(y0, x0)
                + fx * (1.0 - fy) * at(y0, x0 + 1)
                + (1.0 - fx) * fy * at(y0 + 1, x0)
                + fx * fy * at(y0 + 1, x0 + 1);
            out.data[y * w + x] = v >= 0.5;
        }
    }
    Ok(out)
}

/// Maps projected vertex positions (continuous pixel coordinates) through `a`.
pub fn compose_with_projection(a: &AffineTransform, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    if a.is_identity() {
        return points.to_vec();
    }
    points
        .iter()
        .map(|&[u, v]| {
            let [x, y] = a.apply_point([u - 0.5, v - 0.5]);
            [x + 0.5, y + 0.5]
        })
        .collect()
}
