//! Linear morphable face model, rigid posing, and a procedural model factory.
//!
//! Model space is right-handed with y up; the face looks down +z and the mesh
//! radius is 1.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const MAGIC: &[u8; 8] = b"FTXMORPH";
const FORMAT_VERSION: u32 = 1;

/// Latitude half-extent of the face cap.
pub const CAP_LATITUDE_DEG: f64 = 60.0;
/// Longitude half-extent of the face cap.
pub const CAP_LONGITUDE_DEG: f64 = 75.0;
/// Largest displacement any unit basis coefficient may cause, relative to the radius.
pub const MAX_BASIS_DISPLACEMENT: f64 = 0.15;

/// PCA mesh model: `V = mean + S·α + E·β`.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    pub seed: u64,
    pub mean_vertices: Vec<Vec3>,
    /// `N×3×d_alpha`, row-major: entry `(v, k, j)` at `(v * 3 + k) * d_alpha + j`.
    pub shape_basis: Vec<f64>,
    /// `N×3×d_beta`, same layout as `shape_basis`.
    pub expr_basis: Vec<f64>,
    pub d_alpha: usize,
    pub d_beta: usize,
    pub triangles: Vec<[u32; 3]>,
    pub uv_coords: Vec<[f64; 2]>,
}

impl MorphableModel {
    pub fn n_vertices(&self) -> usize {
        self.mean_vertices.len()
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices();
        if self.shape_basis.len() != n * 3 * self.d_alpha || self.expr_basis.len() != n * 3 * self.d_beta {
            return Err(Error::Dimension("basis size does not match N×3×d".into()));
        }
        if self.uv_coords.len() != n {
            return Err(Error::Dimension(format!("{} uv coords for {n} vertices", self.uv_coords.len())));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::InvalidInput(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if self.uv_coords.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("uv coordinate outside [0,1]".into()));
        }
        for (name, basis, d) in [("shape", &self.shape_basis, self.d_alpha), ("expression", &self.expr_basis, self.d_beta)] {
            for j in 0..d {
                if (0..n * 3).all(|r| basis[r * d + j] == 0.0) {
                    return Err(Error::InvalidInput(format!("{name} basis column {j} is zero")));
                }
            }
        }
        for (i, t) in self.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|k| self.mean_vertices[k as usize]);
            if norm(cross(sub(b, a), sub(c, a))) <= 1e-12 {
                return Err(Error::InvalidInput(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    /// Linear synthesis of the unposed mesh.
    pub fn compute_mesh(&self, alpha: &[f64], beta: &[f64]) -> Result<Vec<Vec3>> {
        if alpha.len() != self.d_alpha {
            return Err(Error::Dimension(format!("alpha has {} entries, model expects {}", alpha.len(), self.d_alpha)));
        }
        if beta.len() != self.d_beta {
            return Err(Error::Dimension(format!("beta has {} entries, model expects {}", beta.len(), self.d_beta)));
        }
        let contract = |basis: &[f64], coeffs: &[f64], row: usize| -> f64 {
            let d = coeffs.len();
            basis[row * d..(row + 1) * d].iter().zip(coeffs).map(|(b, c)| b * c).sum()
        };
        Ok(self
            .mean_vertices
            .iter()
            .enumerate()
            .map(|(v, m)| {
                let mut out = *m;
                for (k, o) in out.iter_mut().enumerate() {
                    *o += contract(&self.shape_basis, alpha, v * 3 + k) + contract(&self.expr_basis, beta, v * 3 + k);
                }
                out
            })
            .collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for d in [self.n_vertices(), self.d_alpha, self.d_beta, self.triangles.len()] {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for v in self.mean_vertices.iter().flatten() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in self.shape_basis.iter().chain(&self.expr_basis) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in self.uv_coords.iter().flatten() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for i in self.triangles.iter().flatten() {
            w.write_u32::<LittleEndian>(*i)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("morphable model: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a morphable model file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        }
        let [n, d_alpha, d_beta, n_tri] = dims;
        if n > 1 << 24 || d_alpha > 4096 || d_beta > 4096 || n_tri > 1 << 26 {
            return Err(Error::Format("implausible model dimensions".into()));
        }
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            (0..count).map(|_| r.read_f64::<LittleEndian>().map_err(fmt)).collect()
        };
        let mean = read_f64s(n * 3)?;
        let shape_basis = read_f64s(n * 3 * d_alpha)?;
        let expr_basis = read_f64s(n * 3 * d_beta)?;
        let uv = read_f64s(n * 2)?;
        let tris: Vec<u32> = (0..n_tri * 3)
            .map(|_| r.read_u32::<LittleEndian>().map_err(fmt))
            .collect::<Result<_>>()?;
        let model = Self {
            seed,
            mean_vertices: mean.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            shape_basis,
            expr_basis,
            d_alpha,
            d_beta,
            triangles: tris.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            uv_coords: uv.chunks(2).map(|c| [c[0], c[1]]).collect(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Rigid head transform `v ↦ R·v + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    /// Validates that `rotation` is in SO(3) to 1e-6.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// `R = R_y(yaw) · R_x(pitch) · R_z(roll)`, angles in degrees.
    /// Positive yaw turns the face toward +x; positive pitch tilts it down.
    pub fn from_euler_deg(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sy, cy) = yaw.to_radians().sin_cos();
        let (sp, cp) = pitch.to_radians().sin_cos();
        let (sr, cr) = roll.to_radians().sin_cos();
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        Self {
            rotation: matmul(&matmul(&ry, &rx), &rz),
            translation: [0.0; 3],
        }
    }

    pub fn with_translation(mut self, translation: Vec3) -> Self {
        self.translation = translation;
        self
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]]
    }

    pub fn from_row_major(r: &[f64], translation: Vec3) -> Result<Self> {
        if r.len() != 9 {
            return Err(Error::InvalidPose(format!("rotation needs 9 entries, got {}", r.len())));
        }
        Self::new([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]], translation)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2] + t[0],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2] + t[1],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2] + t[2],
        ]
    }
}

fn check_rotation(r: &Mat3) -> Result<()> {
    if r.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidPose("non-finite rotation".into()));
    }
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            if (dot - expected).abs() > 1e-6 {
                return Err(Error::InvalidPose(format!("RᵀR[{i}][{j}] = {dot}, not orthonormal")));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidPose(format!("det(R) = {det}, expected 1")));
    }
    Ok(())
}

/// Applies a validated rigid transform to every vertex.
pub fn pose_mesh(vertices: &[Vec3], pose: &Pose) -> Result<Vec<Vec3>> {
    check_rotation(&pose.rotation)?;
    Ok(vertices.iter().map(|&v| pose.apply(v)).collect())
}

/// Deterministic sphere-cap face model.
///
/// `n_vertices` is rounded down to a square grid (`side²` vertices with
/// `side = ⌊√N⌋`). Each basis column is a smooth random displacement field
/// normalised so its largest vertex displacement is 15% of the radius.
pub fn make_synthetic_model(seed: u64, n_vertices: usize, d_alpha: usize, d_beta: usize) -> Result<MorphableModel> {
    if n_vertices < 64 {
        return Err(Error::InvalidInput(format!("need at least 64 vertices, got {n_vertices}")));
    }
    if d_alpha == 0 || d_beta == 0 {
        return Err(Error::InvalidInput("basis dimensions must be ≥ 1".into()));
    }
    let side = (n_vertices as f64).sqrt().floor() as usize;
    let grid = SphereGrid::new(side, side, CAP_LATITUDE_DEG, CAP_LONGITUDE_DEG, 1.0, [0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<(f64, f64)> = grid.params.clone();
    let shape_fields: Vec<Vec<Vec3>> = (0..d_alpha).map(|_| smooth_field(&params, &mut rng, |_| 1.0)).collect();
    // Expression modes concentrate on the lower half of the face.
    let expr_fields: Vec<Vec<Vec3>> = (0..d_beta)
        .map(|_| smooth_field(&params, &mut rng, |(lat, _)| 0.25 + 0.75 / (1.0 + (4.0 * lat).exp())))
        .collect();
    let n = grid.vertices.len();
    let pack = |fields: &[Vec<Vec3>]| {
        let d = fields.len();
        let mut out = vec![0.0; n * 3 * d];
        for (j, f) in fields.iter().enumerate() {
            for v in 0..n {
                for k in 0..3 {
                    out[(v * 3 + k) * d + j] = f[v][k];
                }
            }
        }
        out
    };
    let model = MorphableModel {
        seed,
        mean_vertices: grid.vertices,
        shape_basis: pack(&shape_fields),
        expr_basis: pack(&expr_fields),
        d_alpha,
        d_beta,
        triangles: grid.triangles,
        uv_coords: grid.uvs,
    };
    model.validate()?;
    Ok(model)
}

/// Latitude/longitude grid on a sphere section, with UVs spanning `[0,1]²`.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    pub vertices: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub triangles: Vec<[u32; 3]>,
    /// Normalised `(latitude, longitude)` in `[-1, 1]` per vertex.
    pub params: Vec<(f64, f64)>,
}

impl SphereGrid {
    /// Rows run top (latitude `+lat_deg`) to bottom; columns left to right
    /// as seen from +z. `u` follows columns and `v` follows rows.
    pub fn new(rows: usize, cols: usize, lat_deg: f64, lon_deg: f64, radius: f64, center: Vec3) -> Self {
        assert!(rows >= 2 && cols >= 2);
        let mut vertices = Vec::with_capacity(rows * cols);
        let mut uvs = Vec::with_capacity(rows * cols);
        let mut params = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let v = i as f64 / (rows - 1) as f64;
            let lat_n = 1.0 - 2.0 * v;
            let lat = (lat_n * lat_deg).to_radians();
            for j in 0..cols {
                let u = j as f64 / (cols - 1) as f64;
                let lon_n = 2.0 * u - 1.0;
                let lon = (lon_n * lon_deg).to_radians();
                vertices.push([
                    center[0] + radius * lat.cos() * lon.sin(),
                    center[1] + radius * lat.sin(),
                    center[2] + radius * lat.cos() * lon.cos(),
                ]);
                uvs.push([u, v]);
                params.push((lat_n, lon_n));
            }
        }
        let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
        for i in 0..rows - 1 {
            for j in 0..cols - 1 {
                let v00 = (i * cols + j) as u32;
                let v01 = v00 + 1;
                let v10 = v00 + cols as u32;
                let v11 = v10 + 1;
                triangles.push([v00, v10, v01]);
                triangles.push([v01, v10, v11]);
            }
        }
        Self { vertices, uvs, triangles, params }
    }
}

fn smooth_field(
    params: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
    envelope: impl Fn((f64, f64)) -> f64,
) -> Vec<Vec3> {
    loop {
        // Three low-frequency cosine terms per axis.
        let terms: Vec<[(f64, f64, f64, f64); 3]> = (0..3)
            .map(|_| {
                [(); 3].map(|_| {
                    (
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0..3) as f64,
                        rng.gen_range(0..3) as f64,
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
            })
            .collect();
        let field: Vec<Vec3> = params
            .iter()
            .map(|&(lat, lon)| {
                let e = envelope((lat, lon));
                let mut d = [0.0; 3];
                for (k, axis) in terms.iter().enumerate() {
                    d[k] = e * axis
                        .iter()
                        .map(|&(c, p, q, ph)| c * (std::f64::consts::FRAC_PI_2 * (p * lat + q * lon) + ph).cos())
                        .sum::<f64>();
                }
                d
            })
            .collect();
        let max = field.iter().map(|d| norm(*d)).fold(0.0, f64::max);
        if max > 1e-6 {
            let s = MAX_BASIS_DISPLACEMENT / max;
            return field.into_iter().map(|d| d.map(|x| x * s)).collect();
        }
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}
