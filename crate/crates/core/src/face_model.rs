//! Linear morphable face model.
//!
//! Geometry is `mean + B_id α + B_ex β`, diffuse albedo is
//! `(mean + B_d γ) ⊙ gain + bias` per channel, specular albedo is
//! `mean + B_s δ`. Gain and bias act on the whole albedo, mean included, so
//! they can shift the overall skin tone.

use std::ops::Range;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Chunk};
use crate::error::{invalid, mismatch, Error, Result};
use crate::mesh::{icosphere, Face, UvRaster};
use crate::shading::{ShCoefficients, Vec3, VirtualLightStage, SH_LEN, STAGE_LIGHTS};
use crate::texture::{TextureMap, UvMask};

pub const ID_COMPONENTS: usize = 200;
pub const EX_COMPONENTS: usize = 100;
pub const DIFFUSE_COMPONENTS: usize = 100;
pub const SPECULAR_COMPONENTS: usize = 100;

const MODEL_MAGIC: &[u8; 4] = b"FLM1";

/// Dense column-major basis matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Basis {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch(format!(
                "basis {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite basis value"));
        }
        Ok(Basis { rows, cols, data })
    }

    pub fn from_columns(rows: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        let cols = columns.len();
        if columns.iter().any(|c| c.len() != rows) {
            return Err(mismatch("basis column length"));
        }
        Basis::new(rows, cols, columns.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.data[k * self.rows..(k + 1) * self.rows]
    }

    /// `out += B · coeffs`.
    pub fn apply_add(&self, coeffs: &[f64], out: &mut [f64]) -> Result<()> {
        if coeffs.len() != self.cols || out.len() != self.rows {
            return Err(mismatch(format!(
                "basis {}x{} applied to {} coefficients into {} rows",
                self.rows,
                self.cols,
                coeffs.len(),
                out.len()
            )));
        }
        for (k, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.column(k)) {
                *o += c * b;
            }
        }
        Ok(())
    }

    /// `Bᵀ · v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(mismatch("basis transpose input length"));
        }
        Ok((0..self.cols)
            .into_par_iter()
            .map(|k| self.column(k).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFaceModel {
    pub mean_geometry: Vec<Vec3>,
    pub mean_diffuse: TextureMap,
    pub mean_specular: TextureMap,
    pub basis_id: Basis,
    pub basis_ex: Basis,
    pub basis_diffuse: Basis,
    pub basis_specular: Basis,
    pub topology: Vec<Face>,
    pub uv_coords: Vec<[f64; 2]>,
    pub landmark_indices: Vec<usize>,
}

impl LinearFaceModel {
    pub fn vertex_count(&self) -> usize {
        self.mean_geometry.len()
    }

    pub fn width(&self) -> usize {
        self.mean_diffuse.width()
    }

    pub fn height(&self) -> usize {
        self.mean_diffuse.height()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let tex = self.width() * self.height() * 3;
        if self.mean_diffuse.channels() != 3 || !self.mean_specular.same_shape(&self.mean_diffuse) {
            return Err(mismatch("mean albedos must be matching 3-channel textures"));
        }
        let expect = [
            ("identity", &self.basis_id, 3 * v, ID_COMPONENTS),
            ("expression", &self.basis_ex, 3 * v, EX_COMPONENTS),
            ("diffuse", &self.basis_diffuse, tex, DIFFUSE_COMPONENTS),
            ("specular", &self.basis_specular, tex, SPECULAR_COMPONENTS),
        ];
        for (name, b, rows, cols) in expect {
            if b.rows != rows || b.cols != cols {
                return Err(mismatch(format!(
                    "{name} basis is {}x{}, expected {rows}x{cols}",
                    b.rows, b.cols
                )));
            }
        }
        if self.mean_geometry.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite mean geometry"));
        }
        if self.uv_coords.len() != v {
            return Err(mismatch("one uv per vertex required"));
        }
        if self.topology.iter().flatten().any(|&i| i as usize >= v) {
            return Err(invalid("topology references a missing vertex"));
        }
        if let Some(&l) = self.landmark_indices.iter().find(|&&l| l >= v) {
            return Err(invalid(format!("landmark index {l} >= vertex count {v}")));
        }
        Ok(())
    }

    /// Triangle/barycentric lookup for this model's UV chart at texture size.
    pub fn raster(&self) -> Result<UvRaster> {
        UvRaster::build(&self.uv_coords, &self.topology, self.width(), self.height())
    }

    pub fn coverage(&self) -> Result<UvMask> {
        Ok(self.raster()?.coverage())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let v = self.vertex_count();
        let (w, h) = (self.width(), self.height());
        let basis = |tag: &[u8; 4], b: &Basis| Chunk::f64(tag, b.rows, b.cols, b.data.clone());
        let chunks = vec![
            Chunk::u32(
                b"DIMS",
                1,
                5,
                vec![
                    w as u32,
                    h as u32,
                    v as u32,
                    self.topology.len() as u32,
                    self.landmark_indices.len() as u32,
                ],
            ),
            Chunk::f64(b"GMEA", v, 3, self.mean_geometry.concat()),
            Chunk::f64(b"DMEA", w * h, 3, self.mean_diffuse.data().to_vec()),
            Chunk::f64(b"SMEA", w * h, 3, self.mean_specular.data().to_vec()),
            basis(b"BID ", &self.basis_id),
            basis(b"BEX ", &self.basis_ex),
            basis(b"BDIF", &self.basis_diffuse),
            basis(b"BSPE", &self.basis_specular),
            Chunk::u32(b"TOPO", self.topology.len(), 3, self.topology.concat()),
            Chunk::f64(b"UVCO", v, 2, self.uv_coords.concat()),
            Chunk::u32(
                b"LMKS",
                self.landmark_indices.len(),
                1,
                self.landmark_indices.iter().map(|&i| i as u32).collect(),
            ),
        ];
        container::write(path, MODEL_MAGIC, &chunks)?;
        let manifest = serde_json::json!({
            "format": "FLM1",
            "version": container::VERSION,
            "width": w,
            "height": h,
            "vertices": v,
            "faces": self.topology.len(),
            "landmarks": self.landmark_indices.len(),
            "bases": {
                "identity": [self.basis_id.rows, self.basis_id.cols],
                "expression": [self.basis_ex.rows, self.basis_ex.cols],
                "diffuse": [self.basis_diffuse.rows, self.basis_diffuse.cols],
                "specular": [self.basis_specular.rows, self.basis_specular.cols],
            }
        });
        let mpath = manifest_path(path);
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("json"))
            .map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let chunks = container::read(path, MODEL_MAGIC)?;
        let (_, _, dims) = container::take_u32(path, &chunks, b"DIMS", Some(1), Some(5))?;
        let [w, h, v, f, l] = [0, 1, 2, 3, 4].map(|i| dims[i] as usize);
        let tex = w * h;
        let (_, _, g) = container::take_f64(path, &chunks, b"GMEA", Some(v), Some(3))?;
        let (_, _, d) = container::take_f64(path, &chunks, b"DMEA", Some(tex), Some(3))?;
        let (_, _, s) = container::take_f64(path, &chunks, b"SMEA", Some(tex), Some(3))?;
        let basis = |tag: &[u8; 4], rows: usize, cols: usize| -> Result<Basis> {
            let (r, c, data) = container::take_f64(path, &chunks, tag, Some(rows), Some(cols))?;
            Basis::new(r, c, data).map_err(|e| Error::format(path, e.to_string()))
        };
        let (_, _, topo) = container::take_u32(path, &chunks, b"TOPO", Some(f), Some(3))?;
        let (_, _, uv) = container::take_f64(path, &chunks, b"UVCO", Some(v), Some(2))?;
        let (_, _, lm) = container::take_u32(path, &chunks, b"LMKS", Some(l), Some(1))?;
        let bad = |e: Error| Error::format(path, e.to_string());
        let model = LinearFaceModel {
            mean_geometry: g.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            mean_diffuse: TextureMap::new(w, h, 3, d).map_err(bad)?,
            mean_specular: TextureMap::new(w, h, 3, s).map_err(bad)?,
            basis_id: basis(b"BID ", 3 * v, ID_COMPONENTS)?,
            basis_ex: basis(b"BEX ", 3 * v, EX_COMPONENTS)?,
            basis_diffuse: basis(b"BDIF", 3 * tex, DIFFUSE_COMPONENTS)?,
            basis_specular: basis(b"BSPE", 3 * tex, SPECULAR_COMPONENTS)?,
            topology: topo.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            uv_coords: uv.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            landmark_indices: lm.into_iter().map(|i| i as usize).collect(),
        };
        model.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(model)
    }
}

pub(crate) fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Full coarse parameter set: shape, reflectance, skin-tone adjustment,
/// pose and lighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub c_gain: [f64; 3],
    pub c_bias: [f64; 3],
    /// Euler angles in radians; rotation is `Rz · Ry · Rx`.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub sh: ShCoefficients,
    pub stage: VirtualLightStage,
}

/// Named slices of the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Alpha,
    Beta,
    Gamma,
    Delta,
    Gain,
    Bias,
    Rotation,
    Translation,
    Sh,
    Intensities,
    Directions,
    Shininess,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 12] = [
        ParamBlock::Alpha,
        ParamBlock::Beta,
        ParamBlock::Gamma,
        ParamBlock::Delta,
        ParamBlock::Gain,
        ParamBlock::Bias,
        ParamBlock::Rotation,
        ParamBlock::Translation,
        ParamBlock::Sh,
        ParamBlock::Intensities,
        ParamBlock::Directions,
        ParamBlock::Shininess,
    ];

    pub fn len(self) -> usize {
        match self {
            ParamBlock::Alpha => ID_COMPONENTS,
            ParamBlock::Beta => EX_COMPONENTS,
            ParamBlock::Gamma => DIFFUSE_COMPONENTS,
            ParamBlock::Delta => SPECULAR_COMPONENTS,
            ParamBlock::Gain | ParamBlock::Bias | ParamBlock::Rotation | ParamBlock::Translation => 3,
            ParamBlock::Sh => SH_LEN,
            ParamBlock::Intensities | ParamBlock::Shininess => STAGE_LIGHTS,
            ParamBlock::Directions => 3 * STAGE_LIGHTS,
        }
    }

    pub fn range(self) -> Range<usize> {
        let start: usize = Self::ALL
            .iter()
            .take_while(|&&b| b != self)
            .map(|b| b.len())
            .sum();
        start..start + self.len()
    }
}

impl CoarseParams {
    pub const LEN: usize = 639;

    /// Starting point for fitting: zero coefficients, neutral skin tone,
    /// gray ambient light giving shading 0.8, icosahedral stage with
    /// intensity 0.05 and shininess 200.
    pub fn initial() -> Self {
        CoarseParams {
            alpha: vec![0.0; ID_COMPONENTS],
            beta: vec![0.0; EX_COMPONENTS],
            gamma: vec![0.0; DIFFUSE_COMPONENTS],
            delta: vec![0.0; SPECULAR_COMPONENTS],
            c_gain: [1.0; 3],
            c_bias: [0.0; 3],
            rotation: [0.0; 3],
            translation: [0.0; 3],
            sh: ShCoefficients::ambient(0.8),
            stage: VirtualLightStage::icosahedral(0.05, 200.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v, n) in [
            ("alpha", &self.alpha, ID_COMPONENTS),
            ("beta", &self.beta, EX_COMPONENTS),
            ("gamma", &self.gamma, DIFFUSE_COMPONENTS),
            ("delta", &self.delta, SPECULAR_COMPONENTS),
        ] {
            if v.len() != n {
                return Err(mismatch(format!("{name} needs {n} values, got {}", v.len())));
            }
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite coarse parameter"));
        }
        self.stage.validate()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.gamma);
        v.extend_from_slice(&self.delta);
        v.extend_from_slice(&self.c_gain);
        v.extend_from_slice(&self.c_bias);
        v.extend_from_slice(&self.rotation);
        v.extend_from_slice(&self.translation);
        v.extend_from_slice(self.sh.as_slice());
        v.extend_from_slice(&self.stage.intensities);
        v.extend(self.stage.directions.iter().flatten());
        v.extend_from_slice(&self.stage.shininess);
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat); the view direction is taken
    /// from `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::LEN {
            return Err(mismatch(format!(
                "flat parameter vector needs {} values, got {}",
                Self::LEN,
                flat.len()
            )));
        }
        let b = |blk: ParamBlock| &flat[blk.range()];
        let arr3 = |s: &[f64]| [s[0], s[1], s[2]];
        let dirs = b(ParamBlock::Directions);
        Ok(CoarseParams {
            alpha: b(ParamBlock::Alpha).to_vec(),
            beta: b(ParamBlock::Beta).to_vec(),
            gamma: b(ParamBlock::Gamma).to_vec(),
            delta: b(ParamBlock::Delta).to_vec(),
            c_gain: arr3(b(ParamBlock::Gain)),
            c_bias: arr3(b(ParamBlock::Bias)),
            rotation: arr3(b(ParamBlock::Rotation)),
            translation: arr3(b(ParamBlock::Translation)),
            sh: ShCoefficients::from_slice(b(ParamBlock::Sh))?,
            stage: VirtualLightStage {
                intensities: b(ParamBlock::Intensities).try_into().expect("20"),
                directions: std::array::from_fn(|j| arr3(&dirs[3 * j..3 * j + 3])),
                shininess: b(ParamBlock::Shininess).try_into().expect("20"),
                view_direction: self.stage.view_direction,
            },
        })
    }
}

pub fn eval_geometry(model: &LinearFaceModel, alpha: &[f64], beta: &[f64]) -> Result<Vec<Vec3>> {
    let mut flat: Vec<f64> = model.mean_geometry.concat();
    model.basis_id.apply_add(alpha, &mut flat)?;
    model.basis_ex.apply_add(beta, &mut flat)?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Diffuse albedo before gain and bias: `mean + B_d γ`.
pub(crate) fn diffuse_base(model: &LinearFaceModel, gamma: &[f64]) -> Result<Vec<f64>> {
    let mut base = model.mean_diffuse.data().to_vec();
    model.basis_diffuse.apply_add(gamma, &mut base)?;
    Ok(base)
}

/// `(mean + B_d γ) ⊙ gain + bias`, unclamped.
pub fn eval_diffuse_albedo(
    model: &LinearFaceModel,
    gamma: &[f64],
    c_gain: &[f64],
    c_bias: &[f64],
) -> Result<TextureMap> {
    if c_gain.len() != 3 || c_bias.len() != 3 {
        return Err(mismatch("gain and bias need 3 values each"));
    }
    let mut d = diffuse_base(model, gamma)?;
    for px in d.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = px[c] * c_gain[c] + c_bias[c];
        }
    }
    TextureMap::new(model.width(), model.height(), 3, d)
}

pub fn eval_specular_albedo(model: &LinearFaceModel, delta: &[f64]) -> Result<TextureMap> {
    let mut s = model.mean_specular.data().to_vec();
    model.basis_specular.apply_add(delta, &mut s)?;
    TextureMap::new(model.width(), model.height(), 3, s)
}

/// `Rz(r[2]) · Ry(r[1]) · Rx(r[0])`.
pub fn rotation_matrix(r: [f64; 3]) -> Matrix3<f64> {
    let [rx, ry, rz] = rotation_factors(r);
    rz * ry * rx
}

fn rotation_factors(r: [f64; 3]) -> [Matrix3<f64>; 3] {
    let (sa, ca) = r[0].sin_cos();
    let (sb, cb) = r[1].sin_cos();
    let (sc, cc) = r[2].sin_cos();
    [
        Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca),
        Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb),
        Matrix3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0),
    ]
}

/// `∂R/∂r_i` for the three Euler angles.
pub(crate) fn rotation_jacobian(r: [f64; 3]) -> [Matrix3<f64>; 3] {
    let [rx, ry, rz] = rotation_factors(r);
    let (sa, ca) = r[0].sin_cos();
    let (sb, cb) = r[1].sin_cos();
    let (sc, cc) = r[2].sin_cos();
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sa, -ca, 0.0, ca, -sa);
    let dry = Matrix3::new(-sb, 0.0, cb, 0.0, 0.0, 0.0, -cb, 0.0, -sb);
    let drz = Matrix3::new(-sc, -cc, 0.0, cc, -sc, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

/// Orthographic, unit-scale projection `(R·g + t).xy` of the landmark vertices.
pub fn project_landmarks(
    positions: &[Vec3],
    landmark_indices: &[usize],
    r: [f64; 3],
    t: [f64; 3],
) -> Result<Vec<[f64; 2]>> {
    let rot = rotation_matrix(r);
    landmark_indices
        .iter()
        .map(|&i| {
            let g = positions
                .get(i)
                .ok_or_else(|| invalid(format!("landmark index {i} out of range")))?;
            let p = rot * Vector3::new(g[0], g[1], g[2]);
            Ok([p.x + t[0], p.y + t[1]])
        })
        .collect()
}

/// Reads detected landmarks from CSV rows `index,x,y`, ordered by index.
/// A header line is allowed.
pub fn read_landmarks_csv(path: impl AsRef<Path>) -> Result<Vec<[f64; 2]>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(usize, [f64; 2])> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line.starts_with("index")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match f.as_slice() {
            [i, x, y] => i
                .parse::<usize>()
                .ok()
                .zip(x.parse::<f64>().ok())
                .zip(y.parse::<f64>().ok())
                .map(|((i, x), y)| (i, [x, y])),
            _ => None,
        };
        match parsed {
            Some(r) if r.1.iter().all(|v| v.is_finite()) => rows.push(r),
            _ => return Err(Error::format(path, format!("bad landmark row {}", ln + 1))),
        }
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
        return Err(Error::format(path, "landmark indices must be 0..L without gaps"));
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

pub fn write_landmarks_csv(points: &[[f64; 2]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("index,x,y\n");
    for (i, p) in points.iter().enumerate() {
        s.push_str(&format!("{i},{:?},{:?}\n", p[0], p[1]));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn orthonormalize(columns: &mut [Vec<f64>], fixed: &[Vec<f64>]) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for k in 0..columns.len() {
        // Two passes of modified Gram–Schmidt keep the columns orthogonal to
        // working precision.
        for _ in 0..2 {
            for f in fixed {
                let d = dot(&columns[k], f);
                columns[k].iter_mut().zip(f).for_each(|(c, f)| *c -= d * f);
            }
            for j in 0..k {
                let (done, rest) = columns.split_at_mut(k);
                let d = dot(&rest[0], &done[j]);
                rest[0].iter_mut().zip(&done[j]).for_each(|(c, q)| *c -= d * q);
            }
        }
        let n = dot(&columns[k], &columns[k]).sqrt();
        assert!(n > 1e-12, "degenerate basis column");
        columns[k].iter_mut().for_each(|c| *c /= n);
    }
}

struct Wave {
    freq: [f64; 3],
    phase: f64,
    amp: f64,
}

fn random_waves(rng: &mut ChaCha8Rng, count: usize, max_freq: f64) -> Vec<Wave> {
    (0..count)
        .map(|_| Wave {
            freq: [0; 3].map(|_| rng.random_range(-max_freq..max_freq)),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: rng.sample(StandardNormal),
        })
        .collect()
}

fn eval_waves(waves: &[Wave], p: [f64; 3]) -> f64 {
    waves
        .iter()
        .map(|w| {
            let arg = w.freq[0] * p[0] + w.freq[1] * p[1] + w.freq[2] * p[2];
            w.amp * (std::f64::consts::TAU * arg + w.phase).cos()
        })
        .sum()
}

/// Deterministic stand-in for a licensed face model.
///
/// The mesh is the `z ≥ 0` cap of the smallest icosphere (subdivision ≥ 2)
/// with at least `min_vertices` vertices before cropping; UVs are the
/// orthographic projection `((x + 1) / 2, (1 − y) / 2)`. Bases are smooth
/// random fields, orthogonalized and scaled to decaying standard
/// deviations. Albedo basis columns vanish outside the UV coverage and have
/// zero per-channel mean inside it, so only gain and bias move the mean
/// skin color.
pub fn synthetic_model(seed: u64, min_vertices: usize, resolution: usize) -> Result<LinearFaceModel> {
    if min_vertices < 12 {
        return Err(invalid("synthetic model needs at least 12 vertices"));
    }
    if resolution < 8 {
        return Err(invalid("synthetic model resolution must be >= 8"));
    }
    let level = (2..=6)
        .find(|&l| 10 * 4usize.pow(l as u32) + 2 >= min_vertices)
        .ok_or_else(|| invalid(format!("{min_vertices} vertices is too many")))?;
    let (sphere, faces) = icosphere(level);
    let mut remap = vec![u32::MAX; sphere.len()];
    let mut verts = Vec::new();
    for (i, v) in sphere.iter().enumerate() {
        if v[2] >= -1e-9 {
            remap[i] = verts.len() as u32;
            verts.push(*v);
        }
    }
    let topology: Vec<Face> = faces
        .iter()
        .filter(|f| f.iter().all(|&i| remap[i as usize] != u32::MAX))
        .map(|f| f.map(|i| remap[i as usize]))
        .collect();
    let uv_coords: Vec<[f64; 2]> = verts
        .iter()
        .map(|v| [((v[0] + 1.0) / 2.0).clamp(0.0, 1.0), ((1.0 - v[1]) / 2.0).clamp(0.0, 1.0)])
        .collect();

    let mut landmark_indices = Vec::new();
    for gy in [-0.6, -0.2, 0.2, 0.6] {
        for gx in [-0.6, -0.2, 0.2, 0.6] {
            let best = (0..verts.len())
                .min_by(|&a, &b| {
                    let da = (verts[a][0] - gx).powi(2) + (verts[a][1] - gy).powi(2);
                    let db = (verts[b][0] - gx).powi(2) + (verts[b][1] - gy).powi(2);
                    da.total_cmp(&db)
                })
                .expect("nonempty mesh");
            if !landmark_indices.contains(&best) {
                landmark_indices.push(best);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = verts.len();

    let geometry_basis = |count: usize, sigma0: f64, rng: &mut ChaCha8Rng| -> Result<Basis> {
        let mut cols: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let waves: Vec<Vec<Wave>> = (0..3).map(|_| random_waves(rng, 3, 1.5)).collect();
                let mut col = Vec::with_capacity(3 * nv);
                for v in &verts {
                    for w in &waves {
                        let noise: f64 = rng.sample(StandardNormal);
                        col.push(eval_waves(w, *v) + 0.05 * noise);
                    }
                }
                col
            })
            .collect();
        orthonormalize(&mut cols, &[]);
        let root = ((3 * nv) as f64).sqrt();
        for (k, c) in cols.iter_mut().enumerate() {
            let s = sigma0 / ((1 + k) as f64).sqrt() * root;
            c.iter_mut().for_each(|x| *x *= s);
        }
        Basis::from_columns(3 * nv, cols)
    };
    let basis_id = geometry_basis(ID_COMPONENTS, 0.01, &mut rng)?;
    let basis_ex = geometry_basis(EX_COMPONENTS, 0.008, &mut rng)?;

    let (w, h) = (resolution, resolution);
    let raster = UvRaster::build(&uv_coords, &topology, w, h)?;
    let cover = raster.coverage();
    let covered: Vec<usize> = (0..w * h).filter(|&p| cover.is_valid(p)).collect();
    if covered.len() * 3 < DIFFUSE_COMPONENTS + 3 {
        return Err(invalid("resolution too small for the albedo bases"));
    }
    let uv_of = |p: usize| {
        [
            ((p % w) as f64 + 0.5) / w as f64,
            ((p / w) as f64 + 0.5) / h as f64,
            0.0,
        ]
    };
    let channel_indicators: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let mut v = vec![0.0; 3 * w * h];
            let s = 1.0 / (covered.len() as f64).sqrt();
            for &p in &covered {
                v[3 * p + c] = s;
            }
            v
        })
        .collect();
    let texture_basis = |count: usize, sigma0: f64, zero_mean: bool, rng: &mut ChaCha8Rng| -> Result<Basis> {
        let mut cols: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let shared = random_waves(rng, 4, 3.0);
                let per: Vec<Vec<Wave>> = (0..3).map(|_| random_waves(rng, 2, 3.0)).collect();
                let mut col = vec![0.0; 3 * w * h];
                for &p in &covered {
                    let q = uv_of(p);
                    let base = eval_waves(&shared, q);
                    for c in 0..3 {
                        let noise: f64 = rng.sample(StandardNormal);
                        col[3 * p + c] = base + 0.3 * eval_waves(&per[c], q) + 0.02 * noise;
                    }
                }
                col
            })
            .collect();
        let fixed: &[Vec<f64>] = if zero_mean { &channel_indicators } else { &[] };
        orthonormalize(&mut cols, fixed);
        let root = ((3 * covered.len()) as f64).sqrt();
        for (k, c) in cols.iter_mut().enumerate() {
            let s = sigma0 / ((1 + k) as f64).sqrt() * root;
            c.iter_mut().for_each(|x| *x *= s);
        }
        Basis::from_columns(3 * w * h, cols)
    };
    let basis_diffuse = texture_basis(DIFFUSE_COMPONENTS, 0.05, true, &mut rng)?;
    let basis_specular = texture_basis(SPECULAR_COMPONENTS, 0.02, false, &mut rng)?;

    let tint = [1.0, 0.8, 0.7];
    let skin = [0.8, 0.6, 0.5];
    let mean_diffuse = TextureMap::from_fn(w, h, 3, |x, y, c| {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        let tau = std::f64::consts::TAU;
        skin[c] + tint[c] * (0.04 * (tau * u).cos() * (0.5 * tau * v).sin() + 0.02 * (1.5 * tau * v).cos())
    });
    let mean_specular = TextureMap::from_fn(w, h, 3, |x, y, _| {
        let u = (x as f64 + 0.5) / w as f64 - 0.5;
        let v = (y as f64 + 0.5) / h as f64 - 0.45;
        0.25 + 0.1 * (-(u * u + v * v) / 0.05).exp()
    });

    let model = LinearFaceModel {
        mean_geometry: verts,
        mean_diffuse,
        mean_specular,
        basis_id,
        basis_ex,
        basis_diffuse,
        basis_specular,
        topology,
        uv_coords,
        landmark_indices,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LinearFaceModel {
        synthetic_model(3, 162, 16).unwrap()
    }

    fn max_cosine(b: &Basis) -> f64 {
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        let mut worst = 0.0f64;
        for i in 0..b.cols() {
            for j in i + 1..b.cols() {
                let (ci, cj) = (b.column(i), b.column(j));
                let c = dot(ci, cj) / (dot(ci, ci) * dot(cj, cj)).sqrt();
                worst = worst.max(c.abs());
            }
        }
        worst
    }

    #[test]
    fn synthetic_model_is_deterministic_and_valid() {
        let a = model();
        assert_eq!(a, model());
        assert_ne!(a, synthetic_model(4, 162, 16).unwrap());
        assert!(a.vertex_count() >= 12);
        assert!(a.validate().is_ok());
        assert!(max_cosine(&a.basis_id) < 1e-6);
        assert!(max_cosine(&a.basis_diffuse) < 1e-6);
        assert!(synthetic_model(0, 11, 16).is_err());
    }

    #[test]
    fn eval_at_zero_reproduces_means() {
        let m = model();
        let g = eval_geometry(&m, &[0.0; ID_COMPONENTS], &[0.0; EX_COMPONENTS]).unwrap();
        assert_eq!(g, m.mean_geometry);
        let d = eval_diffuse_albedo(&m, &[0.0; DIFFUSE_COMPONENTS], &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(d, m.mean_diffuse);
        let s = eval_specular_albedo(&m, &[0.0; SPECULAR_COMPONENTS]).unwrap();
        assert_eq!(s, m.mean_specular);
    }

    #[test]
    fn unit_coordinate_selects_basis_column() {
        let m = model();
        let mut alpha = vec![0.0; ID_COMPONENTS];
        alpha[7] = 1.0;
        let g = eval_geometry(&m, &alpha, &[0.0; EX_COMPONENTS]).unwrap();
        let col = m.basis_id.column(7);
        for (i, p) in g.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(p[k], m.mean_geometry[i][k] + col[3 * i + k]);
            }
        }
        let mut delta = vec![0.0; SPECULAR_COMPONENTS];
        delta[0] = 0.0;
        assert_eq!(eval_specular_albedo(&m, &delta).unwrap(), m.mean_specular);
    }

    #[test]
    fn skin_tone_gain_and_bias() {
        let m = model();
        let z = vec![0.0; DIFFUSE_COMPONENTS];
        let flat = eval_diffuse_albedo(&m, &z, &[0.0; 3], &[0.5; 3]).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.5));
        let red = eval_diffuse_albedo(&m, &z, &[2.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        for p in 0..red.pixel_count() {
            assert_eq!(red.pixel(p)[0], 2.0 * m.mean_diffuse.pixel(p)[0]);
            assert_eq!(red.pixel(p)[1], m.mean_diffuse.pixel(p)[1]);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let m = model();
        assert!(eval_geometry(&m, &[0.0; 3], &[0.0; EX_COMPONENTS]).is_err());
        assert!(eval_diffuse_albedo(&m, &[0.0; DIFFUSE_COMPONENTS], &[1.0; 2], &[0.0; 3]).is_err());
        assert!(eval_specular_albedo(&m, &[0.0; 99]).is_err());
    }

    #[test]
    fn evaluation_is_affine() {
        let m = model();
        let a1: Vec<f64> = (0..ID_COMPONENTS).map(|k| ((k * 7) % 5) as f64 - 2.0).collect();
        let a2: Vec<f64> = (0..ID_COMPONENTS).map(|k| ((k * 3) % 4) as f64 * 0.5).collect();
        let b0 = vec![0.0; EX_COMPONENTS];
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(a, b)| a + b).collect();
        let g0 = eval_geometry(&m, &vec![0.0; ID_COMPONENTS], &b0).unwrap();
        let g1 = eval_geometry(&m, &a1, &b0).unwrap();
        let g2 = eval_geometry(&m, &a2, &b0).unwrap();
        let g12 = eval_geometry(&m, &sum, &b0).unwrap();
        for i in 0..g0.len() {
            for k in 0..3 {
                let lhs = g12[i][k] - g0[i][k];
                let rhs = (g1[i][k] - g0[i][k]) + (g2[i][k] - g0[i][k]);
                assert!((lhs - rhs).abs() < 1e-6);
            }
        }
        let c1: Vec<f64> = (0..DIFFUSE_COMPONENTS).map(|k| (k % 3) as f64 - 1.0).collect();
        let twice: Vec<f64> = c1.iter().map(|v| 2.0 * v).collect();
        let d0 = eval_diffuse_albedo(&m, &vec![0.0; DIFFUSE_COMPONENTS], &[1.1, 0.9, 1.0], &[0.01; 3]).unwrap();
        let d1 = eval_diffuse_albedo(&m, &c1, &[1.1, 0.9, 1.0], &[0.01; 3]).unwrap();
        let d2 = eval_diffuse_albedo(&m, &twice, &[1.1, 0.9, 1.0], &[0.01; 3]).unwrap();
        for i in 0..d0.data().len() {
            let (a, b, c) = (d0.data()[i], d1.data()[i], d2.data()[i]);
            assert!(((c - b) - (b - a)).abs() < 1e-9);
        }
    }

    #[test]
    fn albedo_basis_has_zero_mean_over_coverage() {
        let m = model();
        let cover = m.coverage().unwrap();
        for k in [0, 50, 99] {
            let col = TextureMap::new(m.width(), m.height(), 3, m.basis_diffuse.column(k).to_vec()).unwrap();
            for mu in col.masked_channel_means(&cover).unwrap() {
                assert!(mu.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_cases() {
        let m = model();
        let g = &m.mean_geometry;
        let lm = &m.landmark_indices;
        let p0 = project_landmarks(g, lm, [0.0; 3], [0.0; 3]).unwrap();
        for (p, &i) in p0.iter().zip(lm) {
            assert_eq!(*p, [g[i][0], g[i][1]]);
        }
        let shifted = project_landmarks(g, lm, [0.0; 3], [5.0, 0.0, 0.0]).unwrap();
        for (a, b) in shifted.iter().zip(&p0) {
            assert!((a[0] - b[0] - 5.0).abs() < 1e-12 && a[1] == b[1]);
        }
        let flipped = project_landmarks(g, lm, [0.0, 0.0, std::f64::consts::PI], [0.0; 3]).unwrap();
        for (a, b) in flipped.iter().zip(&p0) {
            assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] + b[1]).abs() < 1e-12);
        }
        assert!(project_landmarks(g, &[g.len()], [0.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn z_rotations_compose() {
        let m = model();
        let (r1, r2) = (0.4, -1.1);
        let rotated: Vec<Vec3> = m
            .mean_geometry
            .iter()
            .map(|v| {
                let p = rotation_matrix([0.0, 0.0, r2]) * Vector3::new(v[0], v[1], v[2]);
                [p.x, p.y, p.z]
            })
            .collect();
        let a = project_landmarks(&rotated, &m.landmark_indices, [0.0, 0.0, r1], [0.3, -0.2, 0.0]).unwrap();
        let b = project_landmarks(&m.mean_geometry, &m.landmark_indices, [0.0, 0.0, r1 + r2], [0.3, -0.2, 0.0]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let r = [0.3, -0.7, 1.2];
        let j = rotation_jacobian(r);
        let h = 1e-6;
        for i in 0..3 {
            let (mut a, mut b) = (r, r);
            a[i] += h;
            b[i] -= h;
            let fd = (rotation_matrix(a) - rotation_matrix(b)) / (2.0 * h);
            assert!((fd - j[i]).abs().max() < 1e-8);
        }
    }

    #[test]
    fn params_flatten_round_trip() {
        let mut p = CoarseParams::initial();
        p.alpha[3] = 0.5;
        p.stage.shininess[19] = 150.0;
        p.c_bias = [0.1, 0.2, 0.3];
        let flat = p.to_flat();
        assert_eq!(flat.len(), CoarseParams::LEN);
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        assert_eq!(ParamBlock::Shininess.range().end, CoarseParams::LEN);
        assert_eq!(flat[ParamBlock::Bias.range()], [0.1, 0.2, 0.3]);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<CoarseParams>(&json).unwrap(), p);
    }

    #[test]
    fn container_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.flm");
        m.save(&path).unwrap();
        assert_eq!(LinearFaceModel::load(&path).unwrap(), m);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(manifest["vertices"], m.vertex_count());
        assert_eq!(manifest["bases"]["identity"][1], ID_COMPONENTS);
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(LinearFaceModel::load(&path).unwrap_err().is_io());
    }

    #[test]
    fn landmark_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let pts = vec![[0.25, -1.5], [1.0 / 3.0, 2.0]];
        write_landmarks_csv(&pts, &p).unwrap();
        assert_eq!(read_landmarks_csv(&p).unwrap(), pts);
        std::fs::write(&p, "0,1,2\n2,3,4\n").unwrap();
        assert!(read_landmarks_csv(&p).is_err());
    }
}
