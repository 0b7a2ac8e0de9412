//! Forward illumination: second-order spherical-harmonics diffuse shading,
//! a Blinn–Phong virtual light stage for specular shading, and the
//! `albedo ⊙ shading + specular` reconstruction.
//!
//! Every shading evaluator has a matching `*_backward` that pulls an output
//! gradient back onto the normals and lighting parameters. Normal maps need
//! not be unit length: each pixel is normalized before shading and the
//! backward pass differentiates through that normalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::texture::TextureMap;

pub const SH_C0: f64 = 0.282095;
pub const SH_C1: f64 = 0.488603;
pub const SH_C2: f64 = 1.092548;
pub const SH_C3: f64 = 0.315392;
pub const SH_C4: f64 = 0.546274;

pub const SH_BANDS: usize = 9;
pub const SH_LEN: usize = 27;
pub const STAGE_LIGHTS: usize = 20;

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

/// Second-order SH lighting, 9 coefficients per color channel, stored
/// channel-major (`[r0..r8, g0..g8, b0..b8]`). Irradiance convolution
/// factors are folded in, so a channel's shading is a plain dot product
/// with [`sh_basis`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ShCoefficients(pub [f64; SH_LEN]);

impl ShCoefficients {
    pub fn zeros() -> Self {
        ShCoefficients([0.0; SH_LEN])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != SH_LEN {
            return Err(invalid(format!("SH needs {SH_LEN} coefficients, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite SH coefficient"));
        }
        let mut a = [0.0; SH_LEN];
        a.copy_from_slice(v);
        Ok(ShCoefficients(a))
    }

    /// Band-0-only gray environment whose shading equals `level` everywhere.
    pub fn ambient(level: f64) -> Self {
        let mut a = [0.0; SH_LEN];
        for c in 0..3 {
            a[c * SH_BANDS] = level / SH_C0;
        }
        ShCoefficients(a)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.0[c * SH_BANDS..(c + 1) * SH_BANDS]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        ShCoefficients(self.0.map(|v| v * s))
    }
}

impl TryFrom<Vec<f64>> for ShCoefficients {
    type Error = crate::error::Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ShCoefficients::from_slice(&v)
    }
}

impl From<ShCoefficients> for Vec<f64> {
    fn from(s: ShCoefficients) -> Self {
        s.0.to_vec()
    }
}

/// What [`sh_basis_checked`] does with a normal that is not unit length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonUnitNormal {
    #[default]
    Normalize,
    Reject,
}

const UNIT_TOL: f64 = 1e-6;

/// Real SH basis `Y00..Y22` at a unit normal, ordered
/// `1, y, z, x, xy, yz, 3z²−1, xz, x²−y²`.
pub fn sh_basis(n: Vec3) -> [f64; SH_BANDS] {
    let [x, y, z] = n;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

pub fn sh_basis_checked(n: Vec3, policy: NonUnitNormal) -> Result<[f64; SH_BANDS]> {
    let len = norm3(n);
    if (len - 1.0).abs() <= UNIT_TOL {
        return Ok(sh_basis(n));
    }
    match policy {
        NonUnitNormal::Reject => Err(invalid(format!("normal length {len} is not unit"))),
        NonUnitNormal::Normalize if len > 0.0 => Ok(sh_basis(n.map(|v| v / len))),
        NonUnitNormal::Normalize => Err(invalid("zero-length normal")),
    }
}

/// Partial derivatives `∂Y_k/∂(x, y, z)` of [`sh_basis`].
pub fn sh_basis_jacobian(n: Vec3) -> [Vec3; SH_BANDS] {
    let [x, y, z] = n;
    [
        [0.0, 0.0, 0.0],
        [0.0, SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [SH_C1, 0.0, 0.0],
        [SH_C2 * y, SH_C2 * x, 0.0],
        [0.0, SH_C2 * z, SH_C2 * y],
        [0.0, 0.0, 6.0 * SH_C3 * z],
        [SH_C2 * z, 0.0, SH_C2 * x],
        [2.0 * SH_C4 * x, -2.0 * SH_C4 * y, 0.0],
    ]
}

/// Unit normal of a raw pixel vector; zero vectors map to `+z` with no
/// gradient.
#[inline]
pub(crate) fn unit_normal(u: Vec3) -> (Vec3, f64) {
    let len = norm3(u);
    if len > 0.0 {
        (u.map(|v| v / len), len)
    } else {
        ([0.0, 0.0, 1.0], 0.0)
    }
}

/// Pulls a gradient on the unit normal back to the raw vector `u`:
/// `(I − n nᵀ) g / |u|`.
#[inline]
pub(crate) fn normalize_backward(n: Vec3, len: f64, g: Vec3) -> Vec3 {
    if len == 0.0 {
        return [0.0; 3];
    }
    let d = dot3(n, g);
    [
        (g[0] - n[0] * d) / len,
        (g[1] - n[1] * d) / len,
        (g[2] - n[2] * d) / len,
    ]
}

fn pixel_normal(normals: &TextureMap, p: usize) -> Vec3 {
    let px = normals.pixel(p);
    [px[0], px[1], px[2]]
}

/// Lambertian SH shading per pixel and channel, clamped below at 0.
pub fn diffuse_shading(normals: &TextureMap, sh: &ShCoefficients) -> Result<TextureMap> {
    normals.ensure_channels(3, "normal map")?;
    let n = normals.pixel_count();
    let mut out = vec![0.0; n * 3];
    out.par_chunks_mut(3).enumerate().for_each(|(p, o)| {
        let (nn, _) = unit_normal(pixel_normal(normals, p));
        let y = sh_basis(nn);
        for c in 0..3 {
            let s: f64 = sh.channel(c).iter().zip(&y).map(|(a, b)| a * b).sum();
            o[c] = s.max(0.0);
        }
    });
    Ok(TextureMap::from_raw(normals.width(), normals.height(), 3, out))
}

/// Gradients of `Σ grad_out ⊙ diffuse_shading(normals, sh)`.
pub fn diffuse_shading_backward(
    normals: &TextureMap,
    sh: &ShCoefficients,
    grad_out: &[f64],
) -> Result<(Vec<f64>, [f64; SH_LEN])> {
    normals.ensure_channels(3, "normal map")?;
    if grad_out.len() != normals.data().len() {
        return Err(mismatch("diffuse shading gradient length"));
    }
    let n = normals.pixel_count();
    let mut grad_n = vec![0.0; n * 3];
    let mut grad_sh = [0.0; SH_LEN];
    for p in 0..n {
        let u = pixel_normal(normals, p);
        let (nn, len) = unit_normal(u);
        let y = sh_basis(nn);
        let jac = sh_basis_jacobian(nn);
        let mut gn = [0.0; 3];
        for c in 0..3 {
            let g = grad_out[p * 3 + c];
            if g == 0.0 {
                continue;
            }
            let coeffs = sh.channel(c);
            let s: f64 = coeffs.iter().zip(&y).map(|(a, b)| a * b).sum();
            if s <= 0.0 {
                continue;
            }
            for k in 0..SH_BANDS {
                grad_sh[c * SH_BANDS + k] += g * y[k];
                for (d, j) in gn.iter_mut().zip(jac[k]) {
                    *d += g * coeffs[k] * j;
                }
            }
        }
        let gu = normalize_backward(nn, len, gn);
        grad_n[p * 3..p * 3 + 3].copy_from_slice(&gu);
    }
    Ok((grad_n, grad_sh))
}

/// Twenty directional lights with per-light intensity and Blinn–Phong
/// shininess, evaluated from a fixed view direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualLightStage {
    pub intensities: [f64; STAGE_LIGHTS],
    pub directions: [Vec3; STAGE_LIGHTS],
    pub shininess: [f64; STAGE_LIGHTS],
    pub view_direction: Vec3,
}

impl VirtualLightStage {
    /// Icosahedral directions, uniform intensity and shininess, viewer on +z.
    pub fn icosahedral(intensity: f64, shininess: f64) -> Self {
        VirtualLightStage {
            intensities: [intensity; STAGE_LIGHTS],
            directions: icosahedral_directions(),
            shininess: [shininess; STAGE_LIGHTS],
            view_direction: [0.0, 0.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (j, d) in self.directions.iter().enumerate() {
            if !d.iter().all(|v| v.is_finite()) || (norm3(*d) - 1.0).abs() > UNIT_TOL {
                return Err(invalid(format!("light {j} direction is not unit length")));
            }
        }
        if (norm3(self.view_direction) - 1.0).abs() > UNIT_TOL {
            return Err(invalid("view direction is not unit length"));
        }
        if let Some(j) = self.intensities.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid(format!("light {j} intensity must be >= 0")));
        }
        if let Some(j) = self.shininess.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid(format!("light {j} shininess must be > 0")));
        }
        Ok(())
    }

    /// Re-normalizes every light direction (zero vectors fall back to `+z`).
    pub fn renormalize(&mut self) {
        for d in &mut self.directions {
            *d = unit_normal(*d).0;
        }
    }

    /// Unit half vectors, `None` where the light points straight against the
    /// viewer.
    pub fn half_vectors(&self) -> [Option<(Vec3, f64)>; STAGE_LIGHTS] {
        let v = self.view_direction;
        std::array::from_fn(|j| {
            let d = self.directions[j];
            let s = [d[0] + v[0], d[1] + v[1], d[2] + v[2]];
            let len = norm3(s);
            (len > 1e-12).then(|| (s.map(|x| x / len), len))
        })
    }
}

/// Gradient of a scalar with respect to every stage parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrad {
    pub intensities: [f64; STAGE_LIGHTS],
    pub directions: [Vec3; STAGE_LIGHTS],
    pub shininess: [f64; STAGE_LIGHTS],
}

impl StageGrad {
    pub fn zeros() -> Self {
        StageGrad {
            intensities: [0.0; STAGE_LIGHTS],
            directions: [[0.0; 3]; STAGE_LIGHTS],
            shininess: [0.0; STAGE_LIGHTS],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpecularChannels {
    #[default]
    Gray,
    Rgb,
}

fn specular_at(n: Vec3, stage: &VirtualLightStage, halves: &[Option<(Vec3, f64)>]) -> f64 {
    let mut s = 0.0;
    for (j, h) in halves.iter().enumerate() {
        if let Some((h, _)) = h {
            let d = dot3(n, *h);
            if d > 0.0 {
                s += stage.intensities[j] * d.powf(stage.shininess[j]);
            }
        }
    }
    s
}

/// Blinn–Phong specular shading `Σ_j I_j · max(0, n·h_j)^ρ_j`.
pub fn specular_shading(
    normals: &TextureMap,
    stage: &VirtualLightStage,
    channels: SpecularChannels,
) -> Result<TextureMap> {
    normals.ensure_channels(3, "normal map")?;
    stage.validate()?;
    let gray = specular_gray(normals, stage);
    Ok(match channels {
        SpecularChannels::Gray => gray,
        SpecularChannels::Rgb => gray.to_rgb(),
    })
}

/// One-channel specular shading without validating the stage; directions
/// need not be unit length (the half vector is normalized regardless).
pub(crate) fn specular_gray(normals: &TextureMap, stage: &VirtualLightStage) -> TextureMap {
    let halves = stage.half_vectors();
    let n = normals.pixel_count();
    let mut out = vec![0.0; n];
    out.par_iter_mut().enumerate().for_each(|(p, o)| {
        let (nn, _) = unit_normal(pixel_normal(normals, p));
        *o = specular_at(nn, stage, &halves);
    });
    TextureMap::from_raw(normals.width(), normals.height(), 1, out)
}

/// Gradients of `Σ_p grad_out[p] · specular(p)` for the one-channel output.
pub fn specular_shading_backward(
    normals: &TextureMap,
    stage: &VirtualLightStage,
    grad_out: &[f64],
) -> Result<(Vec<f64>, StageGrad)> {
    normals.ensure_channels(3, "normal map")?;
    if grad_out.len() != normals.pixel_count() {
        return Err(mismatch("specular shading gradient length"));
    }
    let halves = stage.half_vectors();
    let n = normals.pixel_count();
    let mut grad_n = vec![0.0; n * 3];
    let mut sg = StageGrad::zeros();
    // Gradient on each unit half vector, pulled back to the direction at the end.
    let mut grad_h = [[0.0f64; 3]; STAGE_LIGHTS];
    for p in 0..n {
        let g = grad_out[p];
        if g == 0.0 {
            continue;
        }
        let (nn, len) = unit_normal(pixel_normal(normals, p));
        let mut gn = [0.0; 3];
        for (j, h) in halves.iter().enumerate() {
            let Some((h, _)) = h else { continue };
            let d = dot3(nn, *h);
            if d <= 0.0 {
                continue;
            }
            let rho = stage.shininess[j];
            let pw = d.powf(rho);
            sg.intensities[j] += g * pw;
            sg.shininess[j] += g * stage.intensities[j] * pw * d.ln();
            let dd = g * stage.intensities[j] * rho * d.powf(rho - 1.0);
            for k in 0..3 {
                gn[k] += dd * h[k];
                grad_h[j][k] += dd * nn[k];
            }
        }
        let gu = normalize_backward(nn, len, gn);
        grad_n[p * 3..p * 3 + 3].copy_from_slice(&gu);
    }
    for (j, h) in halves.iter().enumerate() {
        if let Some((h, len)) = h {
            sg.directions[j] = normalize_backward(*h, *len, grad_h[j]);
        }
    }
    Ok((grad_n, sg))
}

/// `albedo ⊙ shading + specular`, clamped below at 0 (no upper clamp).
/// A one-channel specular map is broadcast over the color channels.
pub fn compose_reconstruction(
    albedo: &TextureMap,
    shading: &TextureMap,
    specular: &TextureMap,
) -> Result<TextureMap> {
    albedo.ensure_same_shape(shading, "albedo vs shading")?;
    albedo.ensure_same_size(specular, "albedo vs specular")?;
    if specular.channels() != 1 && specular.channels() != albedo.channels() {
        return Err(mismatch("specular must be 1 channel or match the albedo"));
    }
    let c = albedo.channels();
    let sc = specular.channels();
    let data = albedo
        .data()
        .iter()
        .zip(shading.data())
        .enumerate()
        .map(|(i, (a, s))| {
            let spec = if sc == 1 {
                specular.data()[i / c]
            } else {
                specular.data()[i]
            };
            (a * s + spec).max(0.0)
        })
        .collect();
    TextureMap::new(albedo.width(), albedo.height(), c, data)
}

/// The 20 face-center directions of a regular icosahedron, sorted by
/// descending z, then by `atan2(y, x)`.
pub fn icosahedral_directions() -> [Vec3; STAGE_LIGHTS] {
    // Face centers of an icosahedron are the vertices of the dual dodecahedron.
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let inv = 1.0 / phi;
    let mut v: Vec<Vec3> = Vec::with_capacity(STAGE_LIGHTS);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                v.push([sx, sy, sz]);
            }
        }
    }
    for a in [-1.0, 1.0] {
        for b in [-1.0, 1.0] {
            v.push([0.0, a * inv, b * phi]);
            v.push([a * inv, b * phi, 0.0]);
            v.push([a * phi, 0.0, b * inv]);
        }
    }
    let mut v: Vec<Vec3> = v.into_iter().map(|d| unit_normal(d).0).collect();
    v.sort_by(|a, b| {
        if (a[2] - b[2]).abs() > 1e-9 {
            b[2].total_cmp(&a[2])
        } else {
            a[1].atan2(a[0]).total_cmp(&b[1].atan2(b[0]))
        }
    });
    v.try_into().expect("exactly 20 directions")
}
