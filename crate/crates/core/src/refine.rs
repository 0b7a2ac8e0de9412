//! Per-texel refinement of diffuse albedo, normals, single-channel specular
//! and SH lighting against a completed texture, anchored to blurred coarse
//! priors.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::optim::{AdamState, StepDecay};
use crate::shading::{compose_reconstruction, diffuse_shading, diffuse_shading_backward, ShCoefficients, SH_LEN};
use crate::texture::filter::sign;
use crate::texture::{
    box_downsample, box_downsample_adjoint, gaussian_blur, gaussian_blur_adjoint, resize_bilinear,
    total_variation, total_variation_grad, TextureMap,
};

/// Number of dyadic scales in the perceptual substitute.
pub const PERCEPTUAL_SCALES: usize = 3;

const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Rec. 709 luminance of a three-channel texture.
pub fn gray(tex: &TextureMap) -> Result<TextureMap> {
    tex.ensure_channels(3, "gray input")?;
    let data = tex
        .data()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    TextureMap::new(tex.width(), tex.height(), 1, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMaterials {
    pub diffuse_albedo: TextureMap,
    pub normals: TextureMap,
    /// Single-channel specular reconstruction.
    pub specular: TextureMap,
    pub sh: ShCoefficients,
}

impl RefinedMaterials {
    pub fn validate(&self) -> Result<()> {
        self.diffuse_albedo.ensure_channels(3, "diffuse albedo")?;
        self.normals.ensure_channels(3, "normal map")?;
        self.specular.ensure_channels(1, "specular reconstruction")?;
        self.diffuse_albedo.ensure_same_shape(&self.normals, "albedo vs normals")?;
        self.diffuse_albedo.ensure_same_size(&self.specular, "albedo vs specular")
    }

    pub fn width(&self) -> usize {
        self.diffuse_albedo.width()
    }

    pub fn height(&self) -> usize {
        self.diffuse_albedo.height()
    }

    pub fn diffuse_shading(&self) -> Result<TextureMap> {
        diffuse_shading(&self.normals, &self.sh)
    }

    /// `max(0, D ⊙ shading(N, sh) + R_s)`.
    pub fn compose(&self) -> Result<TextureMap> {
        compose_reconstruction(&self.diffuse_albedo, &self.diffuse_shading()?, &self.specular)
    }

    fn len(&self) -> usize {
        self.diffuse_albedo.data().len() * 2 + self.specular.data().len() + SH_LEN
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.diffuse_albedo.data());
        v.extend_from_slice(self.normals.data());
        v.extend_from_slice(self.specular.data());
        v.extend_from_slice(self.sh.as_slice());
        v
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let n3 = self.diffuse_albedo.data().len();
        let n1 = self.specular.data().len();
        self.diffuse_albedo.data_mut().copy_from_slice(&flat[..n3]);
        self.normals.data_mut().copy_from_slice(&flat[n3..2 * n3]);
        self.specular.data_mut().copy_from_slice(&flat[2 * n3..2 * n3 + n1]);
        self.sh.0.copy_from_slice(&flat[2 * n3 + n1..]);
    }

    /// Clamps albedo to `[0, 1]`, specular to `>= 0` and renormalizes normals.
    pub fn project(&mut self) {
        self.diffuse_albedo.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self.specular.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.normals.normalize_pixels();
    }
}

/// Coarse results at refinement resolution. The specular prior is single
/// channel (luminance of the coarse specular reconstruction).
#[derive(Debug, Clone, PartialEq)]
pub struct RefinePriors {
    pub diffuse_albedo: TextureMap,
    pub normals: TextureMap,
    pub specular: TextureMap,
    pub sh: ShCoefficients,
}

impl RefinePriors {
    /// Resizes coarse maps to `width × height`; a three-channel specular map
    /// is converted to luminance.
    pub fn from_coarse(
        diffuse_albedo: &TextureMap,
        normals: &TextureMap,
        specular: &TextureMap,
        sh: &ShCoefficients,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let spec = match specular.channels() {
            3 => gray(specular)?,
            _ => specular.clone(),
        };
        let mut n = resize_bilinear(normals, width, height)?;
        n.normalize_pixels();
        Ok(RefinePriors {
            diffuse_albedo: resize_bilinear(diffuse_albedo, width, height)?,
            normals: n,
            specular: resize_bilinear(&spec, width, height)?,
            sh: *sh,
        })
    }

    /// Starting materials equal to the priors.
    pub fn to_materials(&self) -> RefinedMaterials {
        RefinedMaterials {
            diffuse_albedo: self.diffuse_albedo.clone(),
            normals: self.normals.clone(),
            specular: self.specular.clone(),
            sh: self.sh,
        }
    }

    fn check(&self, mat: &RefinedMaterials) -> Result<()> {
        let pairs = [
            (&self.diffuse_albedo, &mat.diffuse_albedo, "albedo prior"),
            (&self.normals, &mat.normals, "normal prior"),
            (&self.specular, &mat.specular, "specular prior"),
        ];
        for (a, b, what) in pairs {
            a.ensure_same_shape(b, what)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineLossWeights {
    pub w_recons: f64,
    pub w_perc: f64,
    pub w_tv: f64,
    pub w_prior: f64,
    pub w_diffuse: f64,
    pub w_normal: f64,
    pub w_specular: f64,
    pub w_sh: f64,
}

impl Default for RefineLossWeights {
    fn default() -> Self {
        RefineLossWeights {
            w_recons: 40.0,
            w_perc: 5.0,
            w_tv: 10.0,
            w_prior: 1.0,
            w_diffuse: 4.0,
            w_normal: 1.0,
            w_specular: 1.0,
            w_sh: 1.0,
        }
    }
}

impl RefineLossWeights {
    pub fn zeros() -> Self {
        RefineLossWeights {
            w_recons: 0.0,
            w_perc: 0.0,
            w_tv: 0.0,
            w_prior: 0.0,
            w_diffuse: 0.0,
            w_normal: 0.0,
            w_specular: 0.0,
            w_sh: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_recons", self.w_recons),
            ("w_perc", self.w_perc),
            ("w_tv", self.w_tv),
            ("w_prior", self.w_prior),
            ("w_diffuse", self.w_diffuse),
            ("w_normal", self.w_normal),
            ("w_specular", self.w_specular),
            ("w_sh", self.w_sh),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(invalid(format!("{name} must be finite and >= 0, got {v}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RefineTerms {
    pub total: f64,
    pub recons: f64,
    pub perc: f64,
    pub tv: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineGrad {
    pub diffuse_albedo: Vec<f64>,
    pub normals: Vec<f64>,
    pub specular: Vec<f64>,
    pub sh: [f64; SH_LEN],
}

/// Sum over dyadic scales of the total variation of `a − b`, each scale
/// divided by its pixel footprint `2^s` so every scale measures slope per
/// original texel. Zero iff the two differ by a constant (per channel).
pub fn perceptual_substitute(a: &TextureMap, b: &TextureMap) -> Result<f64> {
    a.ensure_same_shape(b, "perceptual inputs")?;
    let mut d = a.zip_map(b, |x, y| x - y)?;
    let mut total = total_variation(&d);
    for s in 1..PERCEPTUAL_SCALES {
        match box_downsample(&d) {
            Some(next) => d = next,
            None => break,
        }
        total += total_variation(&d) / (1u32 << s) as f64;
    }
    Ok(total)
}

/// Adds `scale * ∂/∂a perceptual_substitute(a, b)` into `grad`.
fn perceptual_grad(a: &TextureMap, b: &TextureMap, scale: f64, grad: &mut [f64]) -> Result<()> {
    let mut levels = vec![a.zip_map(b, |x, y| x - y)?];
    for _ in 1..PERCEPTUAL_SCALES {
        match box_downsample(levels.last().expect("nonempty")) {
            Some(next) => levels.push(next),
            None => break,
        }
    }
    // Walk from the coarsest level down, accumulating the adjoint.
    let mut carry: Option<TextureMap> = None;
    for s in (0..levels.len()).rev() {
        let lv = &levels[s];
        let mut g = match carry.take() {
            Some(c) => c.into_data(),
            None => vec![0.0; lv.data().len()],
        };
        total_variation_grad(lv, scale / (1u32 << s) as f64, &mut g);
        let g = TextureMap::new(lv.width(), lv.height(), lv.channels(), g)?;
        if s > 0 {
            let up = &levels[s - 1];
            carry = Some(box_downsample_adjoint(&g, up.width(), up.height()));
        } else {
            grad.iter_mut().zip(g.data()).for_each(|(o, v)| *o += v);
        }
    }
    Ok(())
}

fn mean_abs(a: &TextureMap, b: &TextureMap) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

/// `scale * sign(a − b) / n` per element.
fn mean_abs_grad(a: &TextureMap, b: &TextureMap, scale: f64) -> TextureMap {
    let n = a.data().len() as f64;
    a.zip_map(b, |x, y| scale * sign(x - y) / n).expect("same shape")
}

fn refine_eval(
    mat: &RefinedMaterials,
    target: &TextureMap,
    priors: &RefinePriors,
    w: &RefineLossWeights,
    blur_k: usize,
    want_grad: bool,
) -> Result<(RefineTerms, Option<RefineGrad>)> {
    mat.validate()?;
    priors.check(mat)?;
    mat.diffuse_albedo.ensure_same_shape(target, "target")?;
    w.validate()?;

    let shade = mat.diffuse_shading()?;
    let recon = compose_reconstruction(&mat.diffuse_albedo, &shade, &mat.specular)?;
    let blur_d = gaussian_blur(&mat.diffuse_albedo, blur_k)?;
    let blur_n = gaussian_blur(&mat.normals, blur_k)?;
    let blur_s = gaussian_blur(&mat.specular, blur_k)?;
    let sh_dist: f64 = mat
        .sh
        .as_slice()
        .iter()
        .zip(priors.sh.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();

    let recons = w.w_recons * mean_abs(&recon, target);
    let perc = if w.w_perc > 0.0 {
        w.w_perc * perceptual_substitute(&recon, target)?
    } else {
        0.0
    };
    let tv = w.w_tv
        * (total_variation(&mat.diffuse_albedo) + total_variation(&mat.normals) + total_variation(&mat.specular));
    let prior = w.w_prior
        * (w.w_diffuse * mean_abs(&blur_d, &priors.diffuse_albedo)
            + w.w_normal * mean_abs(&blur_n, &priors.normals)
            + w.w_specular * mean_abs(&blur_s, &priors.specular)
            + w.w_sh * sh_dist);
    let terms = RefineTerms {
        total: recons + perc + tv + prior,
        recons,
        perc,
        tv,
        prior,
    };
    if !want_grad {
        return Ok((terms, None));
    }

    // Gradient on the reconstruction, then through the clamped composition.
    let mut g_recon = mean_abs_grad(&recon, target, w.w_recons).into_data();
    if w.w_perc > 0.0 {
        perceptual_grad(&recon, target, w.w_perc, &mut g_recon)?;
    }
    let np = recon.pixel_count();
    let mut g_d = vec![0.0; np * 3];
    let mut g_shade = vec![0.0; np * 3];
    let mut g_s = vec![0.0; np];
    for i in 0..np * 3 {
        let pre = mat.diffuse_albedo.data()[i] * shade.data()[i] + mat.specular.data()[i / 3];
        if pre > 0.0 {
            g_d[i] = g_recon[i] * shade.data()[i];
            g_shade[i] = g_recon[i] * mat.diffuse_albedo.data()[i];
            g_s[i / 3] += g_recon[i];
        }
    }
    let (mut g_n, mut g_sh) = diffuse_shading_backward(&mat.normals, &mat.sh, &g_shade)?;

    total_variation_grad(&mat.diffuse_albedo, w.w_tv, &mut g_d);
    total_variation_grad(&mat.normals, w.w_tv, &mut g_n);
    total_variation_grad(&mat.specular, w.w_tv, &mut g_s);

    let wp = w.w_prior;
    let add_prior = |blurred: &TextureMap, prior: &TextureMap, k: f64, out: &mut [f64]| -> Result<()> {
        if wp * k == 0.0 {
            return Ok(());
        }
        let g = gaussian_blur_adjoint(&mean_abs_grad(blurred, prior, wp * k), blur_k)?;
        out.iter_mut().zip(g.data()).for_each(|(o, v)| *o += v);
        Ok(())
    };
    add_prior(&blur_d, &priors.diffuse_albedo, w.w_diffuse, &mut g_d)?;
    add_prior(&blur_n, &priors.normals, w.w_normal, &mut g_n)?;
    add_prior(&blur_s, &priors.specular, w.w_specular, &mut g_s)?;
    for (k, g) in g_sh.iter_mut().enumerate() {
        *g += 2.0 * wp * w.w_sh * (mat.sh.0[k] - priors.sh.0[k]);
    }
    Ok((
        terms,
        Some(RefineGrad {
            diffuse_albedo: g_d,
            normals: g_n,
            specular: g_s,
            sh: g_sh,
        }),
    ))
}

/// Refinement loss and its gradient with respect to every material map
/// and the SH coefficients. Only the refined maps are blurred before the
/// prior comparison.
pub fn refine_loss(
    mat: &RefinedMaterials,
    target: &TextureMap,
    priors: &RefinePriors,
    weights: &RefineLossWeights,
    blur_k: usize,
) -> Result<(RefineTerms, RefineGrad)> {
    let (t, g) = refine_eval(mat, target, priors, weights, blur_k, true)?;
    Ok((t, g.expect("gradient requested")))
}

pub fn refine_loss_value(
    mat: &RefinedMaterials,
    target: &TextureMap,
    priors: &RefinePriors,
    weights: &RefineLossWeights,
    blur_k: usize,
) -> Result<RefineTerms> {
    Ok(refine_eval(mat, target, priors, weights, blur_k, false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub schedule: StepDecay,
    pub blur_kernel: usize,
    pub weights: RefineLossWeights,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 500,
            schedule: StepDecay {
                lr: 1e-2,
                decay_at: Some(250),
                factor: 0.1,
            },
            blur_kernel: 11,
            weights: RefineLossWeights::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.blur_kernel == 0 || self.blur_kernel.is_multiple_of(2) {
            return Err(invalid("blur kernel must be odd and >= 1"));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub materials: RefinedMaterials,
    /// Loss before each update.
    pub trace: Vec<RefineTerms>,
}

/// Adam on all maps and SH, projecting after every step (albedo clamped to
/// `[0, 1]`, specular to `>= 0`, normals renormalized). Returns the final
/// iterate.
pub fn refine(
    init: &RefinedMaterials,
    target: &TextureMap,
    priors: &RefinePriors,
    config: &RefineConfig,
) -> Result<RefineResult> {
    config.validate()?;
    init.validate()?;
    priors.check(init)?;
    init.diffuse_albedo.ensure_same_shape(target, "target")?;
    if target.data().iter().any(|v| !v.is_finite()) {
        return Err(invalid("target contains non-finite values"));
    }
    let mut mat = init.clone();
    let mut adam = AdamState::new(mat.len());
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (terms, g) = refine_loss(&mat, target, priors, &config.weights, config.blur_kernel)?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                stage: "refine",
                step: it,
                detail: format!("non-finite loss {:?}", terms.total),
            });
        }
        trace.push(terms);
        let mut grad = Vec::with_capacity(mat.len());
        grad.extend_from_slice(&g.diffuse_albedo);
        grad.extend_from_slice(&g.normals);
        grad.extend_from_slice(&g.specular);
        grad.extend_from_slice(&g.sh);
        let mut flat = mat.to_flat();
        adam.step(&mut flat, &grad, config.schedule.at(it))?;
        mat.set_flat(&flat);
        mat.project();
    }
    Ok(RefineResult { materials: mat, trace })
}

pub fn write_refine_trace(trace: &[RefineTerms], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = Vec::new();
    writeln!(s, "iter,total,recons,perc,tv,prior").expect("write to Vec");
    for (i, t) in trace.iter().enumerate() {
        writeln!(s, "{i},{:?},{:?},{:?},{:?},{:?}", t.total, t.recons, t.perc, t.tv, t.prior).expect("write to Vec");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Checks two textures share a resolution, for callers that resize first.
pub fn ensure_resolution(tex: &TextureMap, width: usize, height: usize, what: &str) -> Result<()> {
    if tex.width() != width || tex.height() != height {
        return Err(mismatch(format!(
            "{what} is {}x{}, expected {width}x{height}",
            tex.width(),
            tex.height()
        )));
    }
    Ok(())
}
