//! Coarse reconstruction: fit the linear face model, pose, SH lighting and
//! light stage to an unwrapped target texture by first-order optimization.
//!
//! Rendering happens in UV space: the model mesh supplies a normal map via
//! its UV chart, and the reconstruction is
//! `max(0, D ⊙ diffuse_shading + S ⊙ specular_shading)`. Shading uses
//! model-space normals, so pose only enters through the landmark term.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::face_model::{
    diffuse_base, eval_diffuse_albedo, eval_geometry, eval_specular_albedo, project_landmarks,
    rotation_jacobian, rotation_matrix, CoarseParams, LinearFaceModel, ParamBlock,
    DIFFUSE_COMPONENTS,
};
use crate::mesh::{vertex_normals, vertex_normals_backward, UvRaster};
use crate::optim::AdamState;
use crate::shading::{
    compose_reconstruction, diffuse_shading, diffuse_shading_backward, specular_gray,
    specular_shading_backward, Vec3, STAGE_LIGHTS,
};
use crate::texture::filter::sign;
use crate::texture::{TextureMap, UvMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseLossWeights {
    pub w_photo: f64,
    pub w_lan: f64,
    pub w_skin: f64,
    pub w_reg: f64,
    pub w_alpha: f64,
    pub w_beta: f64,
    pub w_gamma: f64,
    pub w_delta: f64,
    /// Shared weight of the SH and light-stage intensity norms.
    pub w_light: f64,
}

impl Default for CoarseLossWeights {
    fn default() -> Self {
        CoarseLossWeights {
            w_photo: 19.2,
            w_lan: 5.0,
            w_skin: 3.0,
            w_reg: 3e-4,
            w_alpha: 1.0,
            w_beta: 0.8,
            w_gamma: 1.7e-2,
            w_delta: 1.0,
            w_light: 1.0,
        }
    }
}

impl CoarseLossWeights {
    /// Every weight zero; handy for switching on a single term.
    pub fn zeros() -> Self {
        CoarseLossWeights {
            w_photo: 0.0,
            w_lan: 0.0,
            w_skin: 0.0,
            w_reg: 0.0,
            w_alpha: 0.0,
            w_beta: 0.0,
            w_gamma: 0.0,
            w_delta: 0.0,
            w_light: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_photo", self.w_photo),
            ("w_lan", self.w_lan),
            ("w_skin", self.w_skin),
            ("w_reg", self.w_reg),
            ("w_alpha", self.w_alpha),
            ("w_beta", self.w_beta),
            ("w_gamma", self.w_gamma),
            ("w_delta", self.w_delta),
            ("w_light", self.w_light),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(invalid(format!("{name} must be finite and >= 0, got {v}"))),
            None => Ok(()),
        }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoarseTerms {
    pub total: f64,
    pub photo: f64,
    pub lan: f64,
    pub skin: f64,
    pub reg: f64,
}

/// The six quadratic penalties, unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerParts {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub stage_intensity: f64,
    pub sh: f64,
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn regularizer_parts(p: &CoarseParams) -> RegularizerParts {
    RegularizerParts {
        alpha: sq(&p.alpha),
        beta: sq(&p.beta),
        gamma: sq(&p.gamma),
        delta: sq(&p.delta),
        stage_intensity: sq(&p.stage.intensities),
        sh: sq(p.sh.as_slice()),
    }
}

/// Everything the renderer produces for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseRender {
    pub geometry: Vec<Vec3>,
    pub vertex_normals: Vec<Vec3>,
    pub normals: TextureMap,
    pub diffuse_albedo: TextureMap,
    pub specular_albedo: TextureMap,
    pub diffuse_shading: TextureMap,
    /// One-channel specular shading.
    pub specular_shading: TextureMap,
    /// `specular_albedo ⊙ specular_shading`, three channels.
    pub specular: TextureMap,
    pub reconstruction: TextureMap,
}

/// Renders the coarse reconstruction in UV space.
pub fn render_coarse(model: &LinearFaceModel, raster: &UvRaster, p: &CoarseParams) -> Result<CoarseRender> {
    let geometry = eval_geometry(model, &p.alpha, &p.beta)?;
    let vn = vertex_normals(&geometry, &model.topology)?;
    let normals = raster.interpolate_normals(&model.topology, &vn);
    let diffuse_albedo = eval_diffuse_albedo(model, &p.gamma, &p.c_gain, &p.c_bias)?;
    let specular_albedo = eval_specular_albedo(model, &p.delta)?;
    let dshade = diffuse_shading(&normals, &p.sh)?;
    let sshade = specular_gray(&normals, &p.stage);
    let specular = TextureMap::from_raw(
        normals.width(),
        normals.height(),
        3,
        specular_albedo
            .data()
            .iter()
            .enumerate()
            .map(|(i, s)| s * sshade.data()[i / 3])
            .collect(),
    );
    let reconstruction = compose_reconstruction(&diffuse_albedo, &dshade, &specular)?;
    Ok(CoarseRender {
        geometry,
        vertex_normals: vn,
        normals,
        diffuse_albedo,
        specular_albedo,
        diffuse_shading: dshade,
        specular_shading: sshade,
        specular,
        reconstruction,
    })
}

/// The coarse objective bound to one model, target and mask.
pub struct CoarseObjective<'a> {
    model: &'a LinearFaceModel,
    raster: UvRaster,
    target: &'a TextureMap,
    /// Mask weight times model UV coverage.
    weights_px: Vec<f64>,
    weight_sum: f64,
    target_mean: [f64; 3],
    landmarks: Option<&'a [[f64; 2]]>,
    weights: CoarseLossWeights,
}

impl<'a> CoarseObjective<'a> {
    pub fn new(
        model: &'a LinearFaceModel,
        target: &'a TextureMap,
        mask: &UvMask,
        landmarks: Option<&'a [[f64; 2]]>,
        weights: CoarseLossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        target.ensure_channels(3, "target")?;
        if target.width() != model.width() || target.height() != model.height() {
            return Err(mismatch(format!(
                "target is {}x{}, model textures are {}x{}",
                target.width(),
                target.height(),
                model.width(),
                model.height()
            )));
        }
        mask.ensure_matches(target)?;
        if let Some(l) = landmarks {
            if l.len() != model.landmark_indices.len() {
                return Err(mismatch(format!(
                    "{} landmarks given, model defines {}",
                    l.len(),
                    model.landmark_indices.len()
                )));
            }
        }
        let raster = model.raster()?;
        let cover = raster.coverage();
        let weights_px: Vec<f64> = mask
            .weights()
            .iter()
            .zip(cover.weights())
            .map(|(a, b)| a * b)
            .collect();
        let weight_sum: f64 = weights_px.iter().sum();
        if weight_sum <= 0.0 {
            return Err(Error::Empty("photo mask (no valid texel inside the model's UV chart)".into()));
        }
        let mut target_mean = [0.0; 3];
        for (p, w) in weights_px.iter().enumerate() {
            for c in 0..3 {
                target_mean[c] += w * target.pixel(p)[c];
            }
        }
        target_mean.iter_mut().for_each(|m| *m /= weight_sum);
        Ok(CoarseObjective {
            model,
            raster,
            target,
            weights_px,
            weight_sum,
            target_mean,
            landmarks,
            weights,
        })
    }

    pub fn raster(&self) -> &UvRaster {
        &self.raster
    }

    pub fn has_landmarks(&self) -> bool {
        self.landmarks.is_some()
    }

    pub fn weights(&self) -> &CoarseLossWeights {
        &self.weights
    }

    /// Masked mean color of the target over the photo region.
    pub fn target_mean(&self) -> [f64; 3] {
        self.target_mean
    }

    /// Masked mean color of a texture over the photo region.
    pub fn masked_mean(&self, tex: &TextureMap) -> [f64; 3] {
        let mut m = [0.0; 3];
        for (p, w) in self.weights_px.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for c in 0..3 {
                m[c] += w * tex.pixel(p)[c];
            }
        }
        m.map(|v| v / self.weight_sum)
    }

    /// Masked mean absolute difference between a render and the target.
    pub fn photo_l1(&self, render: &TextureMap) -> f64 {
        let mut s = 0.0;
        for (p, w) in self.weights_px.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for c in 0..3 {
                s += w * (render.pixel(p)[c] - self.target.pixel(p)[c]).abs();
            }
        }
        s / (3.0 * self.weight_sum)
    }

    fn terms(&self, p: &CoarseParams, r: &CoarseRender) -> Result<CoarseTerms> {
        let w = &self.weights;
        let photo = w.w_photo * self.photo_l1(&r.reconstruction);
        let lan = match self.landmarks {
            Some(l) if w.w_lan > 0.0 => {
                let proj = project_landmarks(&r.geometry, &self.model.landmark_indices, p.rotation, p.translation)?;
                let s: f64 = proj
                    .iter()
                    .zip(l)
                    .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
                    .sum();
                w.w_lan * s / l.len().max(1) as f64
            }
            _ => 0.0,
        };
        let dm = self.masked_mean(&r.diffuse_albedo);
        let skin = w.w_skin * (0..3).map(|c| (dm[c] - self.target_mean[c]).abs()).sum::<f64>() / 3.0;
        let rp = regularizer_parts(p);
        let reg = w.w_reg
            * (w.w_alpha * rp.alpha
                + w.w_beta * rp.beta
                + w.w_gamma * rp.gamma
                + w.w_delta * rp.delta
                + w.w_light * rp.stage_intensity
                + w.w_light * rp.sh);
        Ok(CoarseTerms {
            total: photo + lan + skin + reg,
            photo,
            lan,
            skin,
            reg,
        })
    }

    pub fn render(&self, p: &CoarseParams) -> Result<CoarseRender> {
        render_coarse(self.model, &self.raster, p)
    }

    pub fn loss(&self, p: &CoarseParams) -> Result<CoarseTerms> {
        let r = self.render(p)?;
        self.terms(p, &r)
    }

    /// Loss terms and the gradient with respect to [`CoarseParams::to_flat`].
    pub fn loss_and_grad(&self, p: &CoarseParams) -> Result<(CoarseTerms, Vec<f64>)> {
        let model = self.model;
        let w = &self.weights;
        let r = self.render(p)?;
        let terms = self.terms(p, &r)?;
        let npx = r.normals.pixel_count();
        let mut g = vec![0.0; CoarseParams::LEN];

        // Photo term through the clamped composition.
        let mut g_recon = vec![0.0; npx * 3];
        if w.w_photo > 0.0 {
            let s = w.w_photo / (3.0 * self.weight_sum);
            for (px, wp) in self.weights_px.iter().enumerate() {
                if *wp == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let i = px * 3 + c;
                    let pre = r.diffuse_albedo.data()[i] * r.diffuse_shading.data()[i] + r.specular.data()[i];
                    if pre > 0.0 {
                        g_recon[i] = s * wp * sign(pre - self.target.data()[i]);
                    }
                }
            }
        }
        let mut g_diffuse: Vec<f64> = g_recon
            .iter()
            .zip(r.diffuse_shading.data())
            .map(|(a, b)| a * b)
            .collect();
        let g_dshade: Vec<f64> = g_recon
            .iter()
            .zip(r.diffuse_albedo.data())
            .map(|(a, b)| a * b)
            .collect();
        let g_spec_albedo: Vec<f64> = g_recon
            .iter()
            .enumerate()
            .map(|(i, a)| a * r.specular_shading.data()[i / 3])
            .collect();
        let g_sshade: Vec<f64> = (0..npx)
            .map(|px| (0..3).map(|c| g_recon[px * 3 + c] * r.specular_albedo.data()[px * 3 + c]).sum())
            .collect();

        // Skin tone term.
        if w.w_skin > 0.0 {
            let dm = self.masked_mean(&r.diffuse_albedo);
            for c in 0..3 {
                let s = w.w_skin / 3.0 * sign(dm[c] - self.target_mean[c]) / self.weight_sum;
                if s == 0.0 {
                    continue;
                }
                for (px, wp) in self.weights_px.iter().enumerate() {
                    g_diffuse[px * 3 + c] += s * wp;
                }
            }
        }

        // Albedo coefficients, gain and bias.
        let base = diffuse_base(model, &p.gamma)?;
        let mut g_base = g_diffuse.clone();
        for px in 0..npx {
            for c in 0..3 {
                let i = px * 3 + c;
                g_base[i] *= p.c_gain[c];
                g[ParamBlock::Gain.range().start + c] += g_diffuse[i] * base[i];
                g[ParamBlock::Bias.range().start + c] += g_diffuse[i];
            }
        }
        g[ParamBlock::Gamma.range()].copy_from_slice(&model.basis_diffuse.apply_transpose(&g_base)?);
        g[ParamBlock::Delta.range()].copy_from_slice(&model.basis_specular.apply_transpose(&g_spec_albedo)?);

        // Shading back to the normal map, SH and stage.
        let (gn_d, g_sh) = diffuse_shading_backward(&r.normals, &p.sh, &g_dshade)?;
        let (gn_s, g_stage) = specular_shading_backward(&r.normals, &p.stage, &g_sshade)?;
        g[ParamBlock::Sh.range()].copy_from_slice(&g_sh);
        g[ParamBlock::Intensities.range()].copy_from_slice(&g_stage.intensities);
        g[ParamBlock::Shininess.range()].copy_from_slice(&g_stage.shininess);
        let dir0 = ParamBlock::Directions.range().start;
        for j in 0..STAGE_LIGHTS {
            g[dir0 + 3 * j..dir0 + 3 * j + 3].copy_from_slice(&g_stage.directions[j]);
        }
        let g_map: Vec<f64> = gn_d.iter().zip(&gn_s).map(|(a, b)| a + b).collect();
        let g_vn = self
            .raster
            .interpolate_normals_backward(&model.topology, &r.vertex_normals, &g_map);
        let mut g_pos = vertex_normals_backward(&r.geometry, &model.topology, &g_vn)?;

        // Landmarks: pose and vertex positions.
        if let (Some(l), true) = (self.landmarks, w.w_lan > 0.0) {
            let rot = rotation_matrix(p.rotation);
            let drot = rotation_jacobian(p.rotation);
            let proj = project_landmarks(&r.geometry, &model.landmark_indices, p.rotation, p.translation)?;
            let s = 2.0 * w.w_lan / l.len().max(1) as f64;
            for ((pp, q), &vi) in proj.iter().zip(l).zip(&model.landmark_indices) {
                let gp = Vector3::new(s * (pp[0] - q[0]), s * (pp[1] - q[1]), 0.0);
                let v = r.geometry[vi];
                let gv = Vector3::new(v[0], v[1], v[2]);
                g[ParamBlock::Translation.range().start] += gp.x;
                g[ParamBlock::Translation.range().start + 1] += gp.y;
                for k in 0..3 {
                    g[ParamBlock::Rotation.range().start + k] += gp.dot(&(drot[k] * gv));
                }
                let back = rot.transpose() * gp;
                for k in 0..3 {
                    g_pos[vi][k] += back[k];
                }
            }
        }
        let g_flat: Vec<f64> = g_pos.concat();
        g[ParamBlock::Alpha.range()].copy_from_slice(&model.basis_id.apply_transpose(&g_flat)?);
        g[ParamBlock::Beta.range()].copy_from_slice(&model.basis_ex.apply_transpose(&g_flat)?);

        // Quadratic regularizers.
        if w.w_reg > 0.0 {
            let add = |g: &mut [f64], blk: ParamBlock, vals: &[f64], k: f64| {
                for (gi, v) in g[blk.range()].iter_mut().zip(vals) {
                    *gi += 2.0 * w.w_reg * k * v;
                }
            };
            add(&mut g, ParamBlock::Alpha, &p.alpha, w.w_alpha);
            add(&mut g, ParamBlock::Beta, &p.beta, w.w_beta);
            add(&mut g, ParamBlock::Gamma, &p.gamma, w.w_gamma);
            add(&mut g, ParamBlock::Delta, &p.delta, w.w_delta);
            add(&mut g, ParamBlock::Intensities, &p.stage.intensities, w.w_light);
            add(&mut g, ParamBlock::Sh, p.sh.as_slice(), w.w_light);
        }
        Ok((terms, g))
    }
}

/// Loss and analytic gradient in one call.
pub fn coarse_loss(
    params: &CoarseParams,
    model: &LinearFaceModel,
    target: &TextureMap,
    mask: &UvMask,
    landmarks: Option<&[[f64; 2]]>,
    weights: CoarseLossWeights,
) -> Result<(CoarseTerms, Vec<f64>)> {
    CoarseObjective::new(model, target, mask, landmarks, weights)?.loss_and_grad(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseFitConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Recorded with the results; the fit itself has no random component.
    pub seed: u64,
    /// When off, gain and bias stay at 1 and 0 and the skin term is dropped.
    pub skin_tone: bool,
    pub weights: CoarseLossWeights,
}

impl Default for CoarseFitConfig {
    fn default() -> Self {
        CoarseFitConfig {
            iterations: 1000,
            lr: 1e-2,
            seed: 0,
            skin_tone: true,
            weights: CoarseLossWeights::default(),
        }
    }
}

impl CoarseFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("coarse lr must be > 0"));
        }
        self.weights.validate()
    }

    /// Effective weights after applying the skin-tone toggle.
    pub fn effective_weights(&self) -> CoarseLossWeights {
        let mut w = self.weights;
        if !self.skin_tone {
            w.w_skin = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFit {
    /// Best parameters seen.
    pub params: CoarseParams,
    /// Loss at each iteration, evaluated before that iteration's update.
    pub trace: Vec<CoarseTerms>,
    pub best: CoarseTerms,
}

/// Renormalizes light directions and keeps intensities and shininess in
/// their valid ranges.
fn project(p: &mut CoarseParams) {
    p.stage.renormalize();
    for v in &mut p.stage.intensities {
        *v = v.max(0.0);
    }
    for v in &mut p.stage.shininess {
        *v = v.max(1.0);
    }
}

/// Runs Adam from `init`. Pose is frozen without landmarks (it is
/// unobservable in UV space); gain and bias are frozen at 1 and 0 with the
/// skin-tone toggle off. On a non-finite loss the best parameters are
/// restored and the learning rate halved once; a second failure aborts.
pub fn fit_coarse(
    model: &LinearFaceModel,
    target: &TextureMap,
    mask: &UvMask,
    landmarks: Option<&[[f64; 2]]>,
    init: &CoarseParams,
    config: &CoarseFitConfig,
) -> Result<CoarseFit> {
    config.validate()?;
    init.validate()?;
    let objective = CoarseObjective::new(model, target, mask, landmarks, config.effective_weights())?;
    let mut frozen = vec![false; CoarseParams::LEN];
    let mut freeze = |blk: ParamBlock| frozen[blk.range()].iter_mut().for_each(|f| *f = true);
    if landmarks.is_none() {
        freeze(ParamBlock::Rotation);
        freeze(ParamBlock::Translation);
    }
    let mut start = init.clone();
    if !config.skin_tone {
        freeze(ParamBlock::Gain);
        freeze(ParamBlock::Bias);
        start.c_gain = [1.0; 3];
        start.c_bias = [0.0; 3];
    }

    let mut params = start.clone();
    let mut best = (f64::INFINITY, start, CoarseTerms::default());
    let mut adam = AdamState::new(CoarseParams::LEN);
    let mut lr = config.lr;
    let mut retried = false;
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (terms, mut grad) = objective.loss_and_grad(&params)?;
        if !terms.total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            if retried {
                return Err(Error::Divergence {
                    stage: "coarse fit",
                    step: it,
                    detail: format!("non-finite loss {:?}", terms.total),
                });
            }
            retried = true;
            params = best.1.clone();
            adam.reset();
            lr *= 0.5;
            continue;
        }
        trace.push(terms);
        if terms.total < best.0 {
            best = (terms.total, params.clone(), terms);
        }
        for (gi, f) in grad.iter_mut().zip(&frozen) {
            if *f {
                *gi = 0.0;
            }
        }
        let mut flat = params.to_flat();
        adam.step(&mut flat, &grad, lr)?;
        params = params.with_flat(&flat)?;
        project(&mut params);
    }
    if config.iterations > 0 {
        let terms = objective.loss(&params)?;
        if terms.total.is_finite() && terms.total < best.0 {
            best = (terms.total, params, terms);
        }
    } else {
        best.2 = objective.loss(&best.1)?;
    }
    Ok(CoarseFit {
        params: best.1,
        trace,
        best: best.2,
    })
}

pub fn write_coarse_trace(trace: &[CoarseTerms], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = Vec::new();
    writeln!(s, "iter,total,photo,lan,skin,reg").expect("write to Vec");
    for (i, t) in trace.iter().enumerate() {
        writeln!(s, "{i},{:?},{:?},{:?},{:?},{:?}", t.total, t.photo, t.lan, t.skin, t.reg).expect("write to Vec");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Fits the albedo coefficients, gain and bias of the model to a diffuse
/// albedo map under a masked L1 loss. L1 lets localized outliers such as
/// makeup pass through without dragging the fit, so the result serves as a
/// bare-skin prior. Returns the fitted albedo clamped to `[0, 1]`.
pub fn fit_albedo_prior(
    model: &LinearFaceModel,
    albedo: &TextureMap,
    mask: &UvMask,
    iterations: usize,
    lr: f64,
) -> Result<TextureMap> {
    albedo.ensure_channels(3, "albedo")?;
    if albedo.width() != model.width() || albedo.height() != model.height() {
        return Err(mismatch("albedo resolution differs from the model"));
    }
    mask.ensure_matches(albedo)?;
    let cover = model.coverage()?;
    let w: Vec<f64> = mask.weights().iter().zip(cover.weights()).map(|(a, b)| a * b).collect();
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Empty("albedo prior mask".into()));
    }
    let reg = CoarseLossWeights::default();
    let gamma_reg = reg.w_reg * reg.w_gamma;
    let n = DIFFUSE_COMPONENTS + 6;
    let mut x = vec![0.0; n];
    x[DIFFUSE_COMPONENTS..DIFFUSE_COMPONENTS + 3].fill(1.0);
    let mut adam = AdamState::new(n);
    let eval = |x: &[f64]| -> Result<(TextureMap, Vec<f64>)> {
        let gamma = &x[..DIFFUSE_COMPONENTS];
        let gain = &x[DIFFUSE_COMPONENTS..DIFFUSE_COMPONENTS + 3];
        let bias = &x[DIFFUSE_COMPONENTS + 3..];
        Ok((eval_diffuse_albedo(model, gamma, gain, bias)?, diffuse_base(model, gamma)?))
    };
    for _ in 0..iterations {
        let (d, base) = eval(&x)?;
        let mut g_d = vec![0.0; d.data().len()];
        let mut grad = vec![0.0; n];
        for (px, wp) in w.iter().enumerate() {
            if *wp == 0.0 {
                continue;
            }
            for c in 0..3 {
                let i = px * 3 + c;
                let s = wp * sign(d.data()[i] - albedo.data()[i]) / (3.0 * wsum);
                g_d[i] = s * x[DIFFUSE_COMPONENTS + c];
                grad[DIFFUSE_COMPONENTS + c] += s * base[i];
                grad[DIFFUSE_COMPONENTS + 3 + c] += s;
            }
        }
        let g_gamma = model.basis_diffuse.apply_transpose(&g_d)?;
        for k in 0..DIFFUSE_COMPONENTS {
            grad[k] = g_gamma[k] + 2.0 * gamma_reg * x[k];
        }
        adam.step(&mut x, &grad, lr)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            stage: "albedo prior",
            step: iterations,
            detail: "non-finite coefficients".into(),
        });
    }
    Ok(eval(&x)?.0.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::synthetic_model;
    use crate::shading::ShCoefficients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> LinearFaceModel {
        synthetic_model(5, 162, 24).unwrap()
    }

    fn varied_params(seed: u64) -> CoarseParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = CoarseParams::initial();
        let mut fill = |v: &mut [f64], s: f64| v.iter_mut().for_each(|x| *x = rng.random_range(-s..s));
        fill(&mut p.alpha, 1.0);
        fill(&mut p.beta, 1.0);
        fill(&mut p.gamma, 1.0);
        fill(&mut p.delta, 1.0);
        fill(&mut p.rotation, 0.2);
        fill(&mut p.translation, 0.1);
        p.sh = ShCoefficients::ambient(0.8);
        for c in 0..3 {
            p.sh.0[c * 9 + 2] = 0.3;
            p.sh.0[c * 9 + 3] = 0.1;
        }
        p.stage.intensities[0] = 0.3;
        p.stage.shininess[0] = 20.0;
        p
    }

    #[test]
    fn exact_target_gives_zero_loss() {
        let m = model();
        let p = varied_params(1);
        let raster = m.raster().unwrap();
        let t = render_coarse(&m, &raster, &p).unwrap().reconstruction;
        let mask = UvMask::full(m.width(), m.height());
        let mut w = CoarseLossWeights::zeros();
        w.w_photo = 19.2;
        let (terms, g) = coarse_loss(&p, &m, &t, &mask, None, w).unwrap();
        assert_eq!(terms.total, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_regularizer_term() {
        let m = model();
        let mut p = CoarseParams::initial();
        p.alpha[0] = 1.0;
        let t = TextureMap::filled(m.width(), m.height(), 3, 0.5);
        let mask = UvMask::full(m.width(), m.height());
        let mut w = CoarseLossWeights::zeros();
        w.w_reg = 3e-4;
        w.w_alpha = 1.0;
        let (terms, _) = coarse_loss(&p, &m, &t, &mask, None, w).unwrap();
        assert!((terms.total - 3e-4).abs() < 1e-15);
    }

    #[test]
    fn regularizer_is_sum_of_parts() {
        let m = model();
        let p = varied_params(2);
        let t = TextureMap::filled(m.width(), m.height(), 3, 0.5);
        let mask = UvMask::full(m.width(), m.height());
        let full = CoarseLossWeights {
            w_photo: 0.0,
            w_lan: 0.0,
            w_skin: 0.0,
            ..CoarseLossWeights::default()
        };
        let total = coarse_loss(&p, &m, &t, &mask, None, full).unwrap().0.reg;
        let only = |f: fn(&mut CoarseLossWeights)| {
            let mut w = CoarseLossWeights::zeros();
            w.w_reg = full.w_reg;
            f(&mut w);
            coarse_loss(&p, &m, &t, &mask, None, w).unwrap().0.reg
        };
        let parts = only(|w| w.w_alpha = 1.0)
            + only(|w| w.w_beta = 0.8)
            + only(|w| w.w_gamma = 1.7e-2)
            + only(|w| w.w_delta = 1.0)
            + only(|w| w.w_light = 1.0);
        assert!((total - parts).abs() <= 1e-12 * total.abs());
        let rp = regularizer_parts(&p);
        let direct = 3e-4
            * (rp.alpha + 0.8 * rp.beta + 1.7e-2 * rp.gamma + rp.delta + rp.stage_intensity + rp.sh);
        assert!((total - direct).abs() <= 1e-12 * total.abs());
    }

    #[test]
    fn skin_term_on_mean_colors() {
        let m = model();
        let mut p = CoarseParams::initial();
        // Zero gain and a flat bias make the albedo exactly (0.5, 0.5, 0.5).
        p.c_gain = [0.0; 3];
        p.c_bias = [0.5; 3];
        let t = TextureMap::from_fn(m.width(), m.height(), 3, |_, _, c| [0.6, 0.5, 0.4][c]);
        let mask = UvMask::full(m.width(), m.height());
        let mut w = CoarseLossWeights::zeros();
        w.w_skin = 3.0;
        let (terms, _) = coarse_loss(&p, &m, &t, &mask, None, w).unwrap();
        assert!((terms.skin - 3.0 * 0.2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_and_empty_mask_rejected() {
        let m = model();
        let p = CoarseParams::initial();
        let t = TextureMap::filled(m.width(), m.height(), 3, 0.5);
        let full = UvMask::full(m.width(), m.height());
        let w = CoarseLossWeights {
            w_skin: -1.0,
            ..CoarseLossWeights::default()
        };
        assert!(coarse_loss(&p, &m, &t, &full, None, w).is_err());
        let empty = UvMask::empty(m.width(), m.height());
        assert!(matches!(
            coarse_loss(&p, &m, &t, &empty, None, CoarseLossWeights::default()),
            Err(Error::Empty(_))
        ));
    }

    fn directional_check(seed: u64, with_landmarks: bool) {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = varied_params(seed);
        // Residuals are kept at least 0.05 away from zero so no texel crosses
        // the L1 kink inside the finite-difference stencil.
        let raster = m.raster().unwrap();
        let r = render_coarse(&m, &raster, &p).unwrap().reconstruction;
        let data: Vec<f64> = r
            .data()
            .iter()
            .map(|v| {
                let off = 0.05 + rng.random_range(0.0..0.1);
                if rng.random_bool(0.5) {
                    v + off
                } else {
                    v - off
                }
            })
            .collect();
        let t = TextureMap::new(r.width(), r.height(), 3, data).unwrap();
        let mask = UvMask::full(m.width(), m.height());
        let lm: Vec<[f64; 2]> = (0..m.landmark_indices.len())
            .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            .collect();
        let landmarks = with_landmarks.then_some(lm.as_slice());
        let w = CoarseLossWeights {
            w_reg: 0.05,
            ..CoarseLossWeights::default()
        };
        let obj = CoarseObjective::new(&m, &t, &mask, landmarks, w).unwrap();
        let (_, g) = obj.loss_and_grad(&p).unwrap();
        let x = p.to_flat();
        let u: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-4;
        let at = |s: f64| {
            let v: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + s * b).collect();
            obj.loss(&p.with_flat(&v).unwrap()).unwrap().total
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
        assert!(rel <= 1e-3, "seed {seed}: fd {fd} analytic {an} rel {rel}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..6 {
            directional_check(seed, seed % 2 == 0);
        }
    }

    #[test]
    fn zero_iterations_return_init() {
        let m = model();
        let p = varied_params(3);
        let t = TextureMap::filled(m.width(), m.height(), 3, 0.5);
        let mask = UvMask::full(m.width(), m.height());
        let cfg = CoarseFitConfig {
            iterations: 0,
            ..CoarseFitConfig::default()
        };
        let fit = fit_coarse(&m, &t, &mask, None, &p, &cfg).unwrap();
        assert_eq!(fit.params, p);
        assert!(fit.trace.is_empty());
    }

    #[test]
    fn pose_frozen_without_landmarks_and_trace_csv() {
        let m = model();
        let mut init = CoarseParams::initial();
        init.translation = [0.1, -0.2, 0.0];
        let t = TextureMap::filled(m.width(), m.height(), 3, 0.4);
        let mask = UvMask::full(m.width(), m.height());
        let cfg = CoarseFitConfig {
            iterations: 30,
            ..CoarseFitConfig::default()
        };
        let fit = fit_coarse(&m, &t, &mask, None, &init, &cfg).unwrap();
        assert_eq!(fit.params.translation, init.translation);
        assert_eq!(fit.params.rotation, init.rotation);
        assert!(fit.best.total <= fit.trace[0].total);
        for d in fit.params.stage.directions {
            assert!((d.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_coarse_trace(&fit.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,total,photo,lan,skin,reg\n"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn doubling_photo_weight_doubles_trace() {
        let m = model();
        let t = render_coarse(&m, &m.raster().unwrap(), &varied_params(4)).unwrap().reconstruction;
        let mask = UvMask::full(m.width(), m.height());
        let run = |w_photo: f64| {
            let mut w = CoarseLossWeights::zeros();
            w.w_photo = w_photo;
            let cfg = CoarseFitConfig {
                iterations: 20,
                weights: w,
                ..CoarseFitConfig::default()
            };
            fit_coarse(&m, &t, &mask, None, &CoarseParams::initial(), &cfg).unwrap().trace
        };
        // The loss is positively homogeneous in the weight: bit-exact.
        for seed in 0..4 {
            let p = varied_params(seed);
            let loss = |w_photo: f64| {
                let mut w = CoarseLossWeights::zeros();
                w.w_photo = w_photo;
                coarse_loss(&p, &m, &t, &mask, None, w).unwrap().0.total
            };
            assert_eq!(loss(2.0), 2.0 * loss(1.0));
        }
        // Adam is scale invariant except for its epsilon, so the fitted
        // trajectories agree closely but not bit for bit.
        let (a, b) = (run(1.0), run(2.0));
        assert_eq!(a[0].total * 2.0, b[0].total);
        for (x, y) in a.iter().zip(&b) {
            assert!((y.total - 2.0 * x.total).abs() <= 1e-3 * y.total.abs());
        }
    }

    #[test]
    fn disabled_skin_tone_pins_gain_and_bias() {
        let m = model();
        let t = TextureMap::filled(m.width(), m.height(), 3, 0.3);
        let mask = UvMask::full(m.width(), m.height());
        let cfg = CoarseFitConfig {
            iterations: 20,
            skin_tone: false,
            ..CoarseFitConfig::default()
        };
        let mut init = CoarseParams::initial();
        init.c_gain = [2.0; 3];
        let fit = fit_coarse(&m, &t, &mask, None, &init, &cfg).unwrap();
        assert_eq!(fit.params.c_gain, [1.0; 3]);
        assert_eq!(fit.params.c_bias, [0.0; 3]);
        assert_eq!(fit.params.to_flat().len(), CoarseParams::LEN);
    }

    #[test]
    fn albedo_prior_recovers_model_albedo() {
        let m = model();
        let mut gamma = vec![0.0; DIFFUSE_COMPONENTS];
        gamma[0] = 1.0;
        gamma[3] = -0.5;
        let truth = eval_diffuse_albedo(&m, &gamma, &[1.05, 0.95, 0.9], &[0.02, 0.0, -0.01]).unwrap();
        let cover = m.coverage().unwrap();
        let fit = fit_albedo_prior(&m, &truth, &cover, 300, 1e-2).unwrap();
        let mut err = 0.0;
        for p in 0..truth.pixel_count() {
            if cover.is_valid(p) {
                for c in 0..3 {
                    err += (fit.pixel(p)[c] - truth.pixel(p)[c]).abs();
                }
            }
        }
        err /= 3.0 * cover.valid_count() as f64;
        assert!(err < 0.01, "mean abs error {err}");
    }
}
