//! End-to-end pipeline and the bundled synthetic scene.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coarse::{fit_albedo_prior, fit_coarse, render_coarse, write_coarse_trace, CoarseFit, CoarseRender};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::face_model::{
    eval_geometry, project_landmarks, read_landmarks_csv, synthetic_model, write_landmarks_csv, CoarseParams,
    LinearFaceModel,
};
use crate::makeup::{alpha_blend, extract_makeup, write_extraction_trace, Extraction, MakeupLayers};
use crate::refine::{refine, write_refine_trace, RefinePriors, RefineResult, RefinedMaterials};
use crate::shading::{compose_reconstruction, ShCoefficients};
use crate::texture::io::{read_mask, read_regions, read_texture, write_mask, write_regions, write_texture};
use crate::texture::{diffuse_fill, FaceRegions, TextureMap, UvMask};

/// Saturated lipstick used by the synthetic scene.
pub const SYNTHETIC_LIPSTICK: [f64; 3] = [0.6, 0.03, 0.08];

/// Vertex count requested from the synthetic model generator.
pub const SYNTHETIC_VERTICES: usize = 642;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub model: LinearFaceModel,
    /// Unwrapped texture; zero where `mask` is invalid.
    pub target: TextureMap,
    /// Coverage minus a simulated self-occluded band.
    pub mask: UvMask,
    pub landmarks: Vec<[f64; 2]>,
    pub regions: FaceRegions,
    pub truth: CoarseParams,
    /// Ground-truth layers; blending them gives the rendered albedo.
    pub layers: MakeupLayers,
}

/// Known coarse parameters for the synthetic scene.
pub fn synthetic_truth(seed: u64) -> CoarseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut p = CoarseParams::initial();
    let mut normal = |s: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        s * z
    };
    p.alpha.iter_mut().for_each(|v| *v = normal(0.5));
    p.beta.iter_mut().for_each(|v| *v = normal(0.5));
    p.gamma.iter_mut().for_each(|v| *v = normal(0.7));
    p.delta.iter_mut().for_each(|v| *v = normal(0.5));
    p.c_gain = [1.08, 0.95, 0.9];
    p.c_bias = [0.02, 0.0, -0.02];
    p.rotation = [0.05, -0.1, 0.03];
    p.translation = [0.02, -0.03, 0.0];
    for c in 0..3 {
        p.sh.0[c * 9 + 1] = 0.08;
        p.sh.0[c * 9 + 2] = 0.2;
        p.sh.0[c * 9 + 3] = -0.05;
    }
    p.stage.intensities[0] = 0.15;
    p.stage.shininess[0] = 40.0;
    p
}

/// Renders a made-up face wearing lipstick, with the right 15% of the UV
/// chart treated as self-occluded.
pub fn synthetic_scene(seed: u64, resolution: usize) -> Result<SyntheticScene> {
    let model = synthetic_model(seed, SYNTHETIC_VERTICES, resolution)?;
    let raster = model.raster()?;
    let cover = raster.coverage();
    let truth = synthetic_truth(seed);
    let render = render_coarse(&model, &raster, &truth)?;
    let regions = FaceRegions::synthetic(resolution, resolution)?;
    let (w, h) = (resolution, resolution);
    let lips = regions.lips.intersect(&cover)?;
    let layers = MakeupLayers {
        bare_skin: render.diffuse_albedo.clamp(0.0, 1.0),
        makeup_color: TextureMap::from_fn(w, h, 3, |_, _, c| SYNTHETIC_LIPSTICK[c]),
        alpha: TextureMap::from_fn(w, h, 1, |x, y, _| if lips.is_valid(y * w + x) { 0.0 } else { 1.0 }),
    };
    let albedo = alpha_blend(&layers)?;
    let full = compose_reconstruction(&albedo, &render.diffuse_shading, &render.specular)?;
    let visible = UvMask::from_fn(w, h, |x, _| (x as f64 + 0.5) / (w as f64) < 0.85);
    let mask = cover.intersect(&visible)?;
    let target = TextureMap::from_fn(w, h, 3, |x, y, c| if mask.is_valid(y * w + x) { full.get(x, y, c) } else { 0.0 });
    let geometry = eval_geometry(&model, &truth.alpha, &truth.beta)?;
    let landmarks = project_landmarks(&geometry, &model.landmark_indices, truth.rotation, truth.translation)?;
    Ok(SyntheticScene {
        model,
        target,
        mask,
        landmarks,
        regions,
        truth,
        layers,
    })
}

impl SyntheticScene {
    /// Writes `model.flm`, `target.pfm`, `mask.png`, `landmarks.csv`,
    /// `regions/`, `truth.json` and `truth_layers/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(dir.join("model.flm"))?;
        write_texture(&self.target, dir.join("target.pfm"))?;
        write_mask(&self.mask, dir.join("mask.png"))?;
        write_landmarks_csv(&self.landmarks, dir.join("landmarks.csv"))?;
        write_regions(&self.regions, dir.join("regions"))?;
        write_json(&self.truth, dir.join("truth.json"))?;
        self.layers.save(dir.join("truth_layers"))
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Inputs of a pipeline run read from disk.
pub struct LoadedInputs {
    pub model: LinearFaceModel,
    pub target: TextureMap,
    pub mask: UvMask,
    pub landmarks: Option<Vec<[f64; 2]>>,
    pub regions: Option<FaceRegions>,
}

pub fn load_inputs(
    model: &Path,
    target: &Path,
    mask: &Path,
    landmarks: Option<&Path>,
    regions: Option<&Path>,
) -> Result<LoadedInputs> {
    Ok(LoadedInputs {
        model: LinearFaceModel::load(model)?,
        target: read_texture(target)?,
        mask: read_mask(mask)?,
        landmarks: landmarks.map(read_landmarks_csv).transpose()?,
        regions: regions.map(read_regions).transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub coarse: CoarseFit,
    pub coarse_render: CoarseRender,
    /// Target with its invalid texels filled (or the target itself when
    /// completion is off).
    pub completed: TextureMap,
    /// Refined materials, or the coarse ones when refinement is off.
    pub materials: RefinedMaterials,
    pub refine_trace: Option<RefineResult>,
    pub skin_prior: Option<TextureMap>,
    pub extraction: Option<Extraction>,
}

/// Coarse fit, texture completion, refinement and makeup extraction.
pub fn run_pipeline(
    model: &LinearFaceModel,
    target: &TextureMap,
    mask: &UvMask,
    landmarks: Option<&[[f64; 2]]>,
    config: &PipelineConfig,
) -> Result<PipelineOutputs> {
    config.validate()?;
    let coarse = fit_coarse(model, target, mask, landmarks, &CoarseParams::initial(), &config.coarse)?;
    let raster = model.raster()?;
    let coarse_render = render_coarse(model, &raster, &coarse.params)?;
    let completed = if config.stages.complete {
        diffuse_fill(target, mask, config.completion.iterations)?
    } else {
        target.clone()
    };
    let (w, h) = (completed.width(), completed.height());
    let priors = RefinePriors::from_coarse(
        &coarse_render.diffuse_albedo.clamp(0.0, 1.0),
        &coarse_render.normals,
        &coarse_render.specular,
        &coarse.params.sh,
        w,
        h,
    )?;
    let (materials, refine_trace) = if config.stages.refine {
        let r = refine(&priors.to_materials(), &completed, &priors, &config.refine)?;
        (r.materials.clone(), Some(r))
    } else {
        (priors.to_materials(), None)
    };
    let (skin_prior, extraction) = if config.stages.extract {
        let prior = skin_prior_for(model, &materials.diffuse_albedo, config)?;
        let ex = extract_makeup(&materials.diffuse_albedo, &prior, &config.extract)?;
        (Some(prior), Some(ex))
    } else {
        (None, None)
    };
    Ok(PipelineOutputs {
        coarse,
        coarse_render,
        completed,
        materials,
        refine_trace,
        skin_prior,
        extraction,
    })
}

/// Bare-skin prior: the model's albedo subspace fitted to `albedo` inside
/// the UV coverage; outside it the albedo itself, so no makeup is inferred
/// off the face.
pub fn skin_prior_for(model: &LinearFaceModel, albedo: &TextureMap, config: &PipelineConfig) -> Result<TextureMap> {
    let cover = model.coverage()?;
    let fitted = fit_albedo_prior(
        model,
        albedo,
        &cover,
        config.albedo_prior.iterations,
        config.albedo_prior.lr,
    )?;
    let w = albedo.width();
    Ok(TextureMap::from_fn(w, albedo.height(), 3, |x, y, c| {
        if cover.is_valid(y * w + x) {
            fitted.get(x, y, c)
        } else {
            albedo.get(x, y, c).clamp(0.0, 1.0)
        }
    }))
}

impl PipelineOutputs {
    /// Writes every stage result under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&self.coarse.params, dir.join("coarse_params.json"))?;
        write_coarse_trace(&self.coarse.trace, dir.join("coarse_trace.csv"))?;
        write_texture(&self.completed, dir.join("completed.pfm"))?;
        save_materials(&self.materials, dir.join("materials"))?;
        if let Some(r) = &self.refine_trace {
            write_refine_trace(&r.trace, dir.join("refine_trace.csv"))?;
        }
        if let Some(p) = &self.skin_prior {
            write_texture(p, dir.join("skin_prior.pfm"))?;
        }
        if let Some(ex) = &self.extraction {
            ex.layers.save(dir.join("layers"))?;
            write_extraction_trace(&ex.trace, dir.join("extract_trace.csv"))?;
            write_texture(&alpha_blend(&ex.layers)?, dir.join("layers").join("preview.png"))?;
            write_panels(&render_panels(&self.materials, &ex.layers)?, dir.join("panels"))?;
        }
        Ok(())
    }
}

/// Writes `diffuse.pfm`, `normals.pfm`, `specular.pfm` and `sh.json`.
pub fn save_materials(m: &RefinedMaterials, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_texture(&m.diffuse_albedo, dir.join("diffuse.pfm"))?;
    write_texture(&m.normals, dir.join("normals.pfm"))?;
    write_texture(&m.specular, dir.join("specular.pfm"))?;
    write_json(&m.sh, dir.join("sh.json"))
}

pub fn load_materials(dir: impl AsRef<Path>) -> Result<RefinedMaterials> {
    let dir = dir.as_ref();
    let sh: ShCoefficients = read_json(dir.join("sh.json"))?;
    let m = RefinedMaterials {
        diffuse_albedo: read_texture(dir.join("diffuse.pfm"))?,
        normals: read_texture(dir.join("normals.pfm"))?,
        specular: read_texture(dir.join("specular.pfm"))?,
        sh,
    };
    m.validate()?;
    Ok(m)
}

pub fn write_panels(panels: &[(&str, TextureMap)], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, tex) in panels {
        write_texture(tex, dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

/// The four presentation panels: bare skin, bare skin with makeup, that
/// times diffuse shading, and the full render with specular added.
pub fn render_panels(m: &RefinedMaterials, layers: &MakeupLayers) -> Result<Vec<(&'static str, TextureMap)>> {
    let made_up = crate::makeup::transfer(&layers.bare_skin, layers)?;
    let shading = m.diffuse_shading()?;
    let no_spec = TextureMap::zeros(m.width(), m.height(), 1);
    Ok(vec![
        ("bare", layers.bare_skin.clone()),
        ("bare_makeup", made_up.clone()),
        ("shaded", compose_reconstruction(&made_up, &shading, &no_spec)?),
        ("full", compose_reconstruction(&made_up, &shading, &m.specular)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.coarse.iterations = 60;
        cfg.refine.iterations = 20;
        cfg.extract.iterations = 40;
        cfg.albedo_prior.iterations = 40;
        cfg.completion.iterations = 200;
        cfg
    }

    #[test]
    fn scene_is_consistent() {
        let s = synthetic_scene(3, 32).unwrap();
        assert_eq!(s.target.width(), 32);
        assert_eq!(s.landmarks.len(), s.model.landmark_indices.len());
        assert!(s.mask.valid_count() > 0);
        assert!(s.mask.valid_count() < s.model.coverage().unwrap().valid_count());
        for p in 0..32 * 32 {
            if !s.mask.is_valid(p) {
                assert!(s.target.pixel(p).iter().all(|&v| v == 0.0));
            }
        }
        assert!(s.layers.alpha.data().contains(&0.0));
        assert_eq!(synthetic_scene(3, 32).unwrap(), s);
    }

    #[test]
    fn pipeline_runs_and_respects_toggles() {
        let s = synthetic_scene(4, 32).unwrap();
        let cfg = quick_config();
        let out = run_pipeline(&s.model, &s.target, &s.mask, Some(&s.landmarks), &cfg).unwrap();
        assert_eq!(out.coarse.trace.len(), 60);
        assert!(out.refine_trace.is_some() && out.extraction.is_some());
        assert!(out.completed.data().iter().all(|v| v.is_finite()));
        let mut off = cfg.clone();
        off.stages.refine = false;
        off.stages.extract = false;
        off.stages.complete = false;
        let out2 = run_pipeline(&s.model, &s.target, &s.mask, Some(&s.landmarks), &off).unwrap();
        assert!(out2.refine_trace.is_none() && out2.extraction.is_none());
        assert_eq!(out2.completed, s.target);
    }

    #[test]
    fn outputs_and_scene_write_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_scene(5, 24).unwrap();
        s.save(dir.path().join("scene")).unwrap();
        let inputs = load_inputs(
            &dir.path().join("scene/model.flm"),
            &dir.path().join("scene/target.pfm"),
            &dir.path().join("scene/mask.png"),
            Some(&dir.path().join("scene/landmarks.csv")),
            Some(&dir.path().join("scene/regions")),
        )
        .unwrap();
        assert_eq!(inputs.regions.unwrap(), s.regions);
        assert_eq!(inputs.mask, s.mask);
        let out = run_pipeline(&inputs.model, &inputs.target, &inputs.mask, inputs.landmarks.as_deref(), &quick_config()).unwrap();
        out.save(dir.path().join("out")).unwrap();
        for f in ["coarse_params.json", "materials/sh.json", "layers/alpha.png", "panels/full.png", "refine_trace.csv"] {
            assert!(dir.path().join("out").join(f).exists(), "{f}");
        }
        let m = load_materials(dir.path().join("out/materials")).unwrap();
        assert!(m.diffuse_albedo.max_abs_diff(&out.materials.diffuse_albedo).unwrap() < 1e-6);
        let p: CoarseParams = read_json(dir.path().join("out/coarse_params.json")).unwrap();
        assert_eq!(p, out.coarse.params);
    }
}
