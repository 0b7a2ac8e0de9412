use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facelayers::coarse::{fit_coarse, render_coarse, write_coarse_trace};
use facelayers::config::PipelineConfig;
use facelayers::face_model::{CoarseParams, LinearFaceModel};
use facelayers::makeup::{
    alpha_blend, apply_makeup_render, extract_makeup, interpolate_alpha, transfer, write_extraction_trace,
    MakeupLayers,
};
use facelayers::pca::{build_pca, clamp_makeup, extended_albedo, sample_makeup, MakeupPcaModel};
use facelayers::pipeline::{
    load_inputs, load_materials, read_json, render_panels, run_pipeline, save_materials, skin_prior_for,
    synthetic_scene, write_json, write_panels,
};
use facelayers::refine::{refine, write_refine_trace, RefinePriors};
use facelayers::texture::diffuse_fill;
use facelayers::texture::io::{read_mask, read_texture, write_texture};
use facelayers::{Error, Result};

const THREADS_ENV: &str = "FACELAYERS_THREADS";

#[derive(Parser)]
#[command(name = "facelayers", version, about = "Decompose UV face textures into shading, skin and makeup layers")]
struct Cli {
    /// JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the effective config as JSON and exit.
    #[arg(long)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled synthetic scene (model, target, mask, landmarks, regions, truth).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Fit model coefficients, lighting and pose to an unwrapped texture.
    FitCoarse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Parameters JSON; the loss trace goes next to it as `<stem>_trace.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill invalid texels of a texture by diffusion.
    Complete {
        #[arg(long)]
        texture: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine albedo, normals, specular and lighting against a completed texture.
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        texture: PathBuf,
        /// Output directory for the materials and `refine_trace.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a diffuse albedo into bare skin, makeup colour and alpha.
    Extract {
        /// Materials directory written by `refine`.
        #[arg(long)]
        materials: PathBuf,
        /// Bare-skin prior texture. Without it the model's albedo subspace is fitted.
        #[arg(long, conflicts_with = "model")]
        prior: Option<PathBuf>,
        #[arg(long, required_unless_present = "prior")]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Put one face's makeup on another face's bare skin.
    Transfer {
        /// Layers directory of the face receiving the makeup.
        #[arg(long)]
        target: PathBuf,
        /// Layers directory of the face wearing the makeup.
        #[arg(long)]
        source: PathBuf,
        /// Target materials; when given the result is relit with the target's shading.
        #[arg(long)]
        materials: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fade makeup out by shifting the alpha matte toward bare skin.
    Interpolate {
        #[arg(long)]
        layers: PathBuf,
        /// 0 keeps the makeup, 1 removes it.
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a PCA model from premultiplied makeup of several layer directories.
    BuildPca {
        #[arg(long, required = true, num_args = 1..)]
        layers: Vec<PathBuf>,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a makeup texture from a PCA model.
    SamplePca {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scale: Option<f64>,
        /// Add the sample to this albedo instead of writing the makeup alone.
        #[arg(long)]
        albedo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the bare, bare_makeup, shaded and full panels.
    Render {
        #[arg(long)]
        materials: PathBuf,
        #[arg(long)]
        layers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole pipeline. Inputs come from the config paths, or the synthetic scene when none are set.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_io() => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if cli.dump_config {
        println!("{}", config.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no command given (see --help)".into()));
    };
    init_threads()?;
    match command {
        Command::Synth { out, seed, resolution } => {
            let scene = synthetic_scene(seed.unwrap_or(config.seed), resolution.unwrap_or(config.resolution))?;
            scene.save(&out)?;
            println!("wrote synthetic scene to {}", out.display());
        }
        Command::FitCoarse {
            model,
            target,
            mask,
            landmarks,
            out,
        } => {
            let inputs = load_inputs(&model, &target, &mask, landmarks.as_deref(), None)?;
            let fit = fit_coarse(
                &inputs.model,
                &inputs.target,
                &inputs.mask,
                inputs.landmarks.as_deref(),
                &CoarseParams::initial(),
                &config.coarse,
            )?;
            write_json(&fit.params, &out)?;
            write_coarse_trace(&fit.trace, sibling(&out, "_trace.csv"))?;
            println!("best total loss {:.6}, photo {:.6}", fit.best.total, fit.best.photo);
        }
        Command::Complete { texture, mask, out } => {
            let tex = read_texture(&texture)?;
            let mask = read_mask(&mask)?;
            mask.ensure_matches(&tex)?;
            if mask.is_all_valid() && same_extension(&texture, &out) {
                std::fs::copy(&texture, &out).map_err(|e| io_error(&out, e))?;
            } else {
                write_texture(&diffuse_fill(&tex, &mask, config.completion.iterations)?, &out)?;
            }
            println!("filled {} texels", mask.weights().len() - mask.valid_count());
        }
        Command::Refine {
            model,
            params,
            texture,
            out,
        } => {
            let model = LinearFaceModel::load(&model)?;
            let params: CoarseParams = read_json(&params)?;
            params.validate()?;
            let target = read_texture(&texture)?;
            let render = render_coarse(&model, &model.raster()?, &params)?;
            let priors = RefinePriors::from_coarse(
                &render.diffuse_albedo.clamp(0.0, 1.0),
                &render.normals,
                &render.specular,
                &params.sh,
                target.width(),
                target.height(),
            )?;
            let result = refine(&priors.to_materials(), &target, &priors, &config.refine)?;
            save_materials(&result.materials, &out)?;
            write_refine_trace(&result.trace, out.join("refine_trace.csv"))?;
            if let Some(last) = result.trace.last() {
                println!("final total loss {:.6}", last.total);
            }
        }
        Command::Extract {
            materials,
            prior,
            model,
            out,
        } => {
            let materials = load_materials(&materials)?;
            let prior = match (prior, model) {
                (Some(p), _) => read_texture(&p)?,
                (None, Some(m)) => skin_prior_for(&LinearFaceModel::load(&m)?, &materials.diffuse_albedo, &config)?,
                (None, None) => unreachable!("clap requires --prior or --model"),
            };
            let ex = extract_makeup(&materials.diffuse_albedo, &prior, &config.extract)?;
            ex.layers.save(&out)?;
            write_extraction_trace(&ex.trace, out.join("extract_trace.csv"))?;
            write_texture(&alpha_blend(&ex.layers)?, out.join("preview.png"))?;
            if let Some(last) = ex.trace.last() {
                println!("final total loss {:.6}", last.total);
            }
        }
        Command::Transfer {
            target,
            source,
            materials,
            out,
        } => {
            let target = MakeupLayers::load(&target)?;
            let source = MakeupLayers::load(&source)?;
            let result = match materials {
                Some(dir) => {
                    let m = load_materials(&dir)?;
                    apply_makeup_render(&target.bare_skin, &source, &m.diffuse_shading()?, &m.specular)?
                }
                None => transfer(&target.bare_skin, &source)?,
            };
            write_texture(&result, &out)?;
        }
        Command::Interpolate { layers, sigma, out } => {
            let mut layers = MakeupLayers::load(&layers)?;
            layers.alpha = interpolate_alpha(&layers.alpha, sigma)?;
            write_texture(&alpha_blend(&layers)?, &out)?;
        }
        Command::BuildPca { layers, components, out } => {
            let samples = layers
                .iter()
                .map(|dir| MakeupLayers::load(dir).map(|l| l.premultiplied_makeup()))
                .collect::<Result<Vec<_>>>()?;
            let model = build_pca(&samples, components.unwrap_or(config.pca.components))?;
            model.save(&out)?;
            println!("eigenvalues {:?}", model.eigenvalues());
        }
        Command::SamplePca {
            model,
            seed,
            scale,
            albedo,
            out,
        } => {
            let model = MakeupPcaModel::load(&model)?;
            let sample = sample_makeup(&model, seed.unwrap_or(config.seed), scale.unwrap_or(config.pca.scale))?;
            let result = match albedo {
                Some(path) => extended_albedo(&read_texture(&path)?, &sample)?,
                None => clamp_makeup(&sample),
            };
            write_texture(&result, &out)?;
        }
        Command::Render { materials, layers, out } => {
            let m = load_materials(&materials)?;
            let layers = MakeupLayers::load(&layers)?;
            write_panels(&render_panels(&m, &layers)?, &out)?;
        }
        Command::Run { out } => {
            let out = out
                .or_else(|| config.paths.out.clone())
                .ok_or_else(|| Error::Config("run needs --out or paths.out".into()))?;
            let outputs = match (&config.paths.model, &config.paths.target, &config.paths.mask) {
                (Some(model), Some(target), Some(mask)) => {
                    let inputs = load_inputs(model, target, mask, config.paths.landmarks.as_deref(), None)?;
                    run_pipeline(
                        &inputs.model,
                        &inputs.target,
                        &inputs.mask,
                        inputs.landmarks.as_deref(),
                        &config,
                    )?
                }
                (None, None, None) => {
                    let scene = synthetic_scene(config.seed, config.resolution)?;
                    scene.save(out.join("scene"))?;
                    run_pipeline(&scene.model, &scene.target, &scene.mask, Some(&scene.landmarks), &config)?
                }
                _ => return Err(Error::Config("paths.model, paths.target and paths.mask go together".into())),
            };
            outputs.save(&out)?;
            write_json(&config, out.join("config.json"))?;
            println!(
                "coarse best total {:.6}, photo {:.6}",
                outputs.coarse.best.total, outputs.coarse.best.photo
            );
        }
    }
    Ok(())
}

/// `dir/stem<suffix>` for an output path `dir/stem.ext`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn same_extension(a: &Path, b: &Path) -> bool {
    let ext = |p: &Path| p.extension().map(|e| e.to_ascii_lowercase());
    ext(a).is_some() && ext(a) == ext(b)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
