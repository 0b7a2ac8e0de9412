use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use facelayers::coarse::render_coarse;
use facelayers::config::PipelineConfig;
use facelayers::face_model::{CoarseParams, LinearFaceModel};
use facelayers::makeup::MakeupLayers;
use facelayers::pipeline::read_json;
use facelayers::texture::io::{read_mask, read_texture, write_mask, write_texture};
use facelayers::texture::{TextureMap, UvMask};
use tempfile::TempDir;

fn facelayers(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_facelayers"));
    cmd.args(args).env_remove("FACELAYERS_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Iteration counts small enough for a test at 32×32.
const QUICK: &str = r#"{
  "resolution": 32,
  "coarse": {"iterations": 400},
  "completion": {"iterations": 300},
  "refine": {"iterations": 30},
  "albedo_prior": {"iterations": 50},
  "extract": {"iterations": 60}
}"#;

fn ok(out: &Output) {
    assert_eq!(
        code(out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_input_file_exits_with_io_code() {
    let dir = TempDir::new().unwrap();
    let out = facelayers(
        &[
            "complete",
            "--texture",
            p(&dir.path().join("absent.pfm")),
            "--mask",
            p(&dir.path().join("absent.png")),
            "--out",
            p(&dir.path().join("o.pfm")),
        ],
        &[],
    );
    assert_eq!(code(&out), 1);
    let out = facelayers(&["--config", p(&dir.path().join("none.json")), "--dump-config"], &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn negative_weight_and_unknown_key_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"coarse": {"weights": {"w_photo": -1.0}}}"#);
    assert_eq!(code(&facelayers(&["--config", p(&bad), "--dump-config"], &[])), 2);
    let bad = write_config(dir.path(), "bad2.json", r#"{"extract": {"weights": {"w_fit": -2.0}}}"#);
    let out = facelayers(&["--config", p(&bad), "synth", "--out", p(&dir.path().join("s"))], &[]);
    assert_eq!(code(&out), 2);
    let typo = write_config(dir.path(), "typo.json", r#"{"sede": 1}"#);
    assert_eq!(code(&facelayers(&["--config", p(&typo), "--dump-config"], &[])), 2);
}

#[test]
fn bad_thread_count_and_bad_sigma_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let out = facelayers(&["synth", "--out", p(&dir.path().join("s"))], &[("FACELAYERS_THREADS", "zero")]);
    assert_eq!(code(&out), 2);
    MakeupLayers {
        bare_skin: TextureMap::filled(4, 4, 3, 0.5),
        makeup_color: TextureMap::filled(4, 4, 3, 0.2),
        alpha: TextureMap::filled(4, 4, 1, 0.5),
    }
    .save(dir.path().join("l"))
    .unwrap();
    let out = facelayers(
        &[
            "interpolate",
            "--layers",
            p(&dir.path().join("l")),
            "--sigma",
            "1.5",
            "--out",
            p(&dir.path().join("o.pfm")),
        ],
        &[],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn dumped_config_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = facelayers(&["--dump-config"], &[]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(PipelineConfig::from_json(&text).unwrap(), PipelineConfig::default());
    let path = write_config(dir.path(), "dumped.json", &text);
    let again = facelayers(&["--config", p(&path), "--dump-config"], &[]);
    ok(&again);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);

    let partial = write_config(dir.path(), "quick.json", QUICK);
    let dumped = facelayers(&["--config", p(&partial), "--dump-config"], &[]);
    let cfg = PipelineConfig::from_json(&String::from_utf8(dumped.stdout).unwrap()).unwrap();
    assert_eq!(cfg.resolution, 32);
    assert_eq!(cfg.refine.blur_kernel, PipelineConfig::default().refine.blur_kernel);
}

#[test]
fn complete_copies_fully_valid_textures_and_fills_holes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let tex = TextureMap::from_fn(16, 12, 3, |x, y, c| (x * 3 + y * 7 + c) as f64 / 100.0);
    write_texture(&tex, d.join("t.pfm")).unwrap();
    write_mask(&UvMask::full(16, 12), d.join("full.png")).unwrap();
    ok(&facelayers(
        &["complete", "--texture", p(&d.join("t.pfm")), "--mask", p(&d.join("full.png")), "--out", p(&d.join("copy.pfm"))],
        &[],
    ));
    assert_eq!(std::fs::read(d.join("t.pfm")).unwrap(), std::fs::read(d.join("copy.pfm")).unwrap());

    let constant = TextureMap::from_fn(16, 12, 3, |x, _, c| if x < 8 { [0.3, 0.5, 0.7][c] } else { 0.0 });
    write_texture(&constant, d.join("c.pfm")).unwrap();
    write_mask(&UvMask::from_fn(16, 12, |x, _| x < 8), d.join("half.png")).unwrap();
    ok(&facelayers(
        &["complete", "--texture", p(&d.join("c.pfm")), "--mask", p(&d.join("half.png")), "--out", p(&d.join("f.pfm"))],
        &[],
    ));
    let filled = read_texture(d.join("f.pfm")).unwrap();
    for y in 0..12 {
        for x in 0..16 {
            for c in 0..3 {
                assert!((filled.get(x, y, c) - [0.3f32, 0.5, 0.7][c] as f64).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn synthetic_round_trip_through_every_command() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "quick.json", QUICK);
    let c = p(&cfg);
    let scene = d.join("scene");
    ok(&facelayers(&["--config", c, "synth", "--out", p(&scene)], &[]));

    let params = d.join("params.json");
    ok(&facelayers(
        &[
            "--config",
            c,
            "fit-coarse",
            "--model",
            p(&scene.join("model.flm")),
            "--target",
            p(&scene.join("target.pfm")),
            "--mask",
            p(&scene.join("mask.png")),
            "--landmarks",
            p(&scene.join("landmarks.csv")),
            "--out",
            p(&params),
        ],
        &[],
    ));
    assert!(d.join("params_trace.csv").exists());
    let model = LinearFaceModel::load(scene.join("model.flm")).unwrap();
    let fitted: CoarseParams = read_json(&params).unwrap();
    let render = render_coarse(&model, &model.raster().unwrap(), &fitted).unwrap();
    let target = read_texture(scene.join("target.pfm")).unwrap();
    let mask = read_mask(scene.join("mask.png")).unwrap();
    let mut sum = 0.0;
    for pix in (0..32 * 32).filter(|&q| mask.is_valid(q)) {
        for ch in 0..3 {
            sum += (render.reconstruction.data()[pix * 3 + ch] - target.data()[pix * 3 + ch]).abs();
        }
    }
    let photo = sum / (3 * mask.valid_count()) as f64;
    // The lipstick is outside the model's albedo span, so the residual floor is above zero.
    assert!(photo < 0.02, "photo L1 {photo}");

    let completed = d.join("completed.pfm");
    ok(&facelayers(
        &["--config", c, "complete", "--texture", p(&scene.join("target.pfm")), "--mask", p(&scene.join("mask.png")), "--out", p(&completed)],
        &[],
    ));
    let materials = d.join("materials");
    ok(&facelayers(
        &["--config", c, "refine", "--model", p(&scene.join("model.flm")), "--params", p(&params), "--texture", p(&completed), "--out", p(&materials)],
        &[],
    ));
    let layers = d.join("layers");
    ok(&facelayers(
        &["--config", c, "extract", "--materials", p(&materials), "--model", p(&scene.join("model.flm")), "--out", p(&layers)],
        &[],
    ));
    let extracted = MakeupLayers::load(&layers).unwrap();

    let removed = d.join("removed.pfm");
    ok(&facelayers(
        &["interpolate", "--layers", p(&layers), "--sigma", "1", "--out", p(&removed)],
        &[],
    ));
    assert_eq!(read_texture(&removed).unwrap(), extracted.bare_skin);

    let panels = d.join("panels");
    ok(&facelayers(&["render", "--materials", p(&materials), "--layers", p(&layers), "--out", p(&panels)], &[]));
    for name in ["bare", "bare_makeup", "shaded", "full"] {
        assert!(panels.join(format!("{name}.png")).exists(), "{name}");
    }

    let relit = d.join("relit.pfm");
    ok(&facelayers(
        &["transfer", "--target", p(&scene.join("truth_layers")), "--source", p(&layers), "--materials", p(&materials), "--out", p(&relit)],
        &[],
    ));
    assert!(read_texture(&relit).unwrap().data().iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn transfer_of_makeup_free_source_leaves_target_unchanged() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let target = MakeupLayers {
        bare_skin: TextureMap::from_fn(8, 8, 3, |x, y, c| 0.3 + 0.05 * ((x + y + c) % 5) as f64),
        makeup_color: TextureMap::filled(8, 8, 3, 0.1),
        alpha: TextureMap::filled(8, 8, 1, 0.2),
    };
    let source = MakeupLayers {
        bare_skin: TextureMap::filled(8, 8, 3, 0.6),
        makeup_color: TextureMap::filled(8, 8, 3, 0.9),
        alpha: TextureMap::filled(8, 8, 1, 1.0),
    };
    target.save(d.join("t")).unwrap();
    source.save(d.join("s")).unwrap();
    ok(&facelayers(
        &["transfer", "--target", p(&d.join("t")), "--source", p(&d.join("s")), "--out", p(&d.join("o.pfm"))],
        &[],
    ));
    assert_eq!(std::fs::read(d.join("t/bare.pfm")).unwrap(), std::fs::read(d.join("o.pfm")).unwrap());
}

#[test]
fn pca_commands_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut dirs = Vec::new();
    for s in 0..4u32 {
        let name = d.join(format!("l{s}"));
        MakeupLayers {
            bare_skin: TextureMap::filled(6, 6, 3, 0.5),
            makeup_color: TextureMap::from_fn(6, 6, 3, |x, _, c| ((x as u32 + s + c as u32) % 4) as f64 / 4.0),
            alpha: TextureMap::from_fn(6, 6, 1, |_, y, _| ((y as u32 * (s + 1)) % 3) as f64 / 2.0),
        }
        .save(&name)
        .unwrap();
        dirs.push(name);
    }
    let mut args = vec!["build-pca", "--components", "3", "--out", "/dev/null"];
    let model = d.join("m.mkp");
    args[4] = p(&model);
    args.push("--layers");
    args.extend(dirs.iter().map(|x| p(x)));
    ok(&facelayers(&args, &[]));
    for out in ["a.pfm", "b.pfm"] {
        ok(&facelayers(
            &["sample-pca", "--model", p(&model), "--seed", "9", "--out", p(&d.join(out))],
            &[],
        ));
    }
    assert_eq!(std::fs::read(d.join("a.pfm")).unwrap(), std::fs::read(d.join("b.pfm")).unwrap());
    let other = d.join("c.pfm");
    ok(&facelayers(&["sample-pca", "--model", p(&model), "--seed", "10", "--out", p(&other)], &[]));
    assert_ne!(std::fs::read(d.join("a.pfm")).unwrap(), std::fs::read(&other).unwrap());
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn pipeline_run_is_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "quick.json", QUICK);
    let mut trees = Vec::new();
    for (i, threads) in ["1", "4", "4"].iter().enumerate() {
        let out = d.join(format!("run{i}"));
        ok(&facelayers(
            &["--config", p(&cfg), "run", "--out", p(&out)],
            &[("FACELAYERS_THREADS", threads)],
        ));
        trees.push(tree_bytes(&out));
    }
    assert!(trees[0].len() > 20, "{} files", trees[0].len());
    assert!(trees[0].iter().any(|(f, _)| f.ends_with("layers/alpha.png")));
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[1], trees[2]);
}
