//! Alpha-blended makeup layers: compositing, transfer, interpolation,
//! optimization-based extraction and the histogram-matching metric.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::optim::AdamState;
use crate::shading::compose_reconstruction;
use crate::texture::filter::sign;
use crate::texture::io::{read_linear_png, read_texture, write_linear_png, write_texture};
use crate::texture::{resize_bilinear, total_variation, total_variation_grad, FaceRegions, TextureKind, TextureMap, UvMask};

/// Bare skin, makeup color and a scalar matte. `alpha = 1` means bare skin.
#[derive(Debug, Clone, PartialEq)]
pub struct MakeupLayers {
    pub bare_skin: TextureMap,
    pub makeup_color: TextureMap,
    pub alpha: TextureMap,
}

impl MakeupLayers {
    pub fn validate(&self) -> Result<()> {
        self.bare_skin.ensure_channels(3, "bare skin")?;
        self.makeup_color.ensure_channels(3, "makeup color")?;
        self.alpha.ensure_channels(1, "alpha")?;
        self.bare_skin.ensure_same_shape(&self.makeup_color, "bare skin vs makeup color")?;
        self.bare_skin.ensure_same_size(&self.alpha, "bare skin vs alpha")?;
        self.bare_skin.check_kind(TextureKind::Unit)?;
        self.makeup_color.check_kind(TextureKind::Unit)?;
        self.alpha.check_kind(TextureKind::Unit)
    }

    pub fn width(&self) -> usize {
        self.bare_skin.width()
    }

    pub fn height(&self) -> usize {
        self.bare_skin.height()
    }

    /// Resamples all three layers (bilinear).
    pub fn resized(&self, width: usize, height: usize) -> Result<MakeupLayers> {
        Ok(MakeupLayers {
            bare_skin: resize_bilinear(&self.bare_skin, width, height)?,
            makeup_color: resize_bilinear(&self.makeup_color, width, height)?,
            alpha: resize_bilinear(&self.alpha, width, height)?,
        })
    }

    /// The makeup contribution `(1 - A) * makeup_color`, the form collected
    /// for the statistical makeup model.
    pub fn premultiplied_makeup(&self) -> TextureMap {
        let a = self.alpha.data();
        TextureMap::from_fn(self.width(), self.height(), 3, |x, y, c| {
            (1.0 - a[y * self.width() + x]) * self.makeup_color.get(x, y, c)
        })
    }

    /// Writes `bare.pfm`, `makeup.pfm` and `alpha.png` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_texture(&self.bare_skin, dir.join("bare.pfm"))?;
        write_texture(&self.makeup_color, dir.join("makeup.pfm"))?;
        write_linear_png(&self.alpha, dir.join("alpha.png"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<MakeupLayers> {
        let dir = dir.as_ref();
        let layers = MakeupLayers {
            bare_skin: read_texture(dir.join("bare.pfm"))?,
            makeup_color: read_texture(dir.join("makeup.pfm"))?,
            alpha: read_linear_png(dir.join("alpha.png"))?,
        };
        layers.validate()?;
        Ok(layers)
    }
}

fn blend_into(bare: &TextureMap, makeup: &TextureMap, alpha: &TextureMap) -> TextureMap {
    let a = alpha.data();
    let b = bare.data();
    let m = makeup.data();
    let data = b
        .iter()
        .zip(m)
        .enumerate()
        .map(|(i, (&b, &m))| {
            let t = a[i / 3];
            // The clamp only removes rounding so the result stays inside the
            // segment; endpoints are already exact.
            (t * b + (1.0 - t) * m).clamp(b.min(m), b.max(m))
        })
        .collect();
    TextureMap::new(bare.width(), bare.height(), 3, data).expect("shape checked by caller")
}

/// `A * bare + (1 - A) * makeup`, with `A` broadcast over channels.
pub fn alpha_blend(layers: &MakeupLayers) -> Result<TextureMap> {
    layers.validate()?;
    Ok(blend_into(&layers.bare_skin, &layers.makeup_color, &layers.alpha))
}

/// Composites the source's makeup onto another identity's bare skin. Source
/// layers are resampled to the target resolution when they differ.
pub fn transfer(target_bare: &TextureMap, source: &MakeupLayers) -> Result<TextureMap> {
    target_bare.ensure_channels(3, "target bare skin")?;
    target_bare.check_kind(TextureKind::Unit)?;
    source.validate()?;
    let src = if source.width() != target_bare.width() || source.height() != target_bare.height() {
        source.resized(target_bare.width(), target_bare.height())?
    } else {
        source.clone()
    };
    target_bare.ensure_same_shape(&src.makeup_color, "target vs resampled makeup")?;
    Ok(blend_into(target_bare, &src.makeup_color, &src.alpha))
}

/// Shifts the matte toward bare skin: `clamp(A + sigma, 0, 1)`. `sigma = 1`
/// removes the makeup entirely.
pub fn interpolate_alpha(alpha: &TextureMap, sigma: f64) -> Result<TextureMap> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(invalid(format!("sigma must be in [0, 1], got {sigma}")));
    }
    alpha.ensure_channels(1, "alpha")?;
    Ok(alpha.map(|a| (a + sigma).clamp(0.0, 1.0)))
}

/// Illumination-aware render of `bare` wearing `layers`' makeup.
pub fn apply_makeup_render(
    bare: &TextureMap,
    layers: &MakeupLayers,
    shading: &TextureMap,
    specular: &TextureMap,
) -> Result<TextureMap> {
    compose_reconstruction(&transfer(bare, layers)?, shading, specular)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionWeights {
    pub w_fit: f64,
    pub w_skin_prior: f64,
    pub w_tv_alpha: f64,
    pub w_tv_makeup: f64,
    pub w_alpha_sparse: f64,
}

impl Default for ExtractionWeights {
    fn default() -> Self {
        ExtractionWeights {
            w_fit: 20.0,
            w_skin_prior: 4.0,
            w_tv_alpha: 8.0,
            w_tv_makeup: 8.0,
            w_alpha_sparse: 1.0,
        }
    }
}

impl ExtractionWeights {
    pub fn zeros() -> Self {
        ExtractionWeights {
            w_fit: 0.0,
            w_skin_prior: 0.0,
            w_tv_alpha: 0.0,
            w_tv_makeup: 0.0,
            w_alpha_sparse: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_fit", self.w_fit),
            ("w_skin_prior", self.w_skin_prior),
            ("w_tv_alpha", self.w_tv_alpha),
            ("w_tv_makeup", self.w_tv_makeup),
            ("w_alpha_sparse", self.w_alpha_sparse),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Recorded for reproducibility; extraction has no random component.
    pub seed: u64,
    pub weights: ExtractionWeights,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            iterations: 800,
            lr: 1e-2,
            seed: 0,
            weights: ExtractionWeights::default(),
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("extraction learning rate must be > 0"));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionTerms {
    pub total: f64,
    pub fit: f64,
    pub skin_prior: f64,
    pub tv_alpha: f64,
    pub tv_makeup: f64,
    pub alpha_sparse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionGrad {
    pub bare_skin: Vec<f64>,
    pub makeup_color: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Per-pixel L1 over 3-channel buffers, averaged over pixels (the same
/// normalization as the TV terms).
fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / (a.len() / 3) as f64
}

/// Extraction objective and its gradient (sign(0) = 0 at L1 kinks).
pub fn extraction_loss(
    layers: &MakeupLayers,
    albedo: &TextureMap,
    skin_prior: &TextureMap,
    weights: &ExtractionWeights,
) -> Result<(ExtractionTerms, ExtractionGrad)> {
    layers.bare_skin.ensure_same_shape(albedo, "layers vs albedo")?;
    layers.bare_skin.ensure_same_shape(skin_prior, "layers vs skin prior")?;
    let (b, m, a) = (layers.bare_skin.data(), layers.makeup_color.data(), layers.alpha.data());
    let (f, p) = (albedo.data(), skin_prior.data());
    let n = b.len();
    let px = a.len();
    let blend: Vec<f64> = (0..n).map(|i| a[i / 3] * b[i] + (1.0 - a[i / 3]) * m[i]).collect();

    let terms = {
        let fit = weights.w_fit * l1(&blend, f);
        let skin_prior = weights.w_skin_prior * l1(b, p);
        let tv_alpha = weights.w_tv_alpha * total_variation(&layers.alpha);
        let tv_makeup = weights.w_tv_makeup * total_variation(&layers.makeup_color);
        let alpha_sparse = weights.w_alpha_sparse * a.iter().map(|v| 1.0 - v).sum::<f64>() / px as f64;
        ExtractionTerms {
            total: fit + skin_prior + tv_alpha + tv_makeup + alpha_sparse,
            fit,
            skin_prior,
            tv_alpha,
            tv_makeup,
            alpha_sparse,
        }
    };

    let mut gb = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut ga = vec![-weights.w_alpha_sparse / px as f64; px];
    for i in 0..n {
        let r = weights.w_fit * sign(blend[i] - f[i]) / px as f64;
        let t = a[i / 3];
        gb[i] = r * t + weights.w_skin_prior * sign(b[i] - p[i]) / px as f64;
        gm[i] = r * (1.0 - t);
        ga[i / 3] += r * (b[i] - m[i]);
    }
    total_variation_grad(&layers.alpha, weights.w_tv_alpha, &mut ga);
    total_variation_grad(&layers.makeup_color, weights.w_tv_makeup, &mut gm);
    Ok((
        terms,
        ExtractionGrad {
            bare_skin: gb,
            makeup_color: gm,
            alpha: ga,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub layers: MakeupLayers,
    /// Loss before each update.
    pub trace: Vec<ExtractionTerms>,
}

/// Per-pixel L1 gap between albedo and skin prior at which the starting
/// matte reaches 0.
pub const INITIAL_ALPHA_GAP: f64 = 0.1;

/// Starting matte: 1 where the prior already explains the albedo, falling
/// linearly to 0 as their per-pixel L1 gap reaches [`INITIAL_ALPHA_GAP`].
fn initial_alpha(albedo: &TextureMap, skin_prior: &TextureMap) -> TextureMap {
    let (f, p) = (albedo.data(), skin_prior.data());
    TextureMap::from_fn(albedo.width(), albedo.height(), 1, |x, y, _| {
        let i = (y * albedo.width() + x) * 3;
        let gap: f64 = (0..3).map(|c| (f[i + c] - p[i + c]).abs()).sum();
        1.0 - (gap / INITIAL_ALPHA_GAP).min(1.0)
    })
}

/// Splits an albedo into bare skin, makeup color and matte by projected
/// Adam. Bare skin starts at the prior and makeup color at the albedo, so
/// the blend already fits wherever the starting matte is 0 or 1. A uniform
/// start does not work: from `A = 1` the fit term drags bare skin onto the
/// makeup before the matte moves, and from `A = 0` the subgradient chatter
/// of the fit term stalls the sparsity push.
pub fn extract_makeup(albedo: &TextureMap, skin_prior: &TextureMap, config: &ExtractionConfig) -> Result<Extraction> {
    config.validate()?;
    albedo.ensure_channels(3, "albedo")?;
    albedo.ensure_same_shape(skin_prior, "albedo vs skin prior")?;
    for (what, t) in [("albedo", albedo), ("skin prior", skin_prior)] {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("{what} contains non-finite values")));
        }
    }
    let (w, h) = (albedo.width(), albedo.height());
    let mut layers = MakeupLayers {
        bare_skin: skin_prior.clamp(0.0, 1.0),
        makeup_color: albedo.clamp(0.0, 1.0),
        alpha: initial_alpha(albedo, skin_prior),
    };
    let n = w * h * 3;
    let mut flat: Vec<f64> = [layers.bare_skin.data(), layers.makeup_color.data(), layers.alpha.data()].concat();
    let mut adam = AdamState::new(flat.len());
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (terms, g) = extraction_loss(&layers, albedo, skin_prior, &config.weights)?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                stage: "extract",
                step: it,
                detail: format!("non-finite loss {:?}", terms.total),
            });
        }
        trace.push(terms);
        let grad = [g.bare_skin, g.makeup_color, g.alpha].concat();
        adam.step(&mut flat, &grad, config.lr)?;
        flat.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        layers = MakeupLayers {
            bare_skin: TextureMap::new(w, h, 3, flat[..n].to_vec())?,
            makeup_color: TextureMap::new(w, h, 3, flat[n..2 * n].to_vec())?,
            alpha: TextureMap::new(w, h, 1, flat[2 * n..].to_vec())?,
        };
    }
    Ok(Extraction { layers, trace })
}

pub fn write_extraction_trace(trace: &[ExtractionTerms], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = Vec::new();
    writeln!(s, "iter,total,fit,skin_prior,tv_alpha,tv_makeup,alpha_sparse").expect("write to Vec");
    for (i, t) in trace.iter().enumerate() {
        writeln!(
            s,
            "{i},{:?},{:?},{:?},{:?},{:?},{:?}",
            t.total, t.fit, t.skin_prior, t.tv_alpha, t.tv_makeup, t.alpha_sparse
        )
        .expect("write to Vec");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub const HISTOGRAM_BINS: usize = 256;

/// 256 uniform bins on `[0, 1]`, each remembering the range of values that
/// fell in it so the within-bin CDF is linear over the observed span.
struct Histogram {
    count: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// `cum[k]` = fraction of samples in bins before `k`; length bins + 1.
    cum: Vec<f64>,
}

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

impl Histogram {
    fn new(values: &[f64]) -> Histogram {
        let mut count = vec![0usize; HISTOGRAM_BINS];
        let mut lo = vec![f64::INFINITY; HISTOGRAM_BINS];
        let mut hi = vec![f64::NEG_INFINITY; HISTOGRAM_BINS];
        for &v in values {
            let k = bin_of(v);
            count[k] += 1;
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
        let total = values.len() as f64;
        let mut cum = Vec::with_capacity(HISTOGRAM_BINS + 1);
        let mut acc = 0usize;
        cum.push(0.0);
        for c in &count {
            acc += c;
            cum.push(acc as f64 / total);
        }
        Histogram { count, lo, hi, cum }
    }

    /// Quantile of `v` and where inside its bin it sits (0 = bottom).
    fn quantile(&self, v: f64) -> (f64, f64) {
        let k = bin_of(v);
        let span = self.hi[k] - self.lo[k];
        let t = if span > 0.0 { ((v - self.lo[k]) / span).clamp(0.0, 1.0) } else { 0.5 };
        (self.cum[k] + t * (self.cum[k + 1] - self.cum[k]), t)
    }

    /// Inverse CDF, linear within each nonempty bin. At a boundary shared by
    /// two bins, values from the lower half of their own bin resolve upward
    /// and values from the upper half resolve downward, so matching a
    /// distribution to itself is the identity.
    fn inverse(&self, q: f64, t: f64) -> f64 {
        let mut nonempty = (0..HISTOGRAM_BINS).filter(|&k| self.count[k] > 0);
        let k = if t < 0.5 {
            nonempty.rfind(|&k| self.cum[k] <= q)
        } else {
            nonempty.clone().find(|&k| self.cum[k + 1] >= q).or_else(|| nonempty.next_back())
        };
        let k = k.unwrap_or_else(|| self.count.iter().position(|&c| c > 0).expect("histogram has samples"));
        let width = self.cum[k + 1] - self.cum[k];
        let s = ((q - self.cum[k]) / width).clamp(0.0, 1.0);
        self.lo[k] + s * (self.hi[k] - self.lo[k])
    }
}

/// Remaps `values` so their distribution follows `reference`'s.
pub fn histogram_match(values: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() || reference.is_empty() {
        return Err(Error::Empty("histogram sample".into()));
    }
    let hx = Histogram::new(values);
    let hy = Histogram::new(reference);
    Ok(values
        .iter()
        .map(|&v| {
            let (q, t) = hx.quantile(v);
            hy.inverse(q, t)
        })
        .collect())
}

fn region_values(tex: &TextureMap, mask: &UvMask, c: usize) -> Vec<f64> {
    (0..tex.pixel_count())
        .filter(|&p| mask.is_valid(p))
        .map(|p| tex.pixel(p)[c])
        .collect()
}

/// Color-distribution distance over brows, eyes and lips (skin excluded):
/// per region, the mean over pixels and channels of `(x - matched(x))^2`
/// where `matched` remaps `x` to `y`'s per-channel histogram. Regions are
/// summed.
pub fn makeup_histogram_loss(x: &TextureMap, y: &TextureMap, regions: &FaceRegions) -> Result<f64> {
    x.ensure_same_shape(y, "histogram loss inputs")?;
    if x.width() != regions.width() || x.height() != regions.height() {
        return Err(mismatch("regions do not match the texture resolution"));
    }
    let mut total = 0.0;
    for (name, mask) in [("brows", &regions.brows), ("eyes", &regions.eyes), ("lips", &regions.lips)] {
        if mask.valid_count() == 0 {
            return Err(Error::Empty(format!("region {name}")));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..x.channels() {
            let xv = region_values(x, mask, c);
            let yv = region_values(y, mask, c);
            let matched = histogram_match(&xv, &yv)?;
            sum += xv.iter().zip(&matched).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += xv.len();
        }
        total += sum / count as f64;
    }
    Ok(total)
}
