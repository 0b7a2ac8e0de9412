//! UV-space textures and masks.
//!
//! Every per-pixel quantity in the pipeline (unwrapped and completed
//! textures, albedos, normal maps, shading, specular reconstruction, alpha
//! mattes) is a [`TextureMap`]: a row-major, channel-interleaved buffer of
//! linear-intensity `f64` values.

pub(crate) mod filter;
pub mod io;

pub use filter::{
    box_downsample, box_downsample_adjoint, diffuse_fill, diffuse_fill_with, gaussian_blur,
    gaussian_blur_adjoint, gaussian_kernel, gaussian_sigma, resize_bilinear, total_variation,
    total_variation_grad, FillReport, DEFAULT_FILL_ITERS, FILL_TOLERANCE,
};

use crate::error::{invalid, mismatch, Result};

/// Value range a texture is expected to live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    /// Albedo, alpha mattes: `[0, 1]`.
    Unit,
    /// Normal maps: `[-1, 1]`.
    Signed,
    /// Shading and specular reconstruction: `[0, +inf)`.
    NonNegative,
    /// Anything finite.
    Unbounded,
}

impl TextureKind {
    pub fn contains(self, v: f64) -> bool {
        match self {
            TextureKind::Unit => (0.0..=1.0).contains(&v),
            TextureKind::Signed => (-1.0..=1.0).contains(&v),
            TextureKind::NonNegative => v >= 0.0,
            TextureKind::Unbounded => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TextureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("texture size {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(mismatch(format!(
                "texture {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite texture value at index {i}")));
        }
        Ok(TextureMap {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a texture and checks that every value lies in the range of `kind`.
    pub fn with_kind(
        kind: TextureKind,
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let tex = Self::new(width, height, channels, data)?;
        tex.check_kind(kind)?;
        Ok(tex)
    }

    pub fn check_kind(&self, kind: TextureKind) -> Result<()> {
        match self.data.iter().position(|&v| !kind.contains(v)) {
            None => Ok(()),
            Some(i) => Err(invalid(format!(
                "value {} at index {i} outside {kind:?} range",
                self.data[i]
            ))),
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert!(value.is_finite());
        TextureMap {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    /// Builds a texture from a per-texel function `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    assert!(v.is_finite(), "from_fn produced a non-finite value");
                    data.push(v);
                }
            }
        }
        TextureMap {
            width,
            height,
            channels,
            data,
        }
    }

    /// Internal constructor for buffers the caller already knows to be valid.
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        TextureMap {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        assert!(v.is_finite());
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Channel values of pixel `p` (row-major pixel index).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &TextureMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_size(&self, other: &TextureMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &TextureMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(mismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn ensure_same_size(&self, other: &TextureMap, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(mismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn ensure_channels(&self, channels: usize, what: &str) -> Result<()> {
        if self.channels == channels {
            Ok(())
        } else {
            Err(mismatch(format!(
                "{what}: expected {channels} channels, got {}",
                self.channels
            )))
        }
    }

    /// Applies `f` to every value. `f` must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> TextureMap {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        TextureMap::from_raw(self.width, self.height, self.channels, data)
    }

    pub fn zip_map(&self, other: &TextureMap, f: impl Fn(f64, f64) -> f64) -> Result<TextureMap> {
        self.ensure_same_shape(other, "zip_map")?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        TextureMap::new(self.width, self.height, self.channels, data)
    }

    pub fn scale(&self, s: f64) -> TextureMap {
        self.map(|v| v * s)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> TextureMap {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = self.pixel_count() as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Per-channel weighted mean over the mask. Errors on an empty mask.
    pub fn masked_channel_means(&self, mask: &UvMask) -> Result<Vec<f64>> {
        mask.ensure_matches(self)?;
        let total: f64 = mask.weights().iter().sum();
        if total <= 0.0 {
            return Err(crate::error::Error::Empty("mask".into()));
        }
        let mut sums = vec![0.0; self.channels];
        for (px, &w) in self.data.chunks_exact(self.channels).zip(mask.weights()) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += w * v;
            }
        }
        Ok(sums.into_iter().map(|s| s / total).collect())
    }

    /// Single channel `c` as a one-channel texture.
    pub fn channel(&self, c: usize) -> TextureMap {
        assert!(c < self.channels);
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        TextureMap::from_raw(self.width, self.height, 1, data)
    }

    /// Broadcasts a one-channel texture to three channels; three-channel
    /// textures are returned as-is.
    pub fn to_rgb(&self) -> TextureMap {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        TextureMap::from_raw(self.width, self.height, 3, data)
    }

    /// Mean absolute difference over all values.
    pub fn mean_abs_diff(&self, other: &TextureMap) -> Result<f64> {
        self.ensure_same_shape(other, "mean_abs_diff")?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn rmse(&self, other: &TextureMap) -> Result<f64> {
        self.ensure_same_shape(other, "rmse")?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((s / self.data.len() as f64).sqrt())
    }

    pub fn max_abs_diff(&self, other: &TextureMap) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Normalizes every pixel of a three-channel map to unit length. Zero
    /// pixels become `(0, 0, 1)`.
    pub fn normalize_pixels(&mut self) {
        assert_eq!(self.channels, 3, "normalize_pixels needs a 3-channel map");
        for px in self.data.chunks_exact_mut(3) {
            let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
            if n > 0.0 {
                px.iter_mut().for_each(|v| *v /= n);
            } else {
                px.copy_from_slice(&[0.0, 0.0, 1.0]);
            }
        }
    }
}

/// Per-pixel validity weights in `[0, 1]`; `1` marks an observed pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMask {
    width: usize,
    height: usize,
    weights: Vec<f64>,
}

impl UvMask {
    /// Weight at or above which a pixel counts as valid.
    pub const VALID_THRESHOLD: f64 = 0.5;

    pub fn new(width: usize, height: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != width * height {
            return Err(mismatch(format!(
                "mask {width}x{height} needs {} weights, got {}",
                width * height,
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(invalid(format!("mask weight {} at {i} outside [0,1]", weights[i])));
        }
        Ok(UvMask {
            width,
            height,
            weights,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        UvMask {
            width,
            height,
            weights: vec![1.0; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        UvMask {
            width,
            height,
            weights: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut weights = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                weights.push(if f(x, y) { 1.0 } else { 0.0 });
            }
        }
        UvMask {
            width,
            height,
            weights,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, p: usize) -> f64 {
        self.weights[p]
    }

    #[inline]
    pub fn is_valid(&self, p: usize) -> bool {
        self.weights[p] >= Self::VALID_THRESHOLD
    }

    pub fn valid_count(&self) -> usize {
        (0..self.weights.len()).filter(|&p| self.is_valid(p)).count()
    }

    pub fn is_all_valid(&self) -> bool {
        (0..self.weights.len()).all(|p| self.is_valid(p))
    }

    pub fn ensure_matches(&self, tex: &TextureMap) -> Result<()> {
        if self.width == tex.width() && self.height == tex.height() {
            Ok(())
        } else {
            Err(mismatch(format!(
                "mask {}x{} vs texture {}x{}",
                self.width,
                self.height,
                tex.width(),
                tex.height()
            )))
        }
    }

    /// Pixelwise product of two masks.
    pub fn intersect(&self, other: &UvMask) -> Result<UvMask> {
        if self.width != other.width || self.height != other.height {
            return Err(mismatch("mask intersection size"));
        }
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a * b)
            .collect();
        Ok(UvMask {
            width: self.width,
            height: self.height,
            weights,
        })
    }

    pub fn complement(&self) -> UvMask {
        UvMask {
            width: self.width,
            height: self.height,
            weights: self.weights.iter().map(|w| 1.0 - w).collect(),
        }
    }

    /// Mask as a one-channel texture.
    pub fn to_texture(&self) -> TextureMap {
        TextureMap::from_raw(self.width, self.height, 1, self.weights.clone())
    }
}

/// Named UV regions used by the makeup metric.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRegions {
    pub brows: UvMask,
    pub eyes: UvMask,
    pub lips: UvMask,
    pub skin: UvMask,
}

impl FaceRegions {
    pub fn new(brows: UvMask, eyes: UvMask, lips: UvMask, skin: UvMask) -> Result<Self> {
        let regions = FaceRegions {
            brows,
            eyes,
            lips,
            skin,
        };
        let all = regions.named();
        let (w, h) = (all[0].1.width, all[0].1.height);
        for (name, m) in &all {
            if m.width != w || m.height != h {
                return Err(mismatch(format!("region {name} has a different size")));
            }
            if m.valid_count() == 0 {
                return Err(crate::error::Error::Empty(format!("region {name}")));
            }
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let overlap = (0..w * h).any(|p| all[i].1.is_valid(p) && all[j].1.is_valid(p));
                if overlap {
                    return Err(invalid(format!(
                        "regions {} and {} overlap",
                        all[i].0, all[j].0
                    )));
                }
            }
        }
        Ok(regions)
    }

    pub fn named(&self) -> [(&'static str, &UvMask); 4] {
        [
            ("brows", &self.brows),
            ("eyes", &self.eyes),
            ("lips", &self.lips),
            ("skin", &self.skin),
        ]
    }

    pub fn width(&self) -> usize {
        self.skin.width
    }

    pub fn height(&self) -> usize {
        self.skin.height
    }

    /// Synthetic face layout on a square UV chart: two brows, two eyes and
    /// the lips as ellipses inside the face disk; skin is the rest of the disk.
    pub fn synthetic(width: usize, height: usize) -> Result<Self> {
        let ellipse = |cx: f64, cy: f64, rx: f64, ry: f64| {
            UvMask::from_fn(width, height, move |x, y| {
                let u = (x as f64 + 0.5) / width as f64;
                let v = (y as f64 + 0.5) / height as f64;
                let dx = (u - cx) / rx;
                let dy = (v - cy) / ry;
                dx * dx + dy * dy <= 1.0
            })
        };
        let union = |a: UvMask, b: UvMask| UvMask {
            width,
            height,
            weights: a.weights.iter().zip(&b.weights).map(|(p, q)| p.max(*q)).collect(),
        };
        let brows = union(
            ellipse(0.33, 0.30, 0.11, 0.035),
            ellipse(0.67, 0.30, 0.11, 0.035),
        );
        let eyes = union(
            ellipse(0.34, 0.40, 0.085, 0.045),
            ellipse(0.66, 0.40, 0.085, 0.045),
        );
        let lips = ellipse(0.5, 0.72, 0.15, 0.06);
        let disk = ellipse(0.5, 0.5, 0.47, 0.47);
        let skin = UvMask::from_fn(width, height, |x, y| {
            let p = y * width + x;
            disk.is_valid(p) && !brows.is_valid(p) && !eyes.is_valid(p) && !lips.is_valid(p)
        });
        FaceRegions::new(brows, eyes, lips, skin)
    }
}
