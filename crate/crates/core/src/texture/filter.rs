use rayon::prelude::*;

use super::{TextureMap, UvMask};
use crate::error::{invalid, Error, Result};

/// Iteration cap for [`diffuse_fill`] when the caller has no preference.
pub const DEFAULT_FILL_ITERS: usize = 2000;

/// Jacobi sweeps stop once no pixel moves by more than this.
pub const FILL_TOLERANCE: f64 = 1e-5;

/// Standard deviation used for a Gaussian kernel of odd size `k`.
pub fn gaussian_sigma(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps of odd length `kernel_size`.
pub fn gaussian_kernel(kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(invalid(format!(
            "gaussian kernel size must be odd and >= 1, got {kernel_size}"
        )));
    }
    let sigma = gaussian_sigma(kernel_size);
    let r = (kernel_size / 2) as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    Ok(taps)
}

/// One-dimensional edge-clamped convolution along every row.
fn convolve_rows(
    data: &[f64],
    width: usize,
    channels: usize,
    taps: &[f64],
    adjoint: bool,
) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let row_len = width * channels;
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(row_len)
        .zip(data.par_chunks(row_len))
        .for_each(|(dst, src)| {
            for x in 0..width as isize {
                for (k, &w) in taps.iter().enumerate() {
                    let xs = (x + k as isize - r).clamp(0, width as isize - 1) as usize;
                    let (from, to) = if adjoint {
                        (x as usize, xs)
                    } else {
                        (xs, x as usize)
                    };
                    for c in 0..channels {
                        dst[to * channels + c] += w * src[from * channels + c];
                    }
                }
            }
        });
    out
}

fn transpose(data: &[f64], width: usize, height: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let s = (y * width + x) * channels;
            let d = (x * height + y) * channels;
            out[d..d + channels].copy_from_slice(&data[s..s + channels]);
        }
    }
    out
}

fn separable(tex: &TextureMap, taps: &[f64], adjoint: bool) -> TextureMap {
    let (w, h, c) = (tex.width(), tex.height(), tex.channels());
    // The adjoint of (vertical ∘ horizontal) is horizontalᵀ ∘ verticalᵀ; both
    // passes are the same line filter, so only the tap direction changes.
    let rows = convolve_rows(tex.data(), w, c, taps, adjoint);
    let t = transpose(&rows, w, h, c);
    let cols = convolve_rows(&t, h, c, taps, adjoint);
    TextureMap::from_raw(w, h, c, transpose(&cols, h, w, c))
}

/// Separable Gaussian blur with edge-clamped borders.
pub fn gaussian_blur(tex: &TextureMap, kernel_size: usize) -> Result<TextureMap> {
    let taps = gaussian_kernel(kernel_size)?;
    if kernel_size == 1 {
        return Ok(tex.clone());
    }
    Ok(separable(tex, &taps, false))
}

/// Transpose of [`gaussian_blur`] as a linear map; used to pull gradients
/// back through the blur.
pub fn gaussian_blur_adjoint(grad: &TextureMap, kernel_size: usize) -> Result<TextureMap> {
    let taps = gaussian_kernel(kernel_size)?;
    if kernel_size == 1 {
        return Ok(grad.clone());
    }
    Ok(separable(grad, &taps, true))
}

/// Anisotropic total variation: mean over pixels of `|∂x| + |∂y|` forward
/// differences, summed over channels.
pub fn total_variation(tex: &TextureMap) -> f64 {
    let (w, h, c) = (tex.width(), tex.height(), tex.channels());
    let d = tex.data();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * c;
            for ch in 0..c {
                if x + 1 < w {
                    sum += (d[i + c + ch] - d[i + ch]).abs();
                }
                if y + 1 < h {
                    sum += (d[i + w * c + ch] - d[i + ch]).abs();
                }
            }
        }
    }
    sum / (w * h) as f64
}

/// Adds `scale * ∂TV/∂tex` into `grad` (same layout as `tex`).
pub fn total_variation_grad(tex: &TextureMap, scale: f64, grad: &mut [f64]) {
    let (w, h, c) = (tex.width(), tex.height(), tex.channels());
    assert_eq!(grad.len(), tex.data().len());
    let d = tex.data();
    let s = scale / (w * h) as f64;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * c;
            for ch in 0..c {
                if x + 1 < w {
                    let g = s * sign(d[i + c + ch] - d[i + ch]);
                    grad[i + c + ch] += g;
                    grad[i + ch] -= g;
                }
                if y + 1 < h {
                    let g = s * sign(d[i + w * c + ch] - d[i + ch]);
                    grad[i + w * c + ch] += g;
                    grad[i + ch] -= g;
                }
            }
        }
    }
}

/// Sign with `sign(0) = 0`, the subgradient choice used by every L1 term.
#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillReport {
    pub iterations: usize,
    pub max_update: f64,
    pub converged: bool,
}

/// Fills invalid pixels by Jacobi iteration of the discrete Laplace equation,
/// keeping valid pixels fixed.
pub fn diffuse_fill(tex: &TextureMap, mask: &UvMask, iters: usize) -> Result<TextureMap> {
    diffuse_fill_with(tex, mask, iters, FILL_TOLERANCE).map(|(t, _)| t)
}

pub fn diffuse_fill_with(
    tex: &TextureMap,
    mask: &UvMask,
    iters: usize,
    tolerance: f64,
) -> Result<(TextureMap, FillReport)> {
    mask.ensure_matches(tex)?;
    let (w, h, c) = (tex.width(), tex.height(), tex.channels());
    let n = w * h;
    let valid: Vec<bool> = (0..n).map(|p| mask.is_valid(p)).collect();
    let nvalid = valid.iter().filter(|&&v| v).count();
    if nvalid == 0 {
        return Err(Error::NothingToAnchor);
    }
    if nvalid == n {
        return Ok((
            tex.clone(),
            FillReport {
                iterations: 0,
                max_update: 0.0,
                converged: true,
            },
        ));
    }

    // Holes start at the mean of the observed pixels, which already satisfies
    // the maximum principle and shortens the Jacobi transient.
    let mut mean = vec![0.0; c];
    for p in (0..n).filter(|&p| valid[p]) {
        for ch in 0..c {
            mean[ch] += tex.data()[p * c + ch];
        }
    }
    mean.iter_mut().for_each(|m| *m /= nvalid as f64);
    let mut cur = tex.data().to_vec();
    for p in (0..n).filter(|&p| !valid[p]) {
        cur[p * c..(p + 1) * c].copy_from_slice(&mean);
    }

    let mut next = cur.clone();
    let mut report = FillReport {
        iterations: 0,
        max_update: 0.0,
        converged: false,
    };
    for it in 0..iters {
        let prev = &cur;
        let row_max: Vec<f64> = next
            .par_chunks_mut(w * c)
            .enumerate()
            .map(|(y, row)| {
                let mut m = 0.0f64;
                for x in 0..w {
                    let p = y * w + x;
                    if valid[p] {
                        continue;
                    }
                    let mut cnt = 0.0;
                    let mut acc = [0.0f64; 3];
                    let mut add = |q: usize| {
                        for ch in 0..c {
                            acc[ch] += prev[q * c + ch];
                        }
                        cnt += 1.0;
                    };
                    if x > 0 {
                        add(p - 1);
                    }
                    if x + 1 < w {
                        add(p + 1);
                    }
                    if y > 0 {
                        add(p - w);
                    }
                    if y + 1 < h {
                        add(p + w);
                    }
                    for ch in 0..c {
                        let v = acc[ch] / cnt;
                        m = m.max((v - prev[p * c + ch]).abs());
                        row[x * c + ch] = v;
                    }
                }
                m
            })
            .collect();
        std::mem::swap(&mut cur, &mut next);
        report.iterations = it + 1;
        report.max_update = row_max.into_iter().fold(0.0, f64::max);
        if report.max_update < tolerance {
            report.converged = true;
            break;
        }
    }
    Ok((TextureMap::from_raw(w, h, c, cur), report))
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
pub fn resize_bilinear(tex: &TextureMap, width: usize, height: usize) -> Result<TextureMap> {
    if width == 0 || height == 0 {
        return Err(invalid("resize target must be nonzero"));
    }
    if width == tex.width() && height == tex.height() {
        return Ok(tex.clone());
    }
    let (sw, sh, c) = (tex.width(), tex.height(), tex.channels());
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let out = TextureMap::from_fn(width, height, c, |x, y, ch| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let top = tex.get(x0, y0, ch) * (1.0 - tx) + tex.get(x1, y0, ch) * tx;
        let bot = tex.get(x0, y1, ch) * (1.0 - tx) + tex.get(x1, y1, ch) * tx;
        top * (1.0 - ty) + bot * ty
    });
    Ok(out)
}

/// 2×2 box average; odd trailing rows/columns are dropped. Returns `None`
/// when the texture is too small to halve.
pub fn box_downsample(tex: &TextureMap) -> Option<TextureMap> {
    let (w, h, c) = (tex.width() / 2, tex.height() / 2, tex.channels());
    if w == 0 || h == 0 {
        return None;
    }
    Some(TextureMap::from_fn(w, h, c, |x, y, ch| {
        0.25 * (tex.get(2 * x, 2 * y, ch)
            + tex.get(2 * x + 1, 2 * y, ch)
            + tex.get(2 * x, 2 * y + 1, ch)
            + tex.get(2 * x + 1, 2 * y + 1, ch))
    }))
}

/// Transpose of [`box_downsample`]: spreads each coarse gradient over its
/// four parents at `(width, height)` resolution.
pub fn box_downsample_adjoint(grad: &TextureMap, width: usize, height: usize) -> TextureMap {
    let c = grad.channels();
    let mut out = TextureMap::zeros(width, height, c);
    for y in 0..grad.height() {
        for x in 0..grad.width() {
            for ch in 0..c {
                let g = 0.25 * grad.get(x, y, ch);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = out.index(2 * x + dx, 2 * y + dy, ch);
                    out.data_mut()[i] += g;
                }
            }
        }
    }
    out
}
