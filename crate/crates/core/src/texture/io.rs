//! Texture and mask files.
//!
//! The format is chosen by extension: `.pfm` holds raw linear `f32` samples,
//! `.png` holds 8-bit sRGB-encoded samples (decoded to linear on read).
//! Masks are single-channel PNGs with 255 marking valid pixels, stored
//! without any transfer function.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use super::{FaceRegions, TextureMap, UvMask};
use crate::error::{Error, Result};

/// sRGB-encoded value in `[0,1]` to linear intensity.
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear intensity in `[0,1]` to sRGB encoding.
pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Quantizes a linear value to an 8-bit sRGB code, clamping to `[0,1]` first.
pub fn encode_srgb8(v: f64) -> u8 {
    (linear_to_srgb(v.clamp(0.0, 1.0)) * 255.0).round() as u8
}

pub fn decode_srgb8(code: u8) -> f64 {
    srgb_to_linear(code as f64 / 255.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Pfm,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => Ok(Format::Png),
        Some("pfm") => Ok(Format::Pfm),
        _ => Err(Error::format(path, "unsupported texture extension (use .png or .pfm)")),
    }
}

pub fn read_texture(path: impl AsRef<Path>) -> Result<TextureMap> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Png => read_png(path),
        Format::Pfm => read_pfm(path),
    }
}

/// Writes a texture. PNG output clamps to `[0,1]` and sRGB-encodes.
pub fn write_texture(tex: &TextureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Png => write_png(tex, path),
        Format::Pfm => write_pfm(tex, path),
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

fn read_png(path: &Path) -> Result<TextureMap> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color().channel_count() {
        1 => {
            let g = img.to_luma8();
            let data = g.pixels().map(|p| decode_srgb8(p.0[0])).collect();
            TextureMap::new(w, h, 1, data)
        }
        3 => {
            let rgb = img.to_rgb8();
            let data = rgb
                .pixels()
                .flat_map(|p| p.0.map(decode_srgb8))
                .collect();
            TextureMap::new(w, h, 3, data)
        }
        n => Err(Error::format(path, format!("unsupported channel count {n}"))),
    }
}

fn save_image(img: DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn write_png(tex: &TextureMap, path: &Path) -> Result<()> {
    let (w, h) = (tex.width() as u32, tex.height() as u32);
    let bytes: Vec<u8> = tex.data().iter().map(|&v| encode_srgb8(v)).collect();
    let img = if tex.channels() == 1 {
        DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer sized from texture"),
        )
    } else {
        DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer sized from texture"),
        )
    };
    save_image(img, path)
}

fn read_pfm(path: &Path) -> Result<TextureMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = BufReader::new(file);
    let mut line = String::new();
    let mut next_token_line = |rd: &mut BufReader<fs::File>| -> Result<String> {
        loop {
            line.clear();
            let n = rd.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::format(path, "truncated PFM header"));
            }
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Ok(t.to_string());
            }
        }
    };
    let channels = match next_token_line(&mut rd)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(path, format!("bad PFM magic {other:?}"))),
    };
    let dims = next_token_line(&mut rd)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (w, h) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::format(path, format!("bad PFM dimensions {dims:?}"))),
    };
    let scale: f64 = next_token_line(&mut rd)?
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    rd.read_exact(&mut raw)
        .map_err(|_| Error::format(path, "truncated PFM data"))?;
    let row = w * channels;
    let mut data = vec![0.0; w * h * channels];
    // PFM rows run bottom to top.
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (src_row, col) = (i / row, i % row);
        data[(h - 1 - src_row) * row + col] = v as f64;
    }
    TextureMap::new(w, h, channels, data).map_err(|e| Error::format(path, e.to_string()))
}

fn write_pfm(tex: &TextureMap, path: &Path) -> Result<()> {
    let (w, h, c) = (tex.width(), tex.height(), tex.channels());
    let mut buf = Vec::with_capacity(32 + w * h * c * 4);
    let magic = if c == 3 { "PF" } else { "Pf" };
    write!(buf, "{magic}\n{w} {h}\n-1.0\n").expect("write to Vec");
    let row = w * c;
    for y in (0..h).rev() {
        for &v in &tex.data()[y * row..(y + 1) * row] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<UvMask> {
    let path = path.as_ref();
    let img = open_image(path)?;
    if img.color().channel_count() != 1 {
        return Err(Error::format(path, "mask PNG must be single-channel"));
    }
    let g = img.to_luma8();
    let weights = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    UvMask::new(g.width() as usize, g.height() as usize, weights)
}

pub fn write_mask(mask: &UvMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = mask
        .weights()
        .iter()
        .map(|&w| (w * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer sized from mask");
    save_image(DynamicImage::ImageLuma8(img), path)
}

/// Writes a one-channel `[0,1]` map (e.g. an alpha matte) as a linear 8-bit
/// PNG, the same encoding as masks.
pub fn write_linear_png(tex: &TextureMap, path: impl AsRef<Path>) -> Result<()> {
    tex.ensure_channels(1, "linear PNG")?;
    let w = tex.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    write_mask(&UvMask::new(tex.width(), tex.height(), w)?, path)
}

pub fn read_linear_png(path: impl AsRef<Path>) -> Result<TextureMap> {
    Ok(read_mask(path)?.to_texture())
}

/// Writes `brows.png`, `eyes.png`, `lips.png` and `skin.png` into `dir`.
pub fn write_regions(regions: &FaceRegions, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, mask) in regions.named() {
        write_mask(mask, dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

pub fn read_regions(dir: impl AsRef<Path>) -> Result<FaceRegions> {
    let dir = dir.as_ref();
    let read = |name: &str| read_mask(dir.join(format!("{name}.png")));
    FaceRegions::new(read("brows")?, read("eyes")?, read("lips")?, read("skin")?)
}

#[cfg(test)]
mod tests {
    #[test]
    fn regions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = FaceRegions::synthetic(24, 24).unwrap();
        write_regions(&r, dir.path().join("regions")).unwrap();
        assert_eq!(read_regions(dir.path().join("regions")).unwrap(), r);
        assert!(read_regions(dir.path().join("missing")).unwrap_err().is_io());
    }

    use super::*;
    use proptest::prelude::*;

    #[test]
    fn every_srgb_code_round_trips() {
        for code in 0..=255u8 {
            assert_eq!(encode_srgb8(decode_srgb8(code)), code);
        }
    }

    #[test]
    fn png_endpoints_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.png");
        let t = TextureMap::new(2, 1, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        write_texture(&t, &p).unwrap();
        assert_eq!(read_texture(&p).unwrap(), t);
    }

    #[test]
    fn png_round_trip_within_one_code() {
        // Every linear value lands on the nearest code, so the decoded value
        // is within half a code step of the input in the encoded domain.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let t = TextureMap::from_fn(64, 4, 1, |x, y, _| (y * 64 + x) as f64 / 255.0);
        write_texture(&t, &p).unwrap();
        let back = read_texture(&p).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((linear_to_srgb(*a) - linear_to_srgb(*b)).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn unsupported_png_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        image::RgbaImage::from_pixel(2, 2, image::Rgba([1, 2, 3, 4]))
            .save(&p)
            .unwrap();
        assert!(matches!(read_texture(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_texture("/nonexistent/x.pfm").unwrap_err();
        assert!(e.is_io());
        let e = read_texture("/nonexistent/x.png").unwrap_err();
        assert!(e.is_io());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = UvMask::from_fn(5, 3, |x, y| (x + y) % 2 == 0);
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bit_exact(
            w in 1usize..7, h in 1usize..7, three in any::<bool>(),
            seed in proptest::collection::vec(-1e6f32..1e6, 147),
        ) {
            let c = if three { 3 } else { 1 };
            let data: Vec<f64> = (0..w * h * c).map(|i| seed[i % seed.len()] as f64).collect();
            let t = TextureMap::new(w, h, c, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.pfm");
            write_texture(&t, &p).unwrap();
            prop_assert_eq!(read_texture(&p).unwrap(), t);
        }
    }
}
