//! On-disk formats: 8-bit PNG images and plain-text real matrices.

use std::path::Path;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device, Tensor};
use wplus_core::geometry::ImageBatch;
use wplus_core::map2style::LatentCodes;

/// Reads a square RGB PNG as interleaved 8-bit pixels and its side length.
pub fn read_rgb(path: &Path) -> Result<(Vec<u8>, usize)> {
    let img = image::open(path)
        .with_context(|| format!("cannot read image {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        bail!("image {} is {w}x{h}; only square images are supported", path.display());
    }
    Ok((img.into_raw(), w as usize))
}

pub fn read_image(path: &Path) -> Result<ImageBatch> {
    let (px, side) = read_rgb(path)?;
    Ok(ImageBatch::from_rgb8(&[&px], side, DType::F32, &Device::Cpu)?)
}

pub fn write_rgb(path: &Path, px: Vec<u8>, side: usize) -> Result<()> {
    let img = image::RgbImage::from_raw(side as u32, side as u32, px).context("pixel buffer size mismatch")?;
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("cannot write image {}", path.display()))
}

/// Writes the first image of the batch.
pub fn write_image(path: &Path, img: &ImageBatch) -> Result<()> {
    let px = img.to_rgb8()?.swap_remove(0);
    write_rgb(path, px, img.side())
}

pub fn write_gray(path: &Path, values: &[f64], side: usize) -> Result<()> {
    let px: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(side as u32, side as u32, px).context("pixel buffer size mismatch")?;
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("cannot write image {}", path.display()))
}

/// All whitespace-separated reals of a text file, with the row count.
pub fn read_reals(path: &Path) -> Result<(Vec<f32>, usize)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rows += 1;
        for tok in line.split_whitespace() {
            let v: f32 = tok
                .parse()
                .with_context(|| format!("{}:{}: `{tok}` is not a number", path.display(), ln + 1))?;
            if !v.is_finite() {
                bail!("{}:{}: non-finite value", path.display(), ln + 1);
            }
            values.push(v);
        }
    }
    Ok((values, rows))
}

/// One row per style, `style_dim` reals per row.
pub fn write_codes(path: &Path, codes: &LatentCodes) -> Result<()> {
    let rows = codes.tensor().get(0)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_codes(path: &Path, n_styles: usize, style_dim: usize) -> Result<LatentCodes> {
    let (values, _) = read_reals(path)?;
    if values.len() != n_styles * style_dim {
        bail!(
            "codes file {} holds {} values; expected {n_styles} rows of {style_dim}",
            path.display(),
            values.len()
        );
    }
    Ok(LatentCodes::new(Tensor::from_vec(values, (1, n_styles, style_dim), &Device::Cpu)?)?)
}

/// A direction of `style_dim` reals (applied to every style) or `n_styles`
/// rows of `style_dim`, as `[n_styles, style_dim]`.
pub fn read_direction(path: &Path, n_styles: usize, style_dim: usize) -> Result<Tensor> {
    let (values, _) = read_reals(path)?;
    let t = if values.len() == style_dim {
        Tensor::from_vec(values, (1, style_dim), &Device::Cpu)?.broadcast_as((n_styles, style_dim))?.contiguous()?
    } else if values.len() == n_styles * style_dim {
        Tensor::from_vec(values, (n_styles, style_dim), &Device::Cpu)?
    } else {
        bail!(
            "direction file {} holds {} values; expected {style_dim} or {}",
            path.display(),
            values.len(),
            n_styles * style_dim
        );
    };
    Ok(t)
}
