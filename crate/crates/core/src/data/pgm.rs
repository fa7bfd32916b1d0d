//! Binary PGM (P5, maxval 255) output.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{dim_err, input_err, Result};
use crate::tensor::Tensor;

/// Byte used for empty grid slots.
pub const GRAY: u8 = 128;

/// `floor(v·255 + 0.5)`, clamped to `[0, 255]`.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(dim_err!("{} pixels for a {}×{} image", pixels.len(), width, height));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

fn plane_bytes(v: &[f64]) -> Result<Vec<u8>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(input_err!("cannot render non-finite pixels"));
    }
    Ok(v.iter().map(|&x| to_byte(x)).collect())
}

fn planar_paths(path: &Path, channels: usize) -> Vec<PathBuf> {
    if channels == 1 {
        return vec![path.to_path_buf()];
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("pgm");
    (0..channels)
        .map(|c| path.with_file_name(format!("{stem}_c{c}.{ext}")))
        .collect()
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(dim_err!("image must be [h, w] or [c, h, w], got {:?}", shape)),
    }
}

/// Writes `[h, w]` or `[c, h, w]`; multi-channel images become one PGM per
/// channel (`<stem>_c<i>.pgm`). Returns the written paths.
pub fn write_pgm(image: &Tensor, path: &Path) -> Result<Vec<PathBuf>> {
    let (c, h, w) = chw(image.shape())?;
    let paths = planar_paths(path, c);
    for (i, p) in paths.iter().enumerate() {
        let plane = &image.data()[i * h * w..(i + 1) * h * w];
        fs::write(p, encode_pgm(w, h, &plane_bytes(plane)?)?)?;
    }
    Ok(paths)
}

/// Tiles `slots` (each `[c·h·w]` values or `None`) into a grid with `cols`
/// columns; `None` slots are mid-gray.
pub fn write_reconstruction_grid(slots: &[Option<&[f64]>], shape: &[usize], cols: usize, path: &Path) -> Result<Vec<PathBuf>> {
    let (c, h, w) = chw(shape)?;
    if cols == 0 || slots.is_empty() {
        return Err(dim_err!("grid needs at least one slot and one column"));
    }
    let rows = slots.len().div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut planes = vec![vec![GRAY; gw * gh]; c];
    for (k, slot) in slots.iter().enumerate() {
        let Some(v) = slot else { continue };
        if v.len() != c * h * w {
            return Err(dim_err!("slot {} has {} values, expected {}", k, v.len(), c * h * w));
        }
        let bytes = plane_bytes(v)?;
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for (ch, plane) in planes.iter_mut().enumerate() {
            for y in 0..h {
                let src = &bytes[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                plane[(r0 + y) * gw + c0..(r0 + y) * gw + c0 + w].copy_from_slice(src);
            }
        }
    }
    let paths = planar_paths(path, c);
    for (p, plane) in paths.iter().zip(&planes) {
        fs::write(p, encode_pgm(gw, gh, plane)?)?;
    }
    Ok(paths)
}
