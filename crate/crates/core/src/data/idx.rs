//! IDX (unsigned byte) reader and writer, gzip auto-detected on read.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, DatasetKind};

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Parses raw (uncompressed) IDX bytes.
pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format("truncated IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format(format!("bad IDX magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != UBYTE {
        return Err(format(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(format("IDX rank must be at least 1"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format("truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| format("IDX dimensions overflow"))?;
    let payload = &bytes[header..];
    if payload.len() < n {
        return Err(format(format!("truncated IDX payload: {} of {} bytes", payload.len(), n)));
    }
    if payload.len() > n {
        return Err(format(format!("{} trailing bytes after IDX payload", payload.len() - n)));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn write_idx(arr: &IdxArray) -> Result<Vec<u8>> {
    if arr.dims.is_empty() || arr.dims.len() > 255 {
        return Err(format("IDX rank must be in 1..=255"));
    }
    if arr.dims.iter().product::<usize>() != arr.data.len() {
        return Err(format("IDX dims do not match payload length"));
    }
    let mut out = vec![0, 0, UBYTE, arr.dims.len() as u8];
    for &d in &arr.dims {
        let d = u32::try_from(d).map_err(|_| format("IDX dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    Ok(out)
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut buf = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut buf)
            .map_err(|e| format(format!("{}: {}", path.display(), e)))?;
        read_idx(&buf)
    } else {
        read_idx(&raw)
    }
}

pub fn write_idx_file(path: &Path, arr: &IdxArray, gzip: bool) -> Result<()> {
    let bytes = write_idx(arr)?;
    if gzip {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Images (magic 2051, `[n × rows × cols]`) and labels (magic 2049, `[n]`),
/// pixels scaled by 1/255.
pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let img = read_idx_file(image_path)?;
    let lab = read_idx_file(label_path)?;
    if img.dims.len() != 3 {
        return Err(format(format!("{}: expected image magic 2051", image_path.display())));
    }
    if lab.dims.len() != 1 {
        return Err(format(format!("{}: expected label magic 2049", label_path.display())));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(format(format!("{} images but {} labels", n, lab.dims[0])));
    }
    let classes = lab.data.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let features = Tensor::new(vec![n, h * w], img.data.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels = Tensor::new(vec![n], lab.data.iter().map(|&l| l as f64).collect())?;
    Dataset::new(
        "mnist",
        DatasetKind::Image {
            height: h,
            width: w,
            channels: 1,
        },
        features,
        labels,
        classes,
    )
}

fn find(dir: &Path, stems: &[&str]) -> Option<PathBuf> {
    stems
        .iter()
        .flat_map(|s| [dir.join(s), dir.join(format!("{s}.gz"))])
        .find(|p| p.is_file())
}

/// Loads `train-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`, falling
/// back to the `mnist5k-` prefix.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let img = find(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte", "mnist5k-images-idx3-ubyte"]);
    let lab = find(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte", "mnist5k-labels-idx1-ubyte"]);
    match (img, lab) {
        (Some(i), Some(l)) => load_mnist_idx(&i, &l),
        _ => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no MNIST IDX files in {}", dir.display()),
        ))),
    }
}
