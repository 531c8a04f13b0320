use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::store::atomic_write;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255; the class count
/// is one past the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;

    let magic = be_u32(&ib, 0, ip)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(ip, format!("bad magic {magic:#010x}, want {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&ib, 4, ip)? as usize;
    let rows = be_u32(&ib, 8, ip)? as usize;
    let cols = be_u32(&ib, 12, ip)? as usize;
    let want = n * rows * cols;
    let payload = &ib[16..];
    if payload.len() != want {
        return Err(Error::format(
            ip,
            format!("{} pixel bytes, header declares {n}x{rows}x{cols} = {want}", payload.len()),
        ));
    }

    let magic = be_u32(&lb, 0, lp)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(lp, format!("bad magic {magic:#010x}, want {LABELS_MAGIC:#010x}")));
    }
    let nl = be_u32(&lb, 4, lp)? as usize;
    let lpay = &lb[8..];
    if lpay.len() != nl {
        return Err(Error::format(lp, format!("{} label bytes, header declares {nl}", lpay.len())));
    }
    if nl != n {
        return Err(Error::format(lp, format!("{nl} labels for {n} images")));
    }
    if n == 0 {
        return Err(Error::format(ip, "no samples"));
    }

    let pixels: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lpay.iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let name = ip
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, k, name, split)
}

/// Writes single-channel images as IDX, quantizing pixels to `round(255·p)`.
pub fn save_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = ds.image_shape();
    if c != 1 {
        return Err(Error::shape("save_idx", format!("{c} channels, IDX holds one")));
    }
    if ds.num_classes() > 256 {
        return Err(Error::InvalidArgument(format!("{} classes exceed a byte", ds.num_classes())));
    }
    let n = ds.len();
    let mut ib = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images().data().iter().map(|&p| (p * 255.0).round() as u8));

    let mut lb = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels().iter().map(|&y| y as u8));

    atomic_write(images.as_ref(), &ib)?;
    atomic_write(labels.as_ref(), &lb)
}
