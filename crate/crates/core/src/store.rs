//! Binary checkpoint and mask formats, and the temp-then-rename write
//! discipline every artifact goes through.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::mask::{Mask, PruneMethod};
use crate::model::{ParamSet, Provenance};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DWCK";
pub const MASK_MAGIC: &[u8; 4] = b"DWMK";
pub const FORMAT_VERSION: u32 = 1;
pub const ANCHOR_SUFFIX: &str = ".anchor";

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Removes the temp file unless the write completed.
struct TempGuard {
    path: PathBuf,
    armed: bool,
}

impl Drop for TempGuard {
    fn drop(&mut self) {
        if self.armed {
            let _ = fs::remove_file(&self.path);
        }
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()))
}

/// Streams into a sibling temp file, syncs, then renames over `path`. If
/// `fill` fails or panics the final name is never touched.
pub fn atomic_write_with<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let mut guard = TempGuard {
        path: tmp.clone(),
        armed: true,
    };
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = io::BufWriter::new(file);
    fill(&mut w).map_err(|e| Error::io(path, e))?;
    let file = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    guard.armed = false;
    Ok(())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_with(path, |w| w.write_all(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32("name length")? as usize;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn encode_tensors(tensors: &BTreeMap<String, Tensor<f32>>, provenance: Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(provenance.tag());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_name(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_tensors(bytes: &[u8], path: &Path) -> Result<(BTreeMap<String, Tensor<f32>>, Provenance)> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(CHECKPOINT_MAGIC)?;
    let tag = r.u8("provenance")?;
    let provenance =
        Provenance::from_tag(tag).ok_or_else(|| Error::format(path, format!("unknown provenance tag {tag}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name:?}")));
        }
    }
    if !r.at_end() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((tensors, provenance))
}

pub fn anchor_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ANCHOR_SUFFIX);
    PathBuf::from(s)
}

/// Writes the live weights to `path` and the rewind anchor to `path.anchor`.
pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    atomic_write(&anchor_path(path), &encode_tensors(params.anchor(), params.provenance()))?;
    atomic_write(path, &encode_tensors(params.tensors(), params.provenance()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensors, provenance) = decode_tensors(&bytes, path)?;
    let apath = anchor_path(path);
    let abytes = fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
    let (anchor, aprov) = decode_tensors(&abytes, &apath)?;
    if aprov != provenance {
        return Err(Error::format(
            &apath,
            format!("anchor provenance {aprov} differs from checkpoint {provenance}"),
        ));
    }
    ParamSet::from_parts(tensors, anchor, provenance).map_err(|e| Error::format(path, e.to_string()))
}

/// LSB-first packing; padding bits in the last byte are zero.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(mask.method().tag());
    out.push(mask.provenance().tag());
    out.extend_from_slice(&mask.round().to_le_bytes());
    for (name, bits) in mask.tensors() {
        put_name(&mut out, name);
        out.extend_from_slice(&(bits.len() as u64).to_le_bytes());
        out.extend_from_slice(&pack_bits(bits));
    }
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(MASK_MAGIC)?;
    let tag = r.u8("method")?;
    let method = PruneMethod::from_tag(tag).ok_or_else(|| Error::format(path, format!("unknown method tag {tag}")))?;
    let tag = r.u8("provenance")?;
    let provenance =
        Provenance::from_tag(tag).ok_or_else(|| Error::format(path, format!("unknown provenance tag {tag}")))?;
    let round = r.u32("round")?;
    let mut bits = BTreeMap::new();
    while !r.at_end() {
        let name = r.name()?;
        let count = usize::try_from(r.u64("bit count")?)
            .map_err(|_| Error::format(path, "bit count overflows"))?;
        let payload = r.take(count.div_ceil(8), "bit payload")?;
        if count % 8 != 0 && payload[count / 8] >> (count % 8) != 0 {
            return Err(Error::format(path, format!("{name}: nonzero padding bits")));
        }
        if bits.insert(name.clone(), unpack_bits(payload, count)).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name:?}")));
        }
    }
    Ok(Mask::new(bits, round, method, provenance))
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_mask(mask))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, path)
}

/// Output directory layout.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub const SUBDIRS: [&'static str; 4] = ["checkpoints", "masks", "metrics", "grids"];

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in Self::SUBDIRS {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, stem: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stem}.ckpt"))
    }

    pub fn mask(&self, stem: &str) -> PathBuf {
        self.root.join("masks").join(format!("{stem}.mask"))
    }

    pub fn metrics(&self, file: &str) -> PathBuf {
        self.root.join("metrics").join(file)
    }

    pub fn grid(&self, file: &str) -> PathBuf {
        self.root.join("grids").join(file)
    }

    /// Path relative to the store root, with forward slashes.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}
