//! Versioned binary parameter container.
//!
//! Layout (little endian): magic `PNICKPT\0`, version `u32`, entry count
//! `u32`, then per entry a `u32`-prefixed UTF-8 name, `u32` rank, `u64`
//! extents and `f64` values. A SHA-256 of everything before it closes the
//! file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volgrid::{Grid, Parameterized};

const MAGIC: &[u8; 8] = b"PNICKPT\0";
const VERSION: u32 = 1;

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Grid)>,
}

impl Checkpoint {
    pub fn from_model<M: Parameterized + ?Sized>(model: &M) -> Self {
        Checkpoint {
            entries: model.named_params().into_iter().map(|(n, g)| (n, g.clone())).collect(),
        }
    }

    /// Adds the tensors of `model` with `prefix.` prepended to each name.
    pub fn push_model<M: Parameterized + ?Sized>(&mut self, prefix: &str, model: &M) {
        for (n, g) in model.named_params() {
            self.entries.push((format!("{prefix}.{n}"), g.clone()));
        }
    }

    pub fn push(&mut self, name: &str, g: Grid) {
        self.entries.push((name.to_string(), g));
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).filter(|g| g.len() == 1).map(|g| g.data()[0])
    }

    /// Overwrites every parameter of `model` from the entry named
    /// `prefix.name` (or `name` when `prefix` is empty).
    pub fn load_into<M: Parameterized + ?Sized>(&self, prefix: &str, model: &mut M) -> Result<()> {
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(model.params_mut()) {
            let key = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
            let src = self
                .get(&key)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {key}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{key}: stored {:?}, model {:?}", src.shape(), dst.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, g) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(g.shape().len() as u32).to_le_bytes());
            for &d in g.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in g.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a container, naming `origin` in any error.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |reason: &str| Error::Checkpoint {
            path: origin.into(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| fail("truncated"))?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| fail("truncated"))?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let entry = r.entry().ok_or_else(|| fail("malformed entry"))?;
            entries.push(entry);
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Checkpoint { entries })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn entry(&mut self) -> Option<(String, Grid)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return None;
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).ok()?;
            len = len.checked_mul(d)?;
            shape.push(d);
        }
        let raw = self.take(len.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let g = Grid::new(shape, data).ok()?;
        Some((name, g))
    }
}
