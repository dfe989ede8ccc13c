//! Versioned little-endian tensor container shared by extractor weights,
//! generator checkpoints and latent codes.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MATXBIN\0"
//! 8       4     version (u32) = 1
//! 12      4     kind (u32): 1 extractor, 2 generator, 3 latent
//! 16      4     metadata length M (u32)
//! 20      M     metadata, UTF-8 JSON
//! 20+M    4     tensor count N (u32)
//! ...           per tensor: rank R (u32), then R dims (u32 each)
//! ...           body: every tensor's values as row-major f32, in order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MATXBIN\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Extractor = 1,
    Generator = 2,
    Latent = 3,
}

impl Kind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Kind::Extractor),
            2 => Some(Kind::Generator),
            3 => Some(Kind::Latent),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub metadata: String,
    pub tensors: Vec<Tensor<f32>>,
}

impl Container {
    pub fn new<T: Scalar>(kind: Kind, metadata: String, tensors: &[&Tensor<T>]) -> Self {
        Self {
            kind,
            metadata,
            tensors: tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let at = r.pos as u64;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported version {version}"),
            });
        }
        let at = r.pos as u64;
        let kind = r.u32("kind")?;
        let kind = Kind::from_u32(kind).ok_or_else(|| Error::Format {
            offset: at,
            msg: format!("unknown kind {kind}"),
        })?;
        let len = r.u32("metadata length")? as usize;
        let at = r.pos as u64;
        let metadata =
            String::from_utf8(r.take(len, "metadata")?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                msg: "metadata is not UTF-8".into(),
            })?;
        let count = r.u32("tensor count")? as usize;
        let mut shapes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos as u64;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("implausible rank {rank}"),
                });
            }
            let dims = (0..rank)
                .map(|_| r.u32("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            shapes.push(dims);
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "tensor body")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            kind,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the container holds `kind`.
    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format {
                offset: 12,
                msg: format!("expected {kind:?} file, found {:?}", self.kind),
            })
        }
    }

    /// Checks tensor `i` has `shape`, reporting the header offset of its dims.
    pub fn expect_shape(&self, i: usize, shape: &[usize]) -> Result<()> {
        match self.tensors.get(i) {
            Some(t) if t.shape() == shape => Ok(()),
            Some(t) => Err(Error::Format {
                offset: self.dims_offset(i),
                msg: format!("tensor {i} has shape {:?}, expected {shape:?}", t.shape()),
            }),
            None => Err(Error::Format {
                offset: self.dims_offset(self.tensors.len()),
                msg: format!("missing tensor {i}"),
            }),
        }
    }

    fn dims_offset(&self, i: usize) -> u64 {
        let mut off = 20 + self.metadata.len() + 4;
        for t in self.tensors.iter().take(i) {
            off += 4 + 4 * t.rank();
        }
        off as u64
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, have {}",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
