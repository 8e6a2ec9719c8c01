//! Binary artifact formats and small file helpers.
//!
//! All multi-byte values are little-endian. Every artifact starts with a
//! 4-byte magic and a u32 version, and embeds the run seed plus the
//! data-config hash so cross-stage mismatches are hard errors.
//!
//! Weight checkpoints are self-describing: named tensors with explicit
//! dimensions followed by row-major f32 data.

use std::io::Write;
use std::path::Path;

use crate::nn::{Layout, TensorDef};
use crate::{Error, Result};

/// Incremental little-endian writer.
#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> ByteWriter {
        ByteWriter { buf: Vec::new() }
    }

    pub fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f32_slice(&mut self, v: &[f32]) {
        for x in v {
            self.f32(*x);
        }
    }

    pub fn f64_slice(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.buf)?;
        Ok(())
    }
}

/// Cursor over a byte buffer; every failure reports the byte offset.
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> ByteReader<'a> {
        ByteReader { data, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes)"),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, m: &[u8; 4], what: &str) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != m {
            return Err(Error::Parse {
                offset: (self.pos - 4) as u64,
                msg: format!("bad magic for {what}: {got:02x?}"),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, "f32")?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "f64")?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n, "bytes")
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n, "string")?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse {
            offset: (self.pos - n) as u64,
            msg: "invalid utf-8".into(),
        })
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(4 * n, "f32 array")?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n, "f64 array")?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// What a weight checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    PerceptionEncoder,
    DiffusionPolicy,
    BcPolicy,
}

impl CheckpointKind {
    fn to_u8(self) -> u8 {
        match self {
            CheckpointKind::PerceptionEncoder => 0,
            CheckpointKind::DiffusionPolicy => 1,
            CheckpointKind::BcPolicy => 2,
        }
    }

    fn from_u8(v: u8, offset: u64) -> Result<CheckpointKind> {
        match v {
            0 => Ok(CheckpointKind::PerceptionEncoder),
            1 => Ok(CheckpointKind::DiffusionPolicy),
            2 => Ok(CheckpointKind::BcPolicy),
            _ => Err(Error::Parse {
                offset,
                msg: format!("unknown checkpoint kind {v}"),
            }),
        }
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"SSWT";
const WEIGHTS_VERSION: u32 = 1;

/// Self-describing weight file: magic, version, provenance, modality
/// flags, then named tensors (dims + row-major f32 data).
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub use_pose: bool,
    pub use_wrench: bool,
    pub layout: Layout,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.magic(WEIGHTS_MAGIC);
        w.u32(WEIGHTS_VERSION);
        w.u64(self.seed);
        w.bytes(&self.config_hash);
        w.u8(self.kind.to_u8());
        let flags = (self.use_pose as u8) | ((self.use_wrench as u8) << 1);
        w.u8(flags);
        w.u32(self.layout.tensors.len() as u32);
        for t in &self.layout.tensors {
            w.str(&t.name);
            w.u32(t.dims.len() as u32);
            for d in &t.dims {
                w.u32(*d as u32);
            }
            w.f32_slice(&self.params[t.offset..t.offset + t.len()]);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = std::fs::read(path)?;
        let mut r = ByteReader::new(&data);
        r.expect_magic(WEIGHTS_MAGIC, "weight checkpoint")?;
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let seed = r.u64()?;
        let config_hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let kind = CheckpointKind::from_u8(r.u8()?, r.offset())?;
        let flags = r.u8()?;
        let n_tensors = r.u32()? as usize;
        let mut layout = Layout::default();
        let mut params = Vec::new();
        for _ in 0..n_tensors {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let len: usize = dims.iter().product();
            let offset = layout.len;
            layout.tensors.push(TensorDef { name, offset, dims });
            layout.len += len;
            params.extend(r.f32_vec(len)?);
        }
        if !r.done() {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Checkpoint {
            kind,
            seed,
            config_hash,
            use_pose: flags & 1 != 0,
            use_wrench: flags & 2 != 0,
            layout,
            params,
        })
    }

    /// Hard provenance check against a config hash.
    pub fn check_hash(&self, expected: &[u8; 32], what: &str) -> Result<()> {
        if &self.config_hash != expected {
            return Err(Error::HashMismatch(format!(
                "{what}: checkpoint was produced under a different data config"
            )));
        }
        Ok(())
    }
}

/// Write an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}
