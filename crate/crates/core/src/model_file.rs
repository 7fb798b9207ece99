//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GENCNN1"  u32 version
//! u32 len, config text (key=value lines)
//! u32 len, vocabulary text (word<TAB>count<TAB>cluster lines)
//! u32 tensor count
//! per tensor: u32 name len, name, u32 rank, u64 dims…, f32 payload
//! ```
//!
//! Parameters are stored under their own names, AdaGrad accumulators under
//! `adagrad:<name>`.

use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"GENCNN1";
pub const VERSION: u32 = 1;
const ACC_PREFIX: &str = "adagrad:";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len());
    out.extend_from_slice(bytes);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_block(out, name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_block(&mut out, model.config().to_text().as_bytes());
    put_block(&mut out, model.vocab().to_file_string().as_bytes());
    let p = model.params();
    put_u32(&mut out, 2 * p.len());
    for (name, t) in p.names().iter().zip(p.values()) {
        put_tensor(&mut out, name, t);
    }
    for (name, t) in p.names().iter().zip(p.accumulators()) {
        put_tensor(&mut out, &format!("{ACC_PREFIX}{name}"), t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| Error::Format(format!("{what} is not UTF-8: {e}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.text("tensor name")?.to_string();
        let rank = self.u32("tensor rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64("tensor dim")?)
                .map_err(|_| Error::Format(format!("tensor `{name}` dimension overflows")))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` size overflows")))?;
            shape.push(d);
        }
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` size overflows")))?;
        let payload = self.take(bytes, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported model file version {version}")));
    }
    let config = ModelConfig::from_text(r.text("config block")?)?;
    let vocab = Vocabulary::from_file_str(r.text("vocabulary block")?)?;
    let count = r.u32("tensor count")?;
    if count % 2 != 0 {
        return Err(Error::Format(format!("odd tensor count {count}")));
    }
    let mut values = Vec::with_capacity(count.min(1024) / 2);
    let mut accs = Vec::with_capacity(count.min(1024) / 2);
    for i in 0..count {
        let (name, t) = r.tensor()?;
        if i < count / 2 {
            values.push((name, t));
        } else {
            let base = name
                .strip_prefix(ACC_PREFIX)
                .ok_or_else(|| Error::Format(format!("expected an accumulator, found `{name}`")))?;
            accs.push((base.to_string(), t));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_tensors(config, vocab, values, accs)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
