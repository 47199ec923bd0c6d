//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MNMTCKPT" | u32 version | u32 module count
//! per module: str name | u8 kind | str language | u64 vocab size
//!             u64 d_model | u64 blocks | u64 heads | u64 ff
//!             [u8; 32] vocabulary hash | u8 frozen | u32 param count
//!             per param: str name | u32 ndim | u64 dims... | f64 data...
//! u64 checksum (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes. Modules are written
//! in name order, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use modnmt_tensor::{Parameter, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{io_err, NmtError, Result};
use crate::model::{ArchConfig, LanguageModule, ModuleKind, ModuleRegistry};
use crate::tokenizer::VocabHash;

const MAGIC: &[u8; 8] = b"MNMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

pub fn to_bytes(registry: &ModuleRegistry) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(registry.len() as u32).to_le_bytes());
    for reg in registry.iter() {
        let m = &reg.module;
        let arch = m.arch();
        put_str(&mut out, m.name());
        out.push(m.kind().to_u8());
        put_str(&mut out, m.language());
        put_u64(&mut out, m.vocab_size());
        for v in [arch.d_model, arch.blocks, arch.heads, arch.ff] {
            put_u64(&mut out, v);
        }
        out.extend_from_slice(&reg.vocab_hash.0);
        out.push(u8::from(m.is_frozen()));
        out.extend_from_slice(&(m.params().len() as u32).to_le_bytes());
        for p in m.params() {
            put_str(&mut out, p.name());
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                put_u64(&mut out, d);
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NmtError::Checkpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| NmtError::Checkpoint("extent overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NmtError::Checkpoint("invalid UTF-8 string".into()))
    }
}

/// Parses a checkpoint. The checksum is verified before anything else is
/// decoded, so a damaged file never yields a partial registry.
pub fn from_bytes(bytes: &[u8]) -> Result<ModuleRegistry> {
    if bytes.len() < MAGIC.len() + 8 + 8 {
        return Err(NmtError::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(NmtError::Checkpoint("bad magic bytes".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(body);
    if stored != computed {
        return Err(NmtError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NmtError::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut registry = ModuleRegistry::new();
    for _ in 0..count {
        let name = r.str()?;
        let kind = ModuleKind::from_u8(r.u8()?).ok_or_else(|| NmtError::Checkpoint(format!("bad kind for {name}")))?;
        let language = r.str()?;
        let vocab_size = r.usize()?;
        let arch = ArchConfig {
            d_model: r.usize()?,
            blocks: r.usize()?,
            heads: r.usize()?,
            ff: r.usize()?,
        };
        let hash = VocabHash(r.take(32)?.try_into().expect("32 bytes"));
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(NmtError::Checkpoint(format!("bad freeze flag {v} for {name}"))),
        };
        let nparams = r.u32()?;
        let mut params = Vec::with_capacity(nparams as usize);
        for _ in 0..nparams {
            let pname = r.str()?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| NmtError::Checkpoint(format!("implausible shape {shape:?} for {pname}")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let mut p = Parameter::new(pname, Tensor::new(shape, data)?);
            p.set_frozen(frozen);
            params.push(p);
        }
        let module = LanguageModule::from_parts(kind, &language, vocab_size, arch, params)?;
        if module.name() != name {
            return Err(NmtError::Checkpoint(format!("record {name} holds module {}", module.name())));
        }
        registry.insert(module, hash)?;
    }
    if r.pos != body.len() {
        return Err(NmtError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(registry)
}

pub fn save(registry: &ModuleRegistry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(registry)).map_err(io_err(path))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModuleRegistry> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(io_err(path))?)
}
