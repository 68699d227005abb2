//! Binary checkpoints, all integers and floats little-endian:
//!
//! ```text
//! "MSTL" | u32 version | u64 len, backbone config JSON
//! u32 stages, each u32 len + name
//! rng: 32-byte seed | u64 stream | u128 word position
//! u32 params, each u32 len + name | u32 ndim | u64 dims... | f64 values...
//! u32 buffers, each u32 len + name | u64 len | f64 values...
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Stage;
use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSTL";
pub const FORMAT_VERSION: u32 = 1;

/// A model plus the stages that produced it and the generator state to
/// resume from.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub provenance: Vec<Stage>,
    pub rng: ChaCha8Rng,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.model.config)?;
    out.extend((config.len() as u64).to_le_bytes());
    out.extend(&config);
    out.extend((ckpt.provenance.len() as u32).to_le_bytes());
    for s in &ckpt.provenance {
        put_str(&mut out, s.name());
    }
    out.extend(ckpt.rng.get_seed());
    out.extend(ckpt.rng.get_stream().to_le_bytes());
    out.extend(ckpt.rng.get_word_pos().to_le_bytes());
    out.extend((ckpt.model.params.len() as u32).to_le_bytes());
    for p in ckpt.model.params.iter() {
        put_str(&mut out, &p.name);
        out.extend((p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        put_f64s(&mut out, p.value.data());
    }
    let buffers = ckpt.model.buffers();
    out.extend((buffers.len() as u32).to_le_bytes());
    for (name, values) in &buffers {
        put_str(&mut out, name);
        out.extend((values.len() as u64).to_le_bytes());
        put_f64s(&mut out, values);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { self.u32()? as u64 };
        // a length can never exceed the bytes that remain
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated")));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len(false)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("oversized blob".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let n = r.len(true)?;
    let config: BackboneConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("unreadable backbone config: {e}")))?;
    config.validate().map_err(|e| Error::Checkpoint(format!("invalid backbone config: {e}")))?;

    let stages = r.u32()?;
    let mut provenance = Vec::new();
    for _ in 0..stages {
        let name = r.string()?;
        provenance.push(name.parse::<Stage>().map_err(|_| Error::Checkpoint(format!("unknown stage `{name}`")))?);
    }
    let mut rng = ChaCha8Rng::from_seed(r.array()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));

    let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Checkpoint(format!("cannot build model: {e}")))?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!("{count} parameters stored, architecture has {}", model.params.len())));
    }
    for i in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let p = model.params.iter().nth(i).expect("count checked");
        if p.name != name || p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {i} is `{name}` {shape:?}, architecture expects `{}` {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let values = r.f64s(p.value.len())?;
        let p = model.params.iter_mut().nth(i).expect("count checked");
        p.value = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let buffers = r.u32()?;
    for _ in 0..buffers {
        let name = r.string()?;
        let n = r.len(true)?;
        let values = r.f64s(n)?;
        model.set_buffer(&name, &values).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { model, provenance, rng })
}

/// Writes through a temporary sibling so a failed save never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
