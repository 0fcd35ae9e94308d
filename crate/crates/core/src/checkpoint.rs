//! Flat binary checkpoint format.
//!
//! ```text
//! "SSUNETCKPT1\n"
//! u32  length of the config block in bytes
//!      config block: UTF-8 "key = value" lines (stage, then ArchConfig fields)
//! u32  tensor count
//! per tensor, in declaration order:
//!      u32 name length, name bytes (UTF-8)
//!      u32 rank, rank × u32 extents
//!      numel × f32 values
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use indexmap::IndexMap;

use crate::backbone::{ArchConfig, ModelParams, Stage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"SSUNETCKPT1\n";

fn config_block(arch: &ArchConfig, stage: Stage) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    line("stage", stage.as_str().to_owned());
    line("in_channels", arch.in_channels.to_string());
    line("base_width", arch.base_width.to_string());
    line("depth", arch.depth.to_string());
    line("dropout_rate", arch.dropout_rate.to_string());
    line("with_gsua", arch.with_gsua.to_string());
    line("with_msua", arch.with_msua.to_string());
    line("with_aleatoric_head", arch.with_aleatoric_head.to_string());
    line("gsua_ksize", arch.gsua_ksize.to_string());
    line("gsua_sigma", arch.gsua_sigma.to_string());
    s
}

fn parse_config_block(text: &str) -> Result<(ArchConfig, Stage)> {
    let mut kv = IndexMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::integrity(format!("checkpoint config line {line:?}")))?;
        kv.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    fn get<V: std::str::FromStr>(kv: &IndexMap<String, String>, key: &str) -> Result<V> {
        kv.get(key)
            .ok_or_else(|| Error::integrity(format!("checkpoint config lacks {key}")))?
            .parse()
            .map_err(|_| Error::integrity(format!("checkpoint config: bad value for {key}")))
    }
    let stage: String = get(&kv, "stage")?;
    let stage = stage
        .parse::<Stage>()
        .map_err(|e| Error::integrity(e.to_string()))?;
    let arch = ArchConfig {
        in_channels: get(&kv, "in_channels")?,
        base_width: get(&kv, "base_width")?,
        depth: get(&kv, "depth")?,
        dropout_rate: get(&kv, "dropout_rate")?,
        with_gsua: get(&kv, "with_gsua")?,
        with_msua: get(&kv, "with_msua")?,
        with_aleatoric_head: get(&kv, "with_aleatoric_head")?,
        gsua_ksize: get(&kv, "gsua_ksize")?,
        gsua_sigma: get(&kv, "gsua_sigma")?,
    };
    Ok((arch, stage))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let block = config_block(&params.arch, params.stage);
    put_u32(&mut out, block.len());
    out.extend_from_slice(block.as_bytes());
    put_u32(&mut out, params.tensors.len());
    for (name, t) in &params.tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &e in t.shape() {
            put_u32(&mut out, e);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
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
            .ok_or_else(|| Error::integrity("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::integrity("checkpoint: invalid UTF-8"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::integrity("not a checkpoint (bad magic)"));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let block_len = r.u32()?;
    let (arch, stage) = parse_config_block(r.utf8(block_len)?)?;
    let count = r.u32()?;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = r.utf8(name_len)?.to_owned();
        let rank = r.u32()?;
        if rank > 8 {
            return Err(Error::integrity(format!("checkpoint: {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::integrity("checkpoint: huge tensor"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data).map_err(|e| Error::integrity(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::integrity("checkpoint has trailing bytes"));
    }
    ModelParams::from_tensors(arch, stage, tensors).map_err(|e| match e {
        Error::Config(m) => Error::Integrity(m),
        other => other,
    })
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
