//! Flat binary checkpoints.
//!
//! Layout: the magic bytes `PSCV1`, then one record per tensor until end of
//! file. A record is `name_len: u32`, `name: [u8; name_len]` (UTF-8),
//! `rank: u32`, `dims: [u64; rank]`, `values: [f64; prod(dims)]`, all
//! little-endian. Every parameter record is followed by its momentum buffer
//! under the name `momentum/<parameter name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelParams, Param};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PSCV1";
const MOMENTUM_PREFIX: &str = "momentum/";

fn put_record(buf: &mut Vec<u8>, name: &str, grid: &Grid) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(grid.rank() as u32).to_le_bytes());
    for &d in grid.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in grid.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    for p in params.iter() {
        put_record(&mut buf, &p.name, &p.value);
        put_record(&mut buf, &format!("{MOMENTUM_PREFIX}{}", p.name), &p.momentum);
    }
    buf
}

/// Writes the checkpoint atomically (temporary file, then rename).
pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = encode_checkpoint(params);
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<ModelParams, String> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err("missing PSCV1 magic".into());
    }
    let mut r = Reader { bytes, pos: CHECKPOINT_MAGIC.len() };
    let mut params: Vec<Param> = Vec::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let name_len = r.u32().ok_or_else(|| format!("truncated record at byte {at}"))? as usize;
        let name = r.take(name_len).ok_or("truncated name")?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| "parameter name is not UTF-8")?;
        let rank = r.u32().ok_or("truncated rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or("truncated dims")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("dims overflow")?;
        let raw = r.take(count.checked_mul(8).ok_or("dims overflow")?).ok_or("truncated values")?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let grid = Grid::from_vec(&shape, values).map_err(|e| format!("{name}: {e}"))?;

        if let Some(target) = name.strip_prefix(MOMENTUM_PREFIX) {
            let p = params
                .iter_mut()
                .rev()
                .find(|p| p.name == target)
                .ok_or_else(|| format!("momentum for unknown parameter {target}"))?;
            if p.value.shape() != grid.shape() {
                return Err(format!("momentum shape mismatch for {target}"));
            }
            p.momentum = grid;
        } else {
            let decay = name.ends_with(".weight");
            params.push(Param::new(name, grid, decay));
        }
    }
    ModelParams::new(params).map_err(|e| e.to_string())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::ingest(path, msg))
}
