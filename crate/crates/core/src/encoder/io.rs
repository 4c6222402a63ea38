//! Checkpoint, training history and embedding files.

use std::fs;
use std::path::Path;

use super::model::{Architecture, EncoderParams};
use super::train::TrainHistory;
use crate::error::{format_err, Error, Result};
use crate::fourier::{parse_labeled_csv, DescriptorRecord};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DSEQ";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `DSEQ`, u32 version, u32 dim count, the dims as u32, a u8 bias flag, then
/// the parameters followed by running means and variances as f64, all
/// little-endian.
pub fn encode_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let arch = params.architecture();
    let mut out = Vec::with_capacity(16 + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.dims.len() as u32).to_le_bytes());
    for &d in &arch.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(arch.bias as u8);
    let stats = params.running_mean().iter().chain(params.running_var()).flatten();
    for v in params.values().iter().chain(stats) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("checkpoint", 0, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err("checkpoint", 0, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(format_err("checkpoint", 0, "missing DSEQ magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err("checkpoint", 0, format!("unsupported version {version}")));
    }
    let n_dims = c.u32()? as usize;
    if n_dims > 64 {
        return Err(format_err("checkpoint", 0, format!("{n_dims} layer widths")));
    }
    let dims = (0..n_dims).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let bias = match c.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(format_err("checkpoint", 0, format!("bias flag {b}"))),
    };
    let arch = Architecture { dims, bias };
    let layout = arch.layout();
    let values = c.f64s(layout.total)?;
    let hidden: Vec<usize> = layout.layers.iter().filter(|l| l.norm.is_some()).map(|l| l.fan_out).collect();
    let mut read_stats = || hidden.iter().map(|&n| c.f64s(n)).collect::<Result<Vec<_>>>();
    let running_mean = read_stats()?;
    let running_var = read_stats()?;
    if c.pos != bytes.len() {
        return Err(format_err("checkpoint", 0, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    if values.iter().chain(running_mean.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint values".into()));
    }
    EncoderParams::from_parts(arch, values, running_mean, running_var)
}

pub fn write_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    fs::write(path, history.to_csv())?;
    Ok(())
}

/// Specimen embeddings with their identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub specimen_ids: Vec<String>,
    pub species_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn to_csv(&self) -> String {
        let dim = self.rows.first().map_or(0, Vec::len);
        let mut out = String::from("specimen_id,species_id");
        for i in 0..dim {
            out.push_str(&format!(",e{i}"));
        }
        out.push('\n');
        for ((id, sp), row) in self.specimen_ids.iter().zip(&self.species_ids).zip(&self.rows) {
            out.push_str(id);
            out.push(',');
            out.push_str(sp);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let records = parse_labeled_csv(text, "embedding", "e")?;
        Ok(Self::from_records(records))
    }

    fn from_records(records: Vec<DescriptorRecord>) -> Self {
        let mut m = EmbeddingMatrix {
            specimen_ids: Vec::with_capacity(records.len()),
            species_ids: Vec::with_capacity(records.len()),
            rows: Vec::with_capacity(records.len()),
        };
        for r in records {
            m.specimen_ids.push(r.specimen_id);
            m.species_ids.push(r.species_id);
            m.rows.push(r.values);
        }
        m
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_csv(&text)
    }
}
