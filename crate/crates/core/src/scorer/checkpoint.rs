//! `PVSM` checkpoint files: header, f32 tensors W1, b1, W2, b2 in
//! row-major little-endian order, then length-prefixed JSON metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ScorerParams, TrainingLog};
use crate::error::{Error, Result};
use crate::lexical::{read_u16, read_u32};

const MAGIC: [u8; 4] = *b"PVSM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dropout_p: f64,
    pub seed: u64,
    pub feature_mode: String,
    pub log: TrainingLog,
}

fn write_f32s<'a, W: Write>(out: &mut W, values: impl Iterator<Item = &'a f32>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_checkpoint<W: Write>(mut out: W, params: &ScorerParams, meta: &CheckpointMeta) -> Result<()> {
    params.validate()?;
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for n in [params.input_dim(), params.hidden(), params.proj()] {
        out.write_all(&(n as u32).to_le_bytes())?;
    }
    out.write_all(&params.tau.to_le_bytes())?;
    write_f32s(&mut out, params.w1.iter())?;
    write_f32s(&mut out, params.b1.iter())?;
    write_f32s(&mut out, params.w2.iter())?;
    write_f32s(&mut out, params.b2.iter())?;
    let json = serde_json::to_vec(meta)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ScorerParams, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u16(&mut input)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let input_dim = read_u32(&mut input)? as usize;
    let hidden = read_u32(&mut input)? as usize;
    let proj = read_u32(&mut input)? as usize;
    let tau = f32::from_bits(read_u32(&mut input)?);
    let shape_err = |e: ndarray::ShapeError| Error::InvalidConfig(e.to_string());
    let w1 =
        Array2::from_shape_vec((hidden, input_dim), read_f32s(&mut input, hidden * input_dim)?).map_err(shape_err)?;
    let b1 = Array1::from(read_f32s(&mut input, hidden)?);
    let w2 = Array2::from_shape_vec((proj, hidden), read_f32s(&mut input, proj * hidden)?).map_err(shape_err)?;
    let b2 = Array1::from(read_f32s(&mut input, proj)?);
    let len = read_u32(&mut input)? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    let params = ScorerParams {
        w1,
        b1,
        w2,
        b2,
        tau,
        dropout_p: meta.dropout_p as f32,
    };
    params.validate()?;
    Ok((params, meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ScorerParams, meta: &CheckpointMeta) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, params, meta)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ScorerParams, CheckpointMeta)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
