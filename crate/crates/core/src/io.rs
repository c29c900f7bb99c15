//! Binary model checkpoints and dataset dumps.
//!
//! Both formats are little-endian: an 8-byte magic, a format version, a
//! length-prefixed JSON header echoing the configuration, then raw `f64`
//! bit patterns. Floats are never formatted as text, so a round trip is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{CpscError, Result};
use crate::model::{CpscModel, ModelConfig};
use crate::numeric::{Parameterized, Tensor2D};
use crate::synth::{Dataset, GenSpec, LabeledSample};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CPSCCKPT";
const DATASET_MAGIC: &[u8; 8] = b"CPSCDATA";
const FORMAT_VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> CpscError {
    CpscError::Format(msg.into())
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    put_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_len<R: Read>(r: &mut R, limit: u64, what: &str) -> Result<usize> {
    let n = get_u64(r)?;
    if n > limit {
        return Err(fmt_err(format!("{what} length {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

fn get_bytes<R: Read>(r: &mut R, limit: u64, what: &str) -> Result<Vec<u8>> {
    let n = get_len(r, limit, what)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn put_header<W: Write, T: Serialize>(w: &mut W, magic: &[u8; 8], header: &T) -> Result<()> {
    w.write_all(magic)?;
    put_u32(w, FORMAT_VERSION)?;
    put_bytes(w, &serde_json::to_vec(header)?)
}

fn get_header<R: Read, T: DeserializeOwned>(r: &mut R, magic: &[u8; 8]) -> Result<T> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(fmt_err("bad magic bytes"));
    }
    let v = get_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported format version {v}")));
    }
    let json = get_bytes(r, 1 << 24, "header")?;
    Ok(serde_json::from_slice(&json)?)
}

/// Writes every parameter block (name, shape, values) after a config echo.
pub fn write_checkpoint<W: Write>(mut w: W, model: &CpscModel) -> Result<()> {
    put_header(&mut w, CHECKPOINT_MAGIC, model.config())?;
    let params = model.params();
    put_u32(&mut w, params.len() as u32)?;
    for p in params {
        put_bytes(&mut w, p.name.as_bytes())?;
        let (rows, cols) = p.value.shape();
        put_u64(&mut w, rows as u64)?;
        put_u64(&mut w, cols as u64)?;
        put_f64s(&mut w, p.value.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a model from a checkpoint. Block names and shapes must match
/// the architecture implied by the echoed config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<CpscModel> {
    let config: ModelConfig = get_header(&mut r, CHECKPOINT_MAGIC)?;
    let mut model = CpscModel::new(config, 0)?;
    let count = get_u32(&mut r)? as usize;
    let mut blocks = model.params_mut();
    if count != blocks.len() {
        return Err(fmt_err(format!(
            "checkpoint has {count} blocks, architecture needs {}",
            blocks.len()
        )));
    }
    for p in blocks.iter_mut() {
        let name = String::from_utf8(get_bytes(&mut r, 256, "block name")?)
            .map_err(|_| fmt_err("block name is not UTF-8"))?;
        if name != p.name {
            return Err(fmt_err(format!("expected block {}, found {name}", p.name)));
        }
        let rows = get_len(&mut r, 1 << 24, "rows")?;
        let cols = get_len(&mut r, 1 << 24, "cols")?;
        if (rows, cols) != p.value.shape() {
            return Err(fmt_err(format!(
                "block {name}: shape {rows}x{cols}, expected {:?}",
                p.value.shape()
            )));
        }
        p.value = Tensor2D::from_vec(rows, cols, get_f64s(&mut r, rows * cols)?)?;
    }
    drop(blocks);
    model.zero_grads();
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &CpscModel) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model)
}

pub fn load_checkpoint(path: &Path) -> Result<CpscModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DatasetHeader {
    spec: GenSpec,
    classes: usize,
    dims: Vec<usize>,
    samples: usize,
}

/// Header, prototypes, then one record per sample: label, features, clean
/// shadows.
pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    let header = DatasetHeader {
        spec: data.spec.clone(),
        classes: data.prototypes.len(),
        dims: data.spec.input_dims(),
        samples: data.samples.len(),
    };
    put_header(&mut w, DATASET_MAGIC, &header)?;
    for per_class in &data.prototypes {
        for (proto, &d) in per_class.iter().zip(&header.dims) {
            if proto.len() != d {
                return Err(fmt_err("prototype width does not match spec"));
            }
            put_f64s(&mut w, proto)?;
        }
    }
    for s in &data.samples {
        put_u64(&mut w, s.label as u64)?;
        for (i, &d) in header.dims.iter().enumerate() {
            if s.features[i].len() != d || s.clean[i].len() != d {
                return Err(fmt_err("sample width does not match spec"));
            }
            put_f64s(&mut w, &s.features[i])?;
            put_f64s(&mut w, &s.clean[i])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let header: DatasetHeader = get_header(&mut r, DATASET_MAGIC)?;
    if header.dims != header.spec.input_dims() {
        return Err(fmt_err("header dims disagree with spec"));
    }
    let prototypes = (0..header.classes)
        .map(|_| header.dims.iter().map(|&d| get_f64s(&mut r, d)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(header.samples.min(1 << 20));
    for _ in 0..header.samples {
        let label = get_u64(&mut r)? as usize;
        if label >= header.classes {
            return Err(fmt_err(format!("label {label} out of range")));
        }
        let mut features = Vec::with_capacity(header.dims.len());
        let mut clean = Vec::with_capacity(header.dims.len());
        for &d in &header.dims {
            features.push(get_f64s(&mut r, d)?);
            clean.push(get_f64s(&mut r, d)?);
        }
        samples.push(LabeledSample { features, label, clean });
    }
    Ok(Dataset {
        spec: header.spec,
        prototypes,
        samples,
    })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), data)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
