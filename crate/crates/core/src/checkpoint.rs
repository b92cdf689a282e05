//! RVCK checkpoint files.
//!
//! Layout: magic `RVCK`, `u32` version, then named tensors until end of
//! file. Each tensor is a `u16` name length and UTF-8 name, a `u8` rank,
//! `u32` dims and little-endian `f64` data. Besides the parameters a
//! checkpoint holds `meta.arch` (the model config), `meta.epoch`,
//! `meta.rng_state` (four `u64` words as eight `u32` halves),
//! `meta.config` (the run's config text, one byte per value),
//! `meta.has_velocity` and, when that is 1, `velocity.<param>` momentum
//! buffers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::rvssdh::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RVCK";
pub const VERSION: u32 = 1;

const ARCH: &str = "meta.arch";
const EPOCH: &str = "meta.epoch";
const RNG: &str = "meta.rng_state";
const CONFIG: &str = "meta.config";
const HAS_VELOCITY: &str = "meta.has_velocity";
const VELOCITY: &str = "velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams<f64>,
    pub velocity: Option<ModelParams<f64>>,
    /// Completed epochs.
    pub epoch: u32,
    pub rng_state: [u64; 4],
    pub config_text: String,
}

fn err(detail: impl Into<String>) -> Error {
    Error::format("RVCK", detail)
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_u16::<LittleEndian>(name.len() as u16)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(shape.len() as u8)?;
    for &d in shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let arch = self.model.to_record();
        write_tensor(w, ARCH, &[arch.len()], &arch)?;
        write_tensor(w, EPOCH, &[1], &[self.epoch as f64])?;
        let halves: Vec<f64> =
            self.rng_state.iter().flat_map(|&s| [(s & 0xffff_ffff) as f64, (s >> 32) as f64]).collect();
        write_tensor(w, RNG, &[8], &halves)?;
        let text: Vec<f64> = self.config_text.bytes().map(f64::from).collect();
        write_tensor(w, CONFIG, &[text.len()], &text)?;
        write_tensor(w, HAS_VELOCITY, &[1], &[if self.velocity.is_some() { 1.0 } else { 0.0 }])?;
        for (name, t) in self.params.named() {
            write_tensor(w, name, t.shape(), t.data())?;
        }
        if let Some(v) = &self.velocity {
            for (name, t) in v.named() {
                write_tensor(w, &format!("{VELOCITY}{name}"), t.shape(), t.data())?;
            }
        }
        Ok(())
    }

    /// Parses a checkpoint. With `expected` set, parameters must match that
    /// architecture; a mismatch is a shape error naming the tensor.
    pub fn read_from<R: Read>(r: &mut R, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut tensors = read_tensors(r)?;
        let mut take = |name: &str| take(&mut tensors, name);

        let stored = ModelConfig::from_record(take(ARCH)?.data())?;
        let model = match expected {
            Some(e) => e.clone(),
            None => stored,
        };
        let epoch = take(EPOCH)?.data().first().copied().unwrap_or(-1.0);
        if !(epoch >= 0.0 && epoch.fract() == 0.0 && epoch <= u32::MAX as f64) {
            return Err(err(format!("invalid epoch {epoch}")));
        }
        let halves = take(RNG)?;
        if halves.len() != 8 || halves.data().iter().any(|&h| !(h >= 0.0 && h.fract() == 0.0 && h <= u32::MAX as f64)) {
            return Err(err("invalid rng state"));
        }
        let mut rng_state = [0u64; 4];
        for (i, s) in rng_state.iter_mut().enumerate() {
            *s = halves.data()[2 * i] as u64 | (halves.data()[2 * i + 1] as u64) << 32;
        }
        let bytes: Option<Vec<u8>> = take(CONFIG)?
            .data()
            .iter()
            .map(|&b| (b >= 0.0 && b <= 255.0 && b.fract() == 0.0).then_some(b as u8))
            .collect();
        let config_text = bytes
            .and_then(|b| String::from_utf8(b).ok())
            .ok_or_else(|| err("config text is not UTF-8 bytes"))?;

        let has_velocity = match take(HAS_VELOCITY)?.data() {
            [v] if *v == 0.0 => false,
            [v] if *v == 1.0 => true,
            _ => return Err(err("invalid velocity flag")),
        };

        let available: usize = tensors.values().map(Tensor::len).sum();
        if model.param_count() > available {
            return Err(err(format!(
                "architecture needs {} parameters, file holds {available}",
                model.param_count()
            )));
        }
        let params = fill(&model, &mut tensors, "")?;
        let velocity = if has_velocity { Some(fill(&model, &mut tensors, VELOCITY)?) } else { None };
        if let Some(extra) = tensors.keys().next() {
            return Err(err(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint { model, params, velocity, epoch: epoch as u32, rng_state, config_text })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Checkpoint::read_from(&mut BufReader::new(File::open(path)?), expected)
    }
}

fn take(tensors: &mut BTreeMap<String, Tensor<f64>>, name: &str) -> Result<Tensor<f64>> {
    tensors.remove(name).ok_or_else(|| err(format!("missing tensor {name}")))
}

fn fill(model: &ModelConfig, tensors: &mut BTreeMap<String, Tensor<f64>>, prefix: &str) -> Result<ModelParams<f64>> {
    let mut params = ModelParams::<f64>::zeros(model);
    for (name, slot) in params.named_mut() {
        let key = format!("{prefix}{name}");
        let t = take(tensors, &key)?;
        if t.shape() != slot.shape() {
            return Err(Error::shape(format!(
                "tensor {key} has shape {:?}, architecture expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(params)
}

fn read_tensors<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor<f64>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
    if &magic != MAGIC {
        return Err(err(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| err("truncated header"))?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut out = BTreeMap::new();
    loop {
        let mut len = [0u8; 2];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r.read_exact(&mut len[1..]).map_err(|_| err("truncated tensor name"))?,
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| err("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| err("tensor name is not UTF-8"))?;
        let trunc = |_| err(format!("tensor {name} is truncated"));
        let ndim = r.read_u8().map_err(trunc)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| err(format!("tensor {name} has an overflowing shape")))?;
        let mut data = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            data.push(r.read_f64::<LittleEndian>().map_err(trunc)?);
        }
        if out.contains_key(&name) {
            return Err(err(format!("duplicate tensor {name}")));
        }
        let t = Tensor::new(&shape, data)?;
        out.insert(name, t);
    }
    Ok(out)
}
