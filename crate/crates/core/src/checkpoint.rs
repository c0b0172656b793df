//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "NOPELAB\0"
//! version      u32       FORMAT_VERSION
//! config_len   u32
//! config       config_len bytes of UTF-8 TOML (ExperimentConfig)
//! iteration    u64       completed optimisation steps
//! rng_seed     u64       batch-sampler seed
//! rng_stream   u64
//! rng_word_pos u128
//! adam_step    u64
//! n_records    u32
//! records      n_records × {
//!     name_len u32, name (UTF-8),
//!     dtype    u8  (1 = f64),
//!     ndim     u32, dims u64 × ndim,
//!     data     f64 × product(dims)
//! }
//! ```
//!
//! Records come in parameter order: every model parameter under its
//! `param_names` name, then `adam.m.<name>` and `adam.v.<name>` for each.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::model::init_params;
use crate::optim::OptimizerState;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"NOPELAB\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = trainer.config.to_toml();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(trainer.iter as u64).to_le_bytes());
    let rng = trainer.rng_state();
    out.extend_from_slice(&rng.seed.to_le_bytes());
    out.extend_from_slice(&rng.stream.to_le_bytes());
    out.extend_from_slice(&rng.word_pos.to_le_bytes());
    out.extend_from_slice(&trainer.optimizer.step.to_le_bytes());

    let names = trainer.model.param_names();
    let params = trainer.model.params();
    let opt = &trainer.optimizer;
    out.extend_from_slice(&((names.len() * 3) as u32).to_le_bytes());
    for (name, t) in names.iter().zip(&params) {
        write_record(&mut out, name, t);
    }
    for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
        for (name, t) in names.iter().zip(moments) {
            write_record(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    out
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LabError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("record name length")? as usize;
        let name = String::from_utf8(self.take(len, "record name")?.to_vec())
            .map_err(|_| LabError::Malformed("record name is not UTF-8".into()))?;
        let dtype = self.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(LabError::Malformed(format!(
                "record {name} has dtype tag {dtype}"
            )));
        }
        let ndim = self.u32("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8, &format!("data of {name}"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(LabError::BadMagic);
    }
    r.take(MAGIC.len(), "magic")?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(LabError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|_| LabError::Malformed("config is not UTF-8".into()))?;
    let config = ExperimentConfig::from_toml(text)?;
    let iter = r.u64("iteration")? as usize;
    let rng = RngState {
        seed: r.u64("rng seed")?,
        stream: r.u64("rng stream")?,
        word_pos: u128::from_le_bytes(r.array("rng position")?),
    };
    let adam_step = r.u64("optimizer step")?;
    let n_records = r.u32("record count")? as usize;

    // Structure (names, shapes, order) comes from the config; values from
    // the records.
    let mut model = init_params(&config.model, 0)?;
    let names = model.param_names();
    if n_records != names.len() * 3 {
        return Err(LabError::Malformed(format!(
            "expected {} records for this config, found {n_records}",
            names.len() * 3
        )));
    }
    let mut expect = |name: &str, like: &Tensor| -> Result<Tensor> {
        let (found, t) = r.record()?;
        if found != name || t.shape() != like.shape() {
            return Err(LabError::Malformed(format!(
                "expected record {name} {:?}, found {found} {:?}",
                like.shape(),
                t.shape()
            )));
        }
        Ok(t)
    };
    for (name, slot) in names.iter().zip(model.params_mut()) {
        *slot = expect(name, slot)?;
    }
    let params = model.params();
    let mut opt = OptimizerState::new(&params);
    opt.step = adam_step;
    for (name, (m, p)) in names.iter().zip(opt.m.iter_mut().zip(&params)) {
        *m = expect(&format!("adam.m.{name}"), p)?;
    }
    for (name, (v, p)) in names.iter().zip(opt.v.iter_mut().zip(&params)) {
        *v = expect(&format!("adam.v.{name}"), p)?;
    }
    if r.pos != bytes.len() {
        return Err(LabError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Trainer::from_parts(config, model, opt, iter, rng))
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    std::fs::write(path, encode(trainer)).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes)
}
