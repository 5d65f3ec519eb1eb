//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CPNT`, `u32` version, 32-byte SHA-256 of
//! the config text, `u32` config length + UTF-8 config text, `u64` epoch,
//! `u8` RNG flag (+ 32-byte seed, `u64` stream, `u128` word position),
//! 32-byte plan digest, `u32` record count, then records of
//! `u16` name length, name, `u8` dtype tag, `u8` ndim, `u32` dims, raw values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{Trainer, TrainPlan};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{Model, NetworkConfig};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPNT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENTUM_PREFIX: &str = "momentum/";
const NORMALIZER_MEAN: &str = "normalizer.mean";
const NORMALIZER_STD: &str = "normalizer.std";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// A named tensor stored as raw little-endian bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn from_values<T: Real>(name: impl Into<String>, shape: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size());
        for &v in values {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            bytes,
        }
    }

    /// Decodes the values, converting between precisions when needed.
    pub fn values<T: Real>(&self) -> Vec<T> {
        let size = self.dtype.size();
        self.bytes
            .chunks_exact(size)
            .map(|b| match self.dtype {
                DType::F32 => T::from_f64_lossy(f32::read_le(b) as f64),
                DType::F64 => T::from_f64_lossy(f64::read_le(b)),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub rng: Option<RngState>,
    pub plan_digest: [u8; 32],
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Snapshots parameters and batch-norm statistics, plus optimizer state
    /// when a trainer is given.
    pub fn capture<T: Real>(model: &Model<T>, trainer: Option<&Trainer<T>>) -> Self {
        let mut records = Vec::new();
        let store = &model.params;
        for id in store.ids() {
            let spec = store.spec(id);
            records.push(Record::from_values(&spec.name, &spec.shape, store.get(id).data()));
        }
        for (name, bn) in store.bn_names().iter().zip(store.bn_states()) {
            let c = [bn.running_mean.len()];
            records.push(Record::from_values(format!("{name}.running_mean"), &c, &bn.running_mean));
            records.push(Record::from_values(format!("{name}.running_var"), &c, &bn.running_var));
        }
        let (epoch, rng, plan_digest) = match trainer {
            Some(t) => {
                for (spec, v) in store.specs().iter().zip(&t.velocity) {
                    records.push(Record::from_values(
                        format!("{MOMENTUM_PREFIX}{}", spec.name),
                        &spec.shape,
                        v.data(),
                    ));
                }
                records.push(Record::from_values(NORMALIZER_MEAN, &[3], &t.normalizer.mean));
                records.push(Record::from_values(NORMALIZER_STD, &[3], &t.normalizer.std));
                (t.epoch as u64, Some(RngState::capture(&t.rng)), t.plan.digest())
            }
            None => (0, None, [0; 32]),
        };
        Self {
            config_text: model.config.to_text(),
            epoch,
            rng,
            plan_digest,
            records,
        }
    }

    pub fn config(&self) -> Result<NetworkConfig> {
        NetworkConfig::from_text(&self.config_text)
    }

    fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn tensor<T: Real>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let r = self
            .record(name)
            .ok_or_else(|| Error::data(format!("checkpoint has no record {name}")))?;
        if r.shape != shape {
            return Err(Error::data(format!(
                "checkpoint record {name} has shape {:?}, model expects {shape:?}",
                r.shape
            )));
        }
        Ok(r.values())
    }

    /// Rebuilds the model from the stored config and loads every parameter
    /// and running statistic.
    pub fn restore_model<T: Real>(&self) -> Result<Model<T>> {
        let mut model = Model::build(&self.config()?)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let spec = model.params.spec(id).clone();
            let values = self.tensor(&spec.name, &spec.shape)?;
            *model.params.get_mut(id) = Tensor::new(&spec.shape, values)?;
        }
        let names = model.params.bn_names().to_vec();
        for (name, bn) in names.iter().zip(model.params.bn_states_mut()) {
            let c = [bn.running_mean.len()];
            bn.running_mean = self.tensor(&format!("{name}.running_mean"), &c)?;
            bn.running_var = self.tensor(&format!("{name}.running_var"), &c)?;
        }
        Ok(())
    }

    /// Input normalization stored alongside training state.
    pub fn normalizer(&self) -> Result<Normalizer> {
        let mean: Vec<f64> = self.tensor(NORMALIZER_MEAN, &[3])?;
        let std: Vec<f64> = self.tensor(NORMALIZER_STD, &[3])?;
        Ok(Normalizer {
            mean: [mean[0], mean[1], mean[2]],
            std: [std[0], std[1], std[2]],
        })
    }

    /// Restores optimizer state for `model` (already loaded). The plan must
    /// match the one the checkpoint was written under.
    pub fn restore_trainer<T: Real>(&self, plan: TrainPlan, model: &Model<T>) -> Result<Trainer<T>> {
        if plan.digest() != self.plan_digest {
            return Err(Error::config("training plan differs from the checkpointed plan"));
        }
        let rng = self
            .rng
            .as_ref()
            .ok_or_else(|| Error::data("checkpoint carries no training state"))?
            .restore();
        let normalizer = self.normalizer()?;
        let mut trainer = Trainer::resume(plan, model, normalizer, self.epoch as usize, rng);
        for (spec, v) in model.params.specs().iter().zip(trainer.velocity.iter_mut()) {
            let values = self.tensor(&format!("{MOMENTUM_PREFIX}{}", spec.name), &spec.shape)?;
            *v = Tensor::new(&spec.shape, values)?;
        }
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(self.config_text.as_bytes()));
        out.extend_from_slice(&len_u32(self.config_text.len(), "config text")?.to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.plan_digest);
        out.extend_from_slice(&len_u32(self.records.len(), "record count")?.to_le_bytes());
        for r in &self.records {
            let name_len = u16::try_from(r.name.len())
                .map_err(|_| Error::usage(format!("record name {} too long", r.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype.tag());
            out.push(
                u8::try_from(r.shape.len()).map_err(|_| Error::usage("tensor rank exceeds 255"))?,
            );
            for &d in &r.shape {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            out.extend_from_slice(&r.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let digest: [u8; 32] = c.array()?;
        let len = c.u32()? as usize;
        let config_text = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::data("checkpoint config text is not UTF-8"))?;
        if <[u8; 32]>::from(Sha256::digest(config_text.as_bytes())) != digest {
            return Err(Error::data("checkpoint config digest mismatch"));
        }
        let epoch = c.u64()?;
        let rng = match c.take(1)?[0] {
            0 => None,
            1 => Some(RngState {
                seed: c.array()?,
                stream: c.u64()?,
                word_pos: u128::from_le_bytes(c.array()?),
            }),
            f => return Err(Error::data(format!("bad RNG flag {f}"))),
        };
        let plan_digest = c.array()?;
        let count = c.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(c.array()?) as usize;
            let name = String::from_utf8(c.take(name_len)?.to_vec())
                .map_err(|_| Error::data("record name is not UTF-8"))?;
            let tag = c.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::data(format!("record {name}: unknown dtype tag {tag}")))?;
            let ndim = c.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = c.take(numel * dtype.size())?.to_vec();
            records.push(Record {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if c.pos != bytes.len() {
            return Err(Error::data(format!(
                "{} trailing bytes after checkpoint records",
                bytes.len() - c.pos
            )));
        }
        Ok(Self {
            config_text,
            epoch,
            rng,
            plan_digest,
            records,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::usage(format!("{what} {n} does not fit in 32 bits")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::data(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
