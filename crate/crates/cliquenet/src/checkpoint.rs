//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CLQN" | version u32 | config length u32 | config JSON
//! | tensor count u32 | tensor*
//! | velocity count u32 | tensor*
//! | epoch u32 | RNG key [u8; 32]
//! tensor = name length u16 | name | rank u8 | dims u32 * rank | f32 * numel
//! ```
//!
//! Velocities carry the name of the parameter they belong to.

use std::path::Path;

use cliquenet_core::network::{build_model, ModelConfig};
use cliquenet_core::train::{OptimizerState, Trainer};
use cliquenet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{config_from_json, config_to_json};
use crate::error::{CliError, Result};
use crate::export::write_atomic;

pub const MAGIC: &[u8; 4] = b"CLQN";
pub const VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameters, then batch-norm running statistics.
    pub tensors: Vec<NamedTensor>,
    pub velocities: Vec<NamedTensor>,
    pub epoch: u32,
    pub rng: [u8; 32],
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| CliError::Usage(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| CliError::Usage(format!("rank of {name} exceeds 255")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| CliError::Usage(format!("dimension of {name} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_table(out: &mut Vec<u8>, table: &[NamedTensor]) -> Result<()> {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (n, t) in table {
        put_tensor(out, n, t)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::format("checkpoint", format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| CliError::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| CliError::format("checkpoint", format!("{name}: shape overflows")))?;
        let raw = self.take(numel.checked_mul(4).unwrap_or(usize::MAX), "tensor payload")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CliError::format("checkpoint", format!("{name}: {e}")))?;
        Ok((name, t))
    }

    fn table(&mut self) -> Result<Vec<NamedTensor>> {
        let n = self.u32("tensor count")? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer<f32>) -> Self {
        let params = &trainer.model.params;
        Self {
            config: trainer.model.config.clone(),
            tensors: params.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            velocities: params.names().into_iter().zip(trainer.optimizer.velocities.iter().cloned()).collect(),
            epoch: trainer.epoch as u32,
            rng: trainer.key,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = config_to_json(&self.config);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        put_table(&mut out, &self.tensors)?;
        put_table(&mut out, &self.velocities)?;
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CliError::format("checkpoint", "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CliError::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let json = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| CliError::format("checkpoint", "config is not UTF-8"))?;
        let config = config_from_json(json)?;
        let tensors = r.table()?;
        let velocities = r.table()?;
        let epoch = r.u32("epoch")?;
        let rng = r.take(32, "RNG state")?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err(CliError::format("checkpoint", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, tensors, velocities, epoch, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads the stored state into an existing trainer whose model must
    /// have exactly the same tensor names and shapes.
    pub fn restore_into(&self, trainer: &mut Trainer<f32>) -> Result<()> {
        trainer.model.params.load_named(&self.tensors)?;
        let names = trainer.model.params.names();
        let stored: std::collections::BTreeMap<&str, &Tensor<f32>> =
            self.velocities.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut velocities = Vec::with_capacity(names.len());
        for (name, current) in names.iter().zip(&trainer.optimizer.velocities) {
            match stored.get(name.as_str()) {
                Some(t) if t.shape() == current.shape() => velocities.push((*t).clone()),
                _ => return Err(CliError::Incompatible(format!("optimizer state lacks a matching velocity for {name}"))),
            }
        }
        if stored.len() != names.len() {
            return Err(CliError::Incompatible("optimizer state has extra velocities".into()));
        }
        trainer.optimizer.velocities = velocities;
        trainer.epoch = self.epoch as usize;
        trainer.key = self.rng;
        Ok(())
    }

    /// Rebuilds a trainer from the stored config alone.
    pub fn into_trainer(&self) -> Result<Trainer<f32>> {
        let model = build_model(&self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let optimizer = OptimizerState::new(&model.params);
        let mut trainer = Trainer { model, optimizer, epoch: 0, key: self.rng };
        self.restore_into(&mut trainer)?;
        Ok(trainer)
    }
}
