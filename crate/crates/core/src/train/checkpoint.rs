//! Checkpoint container: one safetensors file holding network parameters, batch-norm
//! statistics, both optimiser states and the image pool, with the experiment config and
//! counters stored as TOML in the file metadata.
//!
//! Tensor names: `g.*`, `f.*`, `d.*` for networks; `opt.gen.{m,v}.*` and
//! `opt.disc.{m,v}.*` for Adam moments; `pool.<slot>` for pooled images.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Networks, Trainer};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "noisycycle-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub package_version: String,
    pub classes: usize,
    /// Completed epochs and iterations.
    pub epoch: usize,
    pub iteration: u64,
    pub gen_steps: u64,
    pub disc_steps: u64,
    pub pool_len: usize,
    pub pool_cursor: usize,
    /// Word position of the pool's random stream, as a decimal string.
    pub pool_rng_word_pos: String,
    pub config: ExperimentConfig,
}

pub fn save(path: &Path, trainer: &Trainer, config: &ExperimentConfig) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = trainer.nets.state();
    let (gen, disc) = trainer.optimizers();
    for (k, v) in gen.state() {
        tensors.insert(format!("opt.gen.{k}"), v);
    }
    for (k, v) in disc.state() {
        tensors.insert(format!("opt.disc.{k}"), v);
    }
    for (i, img) in trainer.pool.slots().iter().enumerate() {
        tensors.insert(format!("pool.{i:04}"), img.clone());
    }
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        version: VERSION,
        package_version: env!("CARGO_PKG_VERSION").into(),
        classes: trainer.classes(),
        epoch: trainer.epoch,
        iteration: trainer.iteration,
        gen_steps: gen.step_count(),
        disc_steps: disc.step_count(),
        pool_len: trainer.pool.len(),
        pool_cursor: trainer.pool.cursor(),
        pool_rng_word_pos: trainer.pool.rng_word_pos().to_string(),
        config: config.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::file(path, e.to_string()))?;
    let mut info = HashMap::new();
    info.insert("meta".to_string(), text);
    // contiguous copies: safetensors serialises raw row-major bytes
    let tensors = tensors
        .into_iter()
        .map(|(k, v)| Ok((k, v.contiguous()?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    safetensors::serialize_to_file(tensors, Some(info), path)
        .map_err(|e| Error::file(path, e.to_string()))
}

/// A checkpoint read back from disk.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::file(path, format!("not a checkpoint: {e}")))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("meta"))
        .ok_or_else(|| Error::file(path, "checkpoint metadata missing"))?;
    let meta: CheckpointMeta =
        toml::from_str(text).map_err(|e| Error::file(path, format!("bad checkpoint metadata: {e}")))?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(Error::file(
            path,
            format!("unsupported checkpoint {} v{}", meta.format, meta.version),
        ));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?
        .into_iter()
        .collect();
    Ok(Checkpoint { meta, tensors })
}

fn strip(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

impl Checkpoint {
    /// Rebuilds the networks stored in the checkpoint.
    pub fn networks(&self, device: &Device) -> Result<Networks> {
        let cfg = self.meta.config.train_config();
        let mut nets = Networks::new(
            cfg.scale,
            self.meta.classes,
            cfg.seed,
            cfg.precision.dtype(),
            device,
        )?;
        nets.load(&self.tensors)?;
        Ok(nets)
    }

    /// Rebuilds the full training state, ready to continue with epoch `meta.epoch + 1`.
    pub fn trainer(&self, device: &Device) -> Result<Trainer> {
        let cfg = self.meta.config.train_config();
        let mut trainer = Trainer::new(cfg, self.meta.classes, device)?;
        trainer.nets.load(&self.tensors)?;
        let (gen, disc) = trainer.optimizers_mut();
        gen.load_state(&strip(&self.tensors, "opt.gen."), self.meta.gen_steps)?;
        disc.load_state(&strip(&self.tensors, "opt.disc."), self.meta.disc_steps)?;
        let slots = (0..self.meta.pool_len)
            .map(|i| {
                self.tensors
                    .get(&format!("pool.{i:04}"))
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks pool slot {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let word_pos: u128 = self
            .meta
            .pool_rng_word_pos
            .parse()
            .map_err(|_| Error::Invalid("bad pool stream position".into()))?;
        trainer.pool.restore(slots, self.meta.pool_cursor, word_pos)?;
        trainer.epoch = self.meta.epoch;
        trainer.iteration = self.meta.iteration;
        Ok(trainer)
    }
}
