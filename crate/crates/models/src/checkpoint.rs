//! Checkpoint directories: `weights.bin` (trainable tensors), `buffers.bin` (statistics,
//! codebooks, schedules) and `manifest.json` `{version, model, config, seed, step, losses}`.

use std::path::Path;

use dyadmotion_core::{Error, Result, Scalar};
use dyadmotion_nn::ParamStore;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: &str = "dyadmotion-ckpt/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub model: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: usize,
    /// Mean training loss per logging interval.
    pub losses: Vec<f64>,
}

impl Manifest {
    pub fn new<C: Serialize>(model: &str, config: &C, seed: u64, step: usize, losses: Vec<f64>) -> Result<Self> {
        Ok(Self {
            version: CHECKPOINT_VERSION.into(),
            model: model.into(),
            config: serde_json::to_value(config)?,
            seed,
            step,
            losses,
        })
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

pub fn write_checkpoint<T: Scalar>(dir: &Path, manifest: &Manifest, params: &ParamStore<T>, buffers: &ParamStore<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    params.save(&dir.join("weights.bin"))?;
    buffers.save(&dir.join("buffers.bin"))?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// Reads and checks the manifest of a checkpoint of kind `model`.
pub fn read_manifest(dir: &Path, model: &str) -> Result<Manifest> {
    let fail = |reason: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        reason,
    };
    let text = std::fs::read(dir.join("manifest.json")).map_err(|e| fail(format!("manifest.json: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| fail(format!("manifest.json: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion(manifest.version));
    }
    if manifest.model != model {
        return Err(fail(format!("holds a {} model, expected {model}", manifest.model)));
    }
    Ok(manifest)
}

/// Overwrites `params` and `buffers` (already shaped for the manifest's config) from disk.
pub fn read_stores<T: Scalar>(dir: &Path, params: &mut ParamStore<T>, buffers: &mut ParamStore<T>) -> Result<()> {
    let wrap = |e: Error| Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    };
    params.load_from(&dir.join("weights.bin")).map_err(wrap)?;
    buffers.load_from(&dir.join("buffers.bin")).map_err(wrap)?;
    Ok(())
}

/// Running mean of training losses, flushed every `every` steps.
#[derive(Clone, Debug, Default)]
pub struct LossLog {
    every: usize,
    acc: f64,
    n: usize,
    pub history: Vec<f64>,
}

impl LossLog {
    pub fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            ..Default::default()
        }
    }

    /// Records one step's loss; aborts on non-finite values.
    pub fn push(&mut self, model: &str, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged { model: model.into(), step });
        }
        self.acc += loss;
        self.n += 1;
        if self.n == self.every {
            let mean = self.acc / self.n as f64;
            log::info!("{model} step {}: loss {mean:.5}", step + 1);
            self.history.push(mean);
            self.acc = 0.0;
            self.n = 0;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<f64> {
        if self.n > 0 {
            self.history.push(self.acc / self.n as f64);
        }
        self.history
    }
}
