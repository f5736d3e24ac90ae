//! One directory per run:
//!
//! ```text
//! <run>/config.canonical
//! <run>/metrics.jsonl      per-step losses (deterministic)
//! <run>/timing.jsonl       wall-clock per step
//! <run>/checkpoints/step_00000500.ckpt
//! <run>/samples/<name>.{png,f32,json}
//! <run>/reports/
//! ```

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::{write_png_grid, Dataset};
use crate::error::{Error, Result};
use crate::sampler::{sample, BackboneDenoiser, SamplerConfig};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::trainer::metrics::{MetricsWriter, StepMetrics};
use crate::trainer::{TrainState, Trainer};

pub const CONFIG_FILE: &str = "config.canonical";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self::new(root);
        for d in [run.root.clone(), run.checkpoints(), run.samples(), run.reports()] {
            mkdir(&d)?;
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join(TIMING_FILE)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.ckpt"))
    }

    /// The highest-step regular checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
            if let Some(s) = step {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}

/// Everything a finished training run leaves in memory.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub state: TrainState,
    pub dataset: Dataset,
    pub last: Option<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// Train per `config` into `dir`, calling `on_step` after every step.
/// A non-finite loss stops the run after saving the pre-step state as
/// `checkpoints/failure_step_N.ckpt`.
pub fn train_run(config: &RunConfig, dir: &Path, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
    config.validate()?;
    let canonical = config.canonical()?;
    let run = RunDir::create(dir)?;
    std::fs::write(run.config(), &canonical).map_err(|e| Error::io(run.config(), e))?;
    let dataset = Dataset::from_config(&config.data)?;
    if dataset.num_classes > config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model.num_classes is {}",
            dataset.num_classes, config.model.num_classes
        )));
    }
    let trainer = Trainer::new(&config.model, &config.alignment, &config.train)?;
    let mut state = trainer.init_state()?;
    let mut writer = MetricsWriter::create(&run.metrics(), Some(&run.timing()))?;
    let every = config.train.checkpoint_every;
    let mut last = None;
    while state.step < config.train.steps {
        // A rejected step leaves parameters untouched; only the generator
        // has moved, so rewinding it restores the pre-step state.
        let rng = state.rng.clone();
        let m = match trainer.step_on(&mut state, &dataset) {
            Ok(m) => m,
            Err(e @ Error::Numerical(_)) => {
                state.rng = rng;
                let path = run.checkpoints().join(format!("failure_step_{:08}.ckpt", state.step + 1));
                save_checkpoint(&state, &canonical, &path)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writer.write(&m)?;
        on_step(&m);
        if every > 0 && state.step % every == 0 && state.step < config.train.steps {
            save_checkpoint(&state, &canonical, &run.checkpoint(state.step))?;
        }
        last = Some(m);
    }
    let checkpoint = run.checkpoint(state.step);
    save_checkpoint(&state, &canonical, &checkpoint)?;
    Ok(TrainOutcome {
        trainer,
        state,
        dataset,
        last,
        checkpoint,
    })
}

/// The run config stored inside a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::parse(&ckpt.trailer.config)
}

/// Sidecar describing a raw sample tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    /// `[batch, channels, height, width]`, little-endian f32, row-major.
    pub shape: Vec<usize>,
    pub dtype: String,
    pub seed: u64,
    pub classes: Vec<u32>,
    pub config_hash: String,
    pub sampler: SamplerConfig,
    pub checkpoint_step: u64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub images: Tensor,
    pub png: PathBuf,
    pub tensor: PathBuf,
    pub sidecar: PathBuf,
}

/// Generate images for `classes` from `ckpt` with `sampler`.
pub fn sample_checkpoint(ckpt: &Checkpoint, sampler: &SamplerConfig, classes: &[u32]) -> Result<Tensor> {
    sampler.validate()?;
    let config = checkpoint_config(ckpt)?;
    if let Some(c) = classes.iter().find(|&&c| c as usize >= config.model.num_classes) {
        return Err(Error::Usage(format!(
            "class {c} out of range for {} classes",
            config.model.num_classes
        )));
    }
    let dtype = config.train.precision.dtype();
    let params = ckpt.select(sampler.ema_decay()?)?.to_dtype(dtype)?;
    let backbone = Backbone::new(config.model.clone())?;
    let model = BackboneDenoiser::new(&backbone, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    sample(&model, sampler, classes, dtype, &mut rng)
}

/// Sample and write `<name>.png` (grid), `<name>.f32` and `<name>.json`
/// into `out_dir`.
pub fn write_samples(
    ckpt: &Checkpoint,
    sampler: &SamplerConfig,
    classes: &[u32],
    out_dir: &Path,
    name: &str,
) -> Result<SampleOutput> {
    let images = sample_checkpoint(ckpt, sampler, classes)?;
    mkdir(out_dir)?;
    let png = out_dir.join(format!("{name}.png"));
    let tensor = out_dir.join(format!("{name}.f32"));
    let sidecar = out_dir.join(format!("{name}.json"));
    let cols = (classes.len() as f64).sqrt().ceil().max(1.0) as usize;
    write_png_grid(&png, &images, cols)?;
    let values = images.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&tensor, bytes).map_err(|e| Error::io(&tensor, e))?;
    let meta = SampleSidecar {
        shape: images.dims().to_vec(),
        dtype: "f32-le".into(),
        seed: sampler.seed,
        classes: classes.to_vec(),
        config_hash: hex::encode(ckpt.config_hash),
        sampler: sampler.clone(),
        checkpoint_step: ckpt.trailer.step,
    };
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok(SampleOutput {
        images,
        png,
        tensor,
        sidecar,
    })
}

/// Read back a raw sample tensor written by [`write_samples`].
pub fn read_sample_tensor(tensor: &Path, sidecar: &Path) -> Result<Tensor> {
    let meta: SampleSidecar = serde_json::from_str(
        &std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?,
    )
    .map_err(|e| Error::corrupt(sidecar, e.to_string()))?;
    let bytes = std::fs::read(tensor).map_err(|e| Error::io(tensor, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::corrupt(tensor, format!("{} bytes for {n} f32 values", bytes.len())));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(values, meta.shape, &candle_core::Device::Cpu)?)
}

/// Load a checkpoint, optionally insisting it matches `config`.
pub fn open_checkpoint(path: &Path, config: Option<&RunConfig>) -> Result<Checkpoint> {
    let expected = config.map(RunConfig::hash).transpose()?;
    load_checkpoint(path, expected.as_ref())
}
