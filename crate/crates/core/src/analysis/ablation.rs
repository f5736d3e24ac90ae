//! Mask-ratio sweep: one masked-adapter run per (ratio, seed), each scored
//! by denoising loss, Fréchet distance of generated vs. real pooled encoder
//! features, and per-class sample diversity.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::Serialize;

use super::{diversity_score, frechet_distance, tensor_rows, FeatureSet};
use crate::alignment::{AlignmentVariant, SemanticEncoder};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::{sample_checkpoint, train_run};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::metrics::StepMetrics;

/// Steps averaged for the final-loss columns.
const TAIL: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub seed: u64,
    pub final_denoise: f64,
    pub final_align: f64,
    pub frechet: f64,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const METRICS: [&str; 4] = ["final_denoise", "final_align", "frechet", "diversity"];

impl AblationRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "final_denoise" => self.final_denoise,
            "final_align" => self.final_align,
            "frechet" => self.frechet,
            "diversity" => self.diversity,
            _ => return None,
        })
    }
}

impl AblationTable {
    /// Distinct ratios in first-seen order.
    pub fn ratios(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.ratio) {
                out.push(r.ratio);
            }
        }
        out
    }

    /// Seed-averaged value of `metric` at `ratio`.
    pub fn mean(&self, metric: &str, ratio: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.ratio == ratio)
            .filter_map(|r| r.metric(metric))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One row per metric, one column per ratio (seed means).
    pub fn wide(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let ratios = self.ratios();
        let mut header = vec!["metric".to_string()];
        header.extend(ratios.iter().map(|r| format!("r={r}")));
        let body = METRICS
            .iter()
            .map(|m| {
                let mut row = vec![m.to_string()];
                row.extend(ratios.iter().map(|&r| format!("{:.6}", self.mean(m, r).unwrap_or(f64::NAN))));
                row
            })
            .collect();
        (header, body)
    }
}

/// Pooled features and per-class pixel diversity of generated samples.
fn score_samples(
    encoder: &SemanticEncoder,
    images: &Tensor,
    classes: &[u32],
    reference: &FeatureSet,
) -> Result<(f64, f64)> {
    let ids: Vec<String> = (0..classes.len()).map(|i| format!("gen{i:06}")).collect();
    let generated = FeatureSet::encode(encoder, images, &ids, classes)?;
    let frechet = frechet_distance(&generated.pooled, &reference.pooled)?;
    let pixels = tensor_rows(images)?;
    let mut per_class = Vec::new();
    for c in generated.classes() {
        let rows: Vec<Vec<f64>> = generated.members(c).into_iter().map(|i| pixels[i].clone()).collect();
        if rows.len() >= 2 {
            per_class.push(diversity_score(&rows)?);
        }
    }
    if per_class.is_empty() {
        return Err(Error::InvalidInput("need at least two samples of some class".into()));
    }
    Ok((frechet, per_class.iter().sum::<f64>() / per_class.len() as f64))
}

/// Train and score one masked-adapter model per `(ratio, seed)` under
/// `out_dir/r<ratio>_s<seed>`. Ratio 0 is the adapter without masking.
pub fn run_mask_ablation(
    base: &RunConfig,
    ratios: &[f64],
    seeds: &[u64],
    out_dir: &Path,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if ratios.is_empty() {
        return Err(Error::InvalidInput("mask ablation needs at least one ratio".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidInput("mask ablation needs at least one seed".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::InvalidInput(format!("mask ratio {r} outside [0, 1)")));
    }
    base.validate()?;
    let mut table = AblationTable::default();
    for &ratio in ratios {
        for &seed in seeds {
            let mut config = base.clone();
            config.alignment.variant = AlignmentVariant::Mta;
            config.alignment.mask_ratio = ratio;
            config.train.seed = seed;
            config.validate()?;
            let mut metrics = Vec::new();
            let out = train_run(&config, &out_dir.join(format!("r{ratio}_s{seed}")), |m| metrics.push(m.clone()))?;
            let tail = &metrics[metrics.len().saturating_sub(TAIL)..];
            let mean = |f: &dyn Fn(&StepMetrics) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
            let final_denoise = mean(&|m| m.l_denoise);
            let final_align = mean(&|m| m.l_align.unwrap_or(f64::NAN));

            let encoder = SemanticEncoder::new(&config.alignment.encoder, config.model.image_size, config.model.channels)?;
            let all: Vec<usize> = (0..out.dataset.len()).collect();
            let real = out.dataset.batch(&all, DType::F64)?;
            let reference = FeatureSet::encode(&encoder, &real.images, &real.ids, &real.labels)?;
            let classes: Vec<u32> = (0..out.dataset.num_classes as u32)
                .flat_map(|c| std::iter::repeat_n(c, config.analysis.samples_per_class))
                .collect();
            let ckpt = Checkpoint::from_state(&out.state, &config.canonical()?)?;
            let images = sample_checkpoint(&ckpt, &config.sampler, &classes)?;
            let (frechet, diversity) = score_samples(&encoder, &images, &classes, &reference)?;
            let row = AblationRow {
                ratio,
                seed,
                final_denoise,
                final_align,
                frechet,
                diversity,
            };
            progress(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}
