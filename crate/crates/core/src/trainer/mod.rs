//! Optimization loop: loss assembly, Adam with global-norm clipping, EMA
//! shadows, and per-step metrics.
//!
//! Per step, randomness is drawn from the state's generator in a fixed order
//! (batch indices, timesteps, noise, label dropout, patch mask), so a run is a
//! pure function of `(config, seed, data)` and resumes exactly from a
//! checkpoint.

pub mod checkpoint;
pub mod metrics;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    alignment_loss, sample_mask, total_loss, AlignmentConfig, AlignmentHead, AlignmentVariant, PatchMask,
    SemanticEncoder,
};
use crate::backbone::{Backbone, ModelConfig};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::flow::{denoising_loss, interpolate_batch, randn, sample_timesteps, TimestepDistribution, SINGULARITY_GUARD};
use crate::params::{ParamSpec, ParamStore, TensorMap};
use crate::sampler::all_finite;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{MetricsWriter, StepMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub ema_decays: Vec<f64>,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Probability of replacing a label by the null class.
    pub class_drop_prob: f64,
    pub timesteps: TimestepDistribution,
    pub precision: Precision,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            betas: [0.9, 0.95],
            adam_eps: 1e-8,
            batch_size: 16,
            steps: 1000,
            ema_decays: vec![0.9996, 0.9998, 0.9999],
            seed: 0,
            grad_clip: 1.0,
            class_drop_prob: 0.1,
            timesteps: TimestepDistribution::Uniform,
            precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("train.betas {:?} outside [0, 1)", self.betas)));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("train.adam_eps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if let Some(d) = self.ema_decays.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::Config(format!("train.ema_decays entry {d} outside [0, 1]")));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("train.grad_clip must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            return Err(Error::Config("train.class_drop_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// An exponentially averaged copy of the parameters.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    pub decay: f64,
    pub params: TensorMap,
}

/// `decay·shadow + (1 − decay)·params`, element-wise.
pub fn ema_update(shadow: &TensorMap, params: &TensorMap, decay: f64) -> Result<TensorMap> {
    if shadow.len() != params.len() || shadow.names().zip(params.names()).any(|(a, b)| a != b) {
        return Err(Error::State("EMA shadow and parameters have different names".into()));
    }
    shadow
        .iter()
        .map(|(name, s)| {
            let p = params.get(name)?.detach();
            if s.dims() != p.dims() {
                return Err(Error::State(format!("EMA shape mismatch for {name}")));
            }
            Ok((name.to_string(), (s.affine(decay, 0.0)? + p.affine(1.0 - decay, 0.0)?)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Everything the optimizer owns.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam_m: TensorMap,
    pub adam_v: TensorMap,
    pub step: u64,
    pub ema: Vec<EmaShadow>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: &TensorMap, ema_decays: &[f64], seed: u64) -> Result<Self> {
        let params_store = ParamStore::from_map(params)?;
        let snapshot = params_store.snapshot()?;
        Ok(Self {
            adam_m: snapshot.zeros_like()?,
            adam_v: snapshot.zeros_like()?,
            ema: ema_decays
                .iter()
                .map(|&decay| Ok(EmaShadow { decay, params: snapshot.detached_copy()? }))
                .collect::<Result<_>>()?,
            params: params_store,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn ema(&self, decay: f64) -> Option<&EmaShadow> {
        self.ema.iter().find(|e| e.decay == decay)
    }

    /// Parameters to sample from: an EMA shadow, or the raw weights.
    pub fn select(&self, ema: Option<f64>) -> Result<TensorMap> {
        match ema {
            None => self.params.snapshot(),
            Some(d) => self
                .ema(d)
                .map(|e| e.params.clone())
                .ok_or_else(|| Error::Usage(format!("no EMA shadow with decay {d}"))),
        }
    }
}

/// Random quantities consumed by one step.
#[derive(Debug, Clone)]
pub struct StepDraws {
    pub ts: Vec<f64>,
    pub eps: Tensor,
    /// Labels after dropout to the null class.
    pub labels: Vec<u32>,
    pub mask: Option<PatchMask>,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub denoise: Tensor,
    pub align: Option<Tensor>,
    pub total: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Backbone, alignment head, and frozen encoder under one training config.
#[derive(Debug, Clone)]
pub struct Trainer {
    backbone: Backbone,
    head: AlignmentHead,
    encoder: Option<SemanticEncoder>,
    align: AlignmentConfig,
    train: TrainConfig,
}

impl Trainer {
    pub fn new(model: &ModelConfig, align: &AlignmentConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        align.validate()?;
        let backbone = Backbone::new(model.clone())?;
        // The encoder is only built (and its files only read) when needed.
        let encoder = if align.variant.is_active() {
            Some(SemanticEncoder::new(&align.encoder, model.image_size, model.channels)?)
        } else {
            None
        };
        let feature_dim = encoder.as_ref().map_or(align.encoder.feature_dim, |e| e.feature_dim());
        let head = AlignmentHead::new(align, model, feature_dim)?;
        Ok(Self {
            backbone,
            head,
            encoder,
            align: align.clone(),
            train: train.clone(),
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &AlignmentHead {
        &self.head
    }

    pub fn encoder(&self) -> Option<&SemanticEncoder> {
        self.encoder.as_ref()
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn dtype(&self) -> DType {
        self.train.precision.dtype()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone.param_specs();
        specs.extend(self.head.param_specs());
        specs
    }

    pub fn init_params(&self) -> Result<TensorMap> {
        TensorMap::initialize(&self.param_specs(), self.train.seed, self.dtype(), &Device::Cpu)
    }

    pub fn init_state(&self) -> Result<TrainState> {
        TrainState::new(&self.init_params()?, &self.train.ema_decays, self.train.seed)
    }

    /// Indices of the next minibatch; the whole set when it is no larger
    /// than the batch size.
    pub fn batch_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        if self.train.batch_size >= n {
            return Ok((0..n).collect());
        }
        Ok(sample_indices(rng, n, self.train.batch_size).into_vec())
    }

    pub fn draw<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<StepDraws> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let b = batch.len();
        let ts = sample_timesteps(b, self.train.timesteps, SINGULARITY_GUARD, rng)?;
        let eps = randn(batch.images.dims(), self.dtype(), &Device::Cpu, rng)?;
        let null = self.backbone.config().null_class();
        let labels = batch
            .labels
            .iter()
            .map(|&y| if rng.random::<f64>() < self.train.class_drop_prob { null } else { y })
            .collect();
        let mask = match self.align.variant {
            AlignmentVariant::Mta => Some(sample_mask(b, self.backbone.config().num_patches(), self.align.mask_ratio, rng)?),
            _ => None,
        };
        Ok(StepDraws { ts, eps, labels, mask })
    }

    /// Denoising and alignment losses as differentiable scalars; `total`
    /// uses the configured λ.
    pub fn losses(&self, params: &TensorMap, batch: &Batch, draws: &StepDraws) -> Result<LossTerms> {
        let (denoise, align) = self.loss_parts(params, batch, draws)?;
        let total = total_loss(&denoise, align.as_ref(), self.align.lambda, self.align.variant)?;
        Ok(LossTerms { denoise, align, total })
    }

    /// The two loss terms without combining them.
    pub fn loss_parts(&self, params: &TensorMap, batch: &Batch, draws: &StepDraws) -> Result<(Tensor, Option<Tensor>)> {
        let x = batch.images.to_dtype(self.dtype())?;
        let x_t = interpolate_batch(&x, &draws.eps, &draws.ts)?;
        let out = self.backbone.forward(params, &x_t, &draws.ts, &draws.labels)?;
        let denoise = denoising_loss(&out.x_pred, &x_t, &x, &draws.eps, &draws.ts, SINGULARITY_GUARD)?;
        let align = match &self.encoder {
            Some(encoder) if self.head.variant().is_active() => {
                let grid = (out.h_align.rows, out.h_align.cols);
                let target = encoder.encode_target(&x, &batch.ids, grid)?;
                let pred = self
                    .head
                    .predict(params, &out.h_align, &out.cond, draws.mask.as_ref())?
                    .ok_or_else(|| Error::State("active head produced no prediction".into()))?;
                Some(alignment_loss(&target, &pred)?)
            }
            _ => None,
        };
        Ok((denoise, align))
    }

    /// Gradient of the total loss with respect to every variable in `store`
    /// (zeros where the loss does not depend on it), plus the loss value.
    pub fn gradients(&self, store: &ParamStore, batch: &Batch, draws: &StepDraws) -> Result<(f64, TensorMap)> {
        let terms = self.losses(&store.view(), batch, draws)?;
        let grads = terms.total.backward()?;
        let mut out = TensorMap::new();
        for (name, v) in store.names().iter().zip(store.vars()) {
            let g = match grads.get(v.as_tensor()) {
                Some(g) => g.detach(),
                None => v.as_tensor().zeros_like()?,
            };
            out.insert(name.clone(), g);
        }
        Ok((scalar(&terms.total)?, out))
    }

    /// Backward through `total`, clip, one Adam update, then every EMA shadow.
    /// Returns the pre-clip global gradient norm.
    pub fn apply(&self, state: &mut TrainState, total: &Tensor) -> Result<f64> {
        let grads = total.backward()?;
        let vars = state.params.vars();
        let names = state.params.names().to_vec();
        let mut gs = Vec::with_capacity(vars.len());
        let mut sq = 0.0;
        for v in vars {
            // Gradients carry their own op history; keep none of it.
            let g = match grads.get(v.as_tensor()) {
                Some(g) => g.detach(),
                None => v.as_tensor().zeros_like()?,
            };
            sq += scalar(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
            gs.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("step {}: non-finite gradient norm", state.step + 1)));
        }
        let clip = if self.train.grad_clip > 0.0 && norm > self.train.grad_clip {
            self.train.grad_clip / norm
        } else {
            1.0
        };

        state.step += 1;
        let [b1, b2] = self.train.betas;
        let bc1 = 1.0 - b1.powi(state.step as i32);
        let bc2 = 1.0 - b2.powi(state.step as i32);
        let lr = self.train.lr;
        for ((var, g), name) in vars.iter().zip(&gs).zip(&names) {
            let g = g.affine(clip, 0.0)?;
            let m = (state.adam_m.get(name)?.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            let v = (state.adam_v.get(name)?.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.train.adam_eps)?;
            let update = (m.affine(lr / bc1, 0.0)? / denom)?;
            var.set(&(var.as_tensor() - update)?.detach())?;
            state.adam_m.insert(name.clone(), m);
            state.adam_v.insert(name.clone(), v);
        }
        let current = state.params.snapshot()?;
        for shadow in &mut state.ema {
            shadow.params = ema_update(&shadow.params, &current, shadow.decay)?;
        }
        Ok(norm)
    }

    /// One optimizer step on `batch`, drawing noise from the state's generator.
    pub fn train_step(&self, state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
        let mut rng = state.rng.clone();
        let draws = self.draw(batch, &mut rng)?;
        state.rng = rng;
        self.train_step_with(state, batch, &draws)
    }

    pub fn train_step_with(&self, state: &mut TrainState, batch: &Batch, draws: &StepDraws) -> Result<StepMetrics> {
        let params = state.params.view();
        let terms = self.losses(&params, batch, draws)?;
        let l_denoise = scalar(&terms.denoise)?;
        let l_align = terms.align.as_ref().map(scalar).transpose()?;
        let total = scalar(&terms.total)?;
        if !total.is_finite() || !all_finite(&terms.total)? {
            return Err(Error::Numerical(format!(
                "step {}: non-finite loss (l_denoise={l_denoise}, l_align={l_align:?}, t={:?}, labels={:?})",
                state.step + 1,
                draws.ts,
                draws.labels
            )));
        }
        let grad_norm = self.apply(state, &terms.total)?;
        Ok(StepMetrics {
            step: state.step,
            l_denoise,
            l_align,
            total,
            grad_norm,
        })
    }

    /// Pick a minibatch from `data` with the state's generator, then step.
    pub fn step_on(&self, state: &mut TrainState, data: &Dataset) -> Result<StepMetrics> {
        let idx = self.batch_indices(data.len(), &mut state.rng)?;
        let batch = data.batch(&idx, self.dtype())?;
        self.train_step(state, &batch)
    }

    /// Total loss at fixed draws without touching the state.
    pub fn evaluate(&self, params: &TensorMap, batch: &Batch, draws: &StepDraws) -> Result<f64> {
        scalar(&self.losses(params, batch, draws)?.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataConfig, DatasetKind};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 3,
            patch_size: 2,
            depth: 3,
            hidden_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            in_context_tokens: 2,
            in_context_start_block: 2,
            alignment_depth: 1,
            time_embed_dim: 8,
        }
    }

    fn tiny_data() -> Dataset {
        Dataset::generate(&DataConfig {
            kind: DatasetKind::Shapes,
            num_classes: 3,
            per_class: 4,
            image_size: 8,
            ..DataConfig::default()
        })
        .unwrap()
    }

    fn trainer(variant: AlignmentVariant) -> Trainer {
        let mut align = AlignmentConfig { variant, ..AlignmentConfig::default() };
        align.encoder.grid = 2;
        align.encoder.feature_dim = 8;
        let train = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        Trainer::new(&tiny_model(), &align, &train).unwrap()
    }

    fn collect(variant: AlignmentVariant, steps: usize) -> Vec<StepMetrics> {
        let t = trainer(variant);
        let data = tiny_data();
        let mut state = t.init_state().unwrap();
        (0..steps).map(|_| t.step_on(&mut state, &data).unwrap()).collect()
    }

    #[test]
    fn ema_arithmetic() {
        let dev = Device::Cpu;
        let s: TensorMap = [("a".to_string(), Tensor::new(&[0.0f64, 2.0], &dev).unwrap())].into_iter().collect();
        let p: TensorMap = [("a".to_string(), Tensor::new(&[1.0f64, 1.0], &dev).unwrap())].into_iter().collect();
        let v = |m: TensorMap| m.flat_values("a").unwrap();
        assert_eq!(v(ema_update(&s, &p, 1.0).unwrap()), vec![0.0, 2.0]);
        assert_eq!(v(ema_update(&s, &p, 0.0).unwrap()), vec![1.0, 1.0]);
        assert!((v(ema_update(&s, &p, 0.9999).unwrap())[0] - 1e-4).abs() < 1e-15);
        let q: TensorMap = [("b".to_string(), Tensor::new(&[1.0f64, 1.0], &dev).unwrap())].into_iter().collect();
        assert!(matches!(ema_update(&s, &q, 0.5), Err(Error::State(_))));
    }

    #[test]
    fn none_branch_reports_no_alignment() {
        for m in collect(AlignmentVariant::None, 2) {
            assert!(m.l_align.is_none());
            assert_eq!(m.total, m.l_denoise);
        }
        for m in collect(AlignmentVariant::Mta, 2) {
            assert!(m.l_align.is_some());
        }
    }

    #[test]
    fn metrics_are_deterministic() {
        assert_eq!(collect(AlignmentVariant::Mlp, 3), collect(AlignmentVariant::Mlp, 3));
    }

    #[test]
    fn ema_shadows_cover_every_parameter() {
        let t = trainer(AlignmentVariant::Mta);
        let data = tiny_data();
        let mut state = t.init_state().unwrap();
        t.step_on(&mut state, &data).unwrap();
        assert_eq!(state.ema.len(), 3);
        for e in &state.ema {
            assert!(e.params.names().eq(state.params.names().iter().map(String::as_str)));
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_lambda_leaves_adapter_untouched() {
        let t = trainer(AlignmentVariant::Mta);
        let data = tiny_data();
        let mut state = t.init_state().unwrap();
        let before = state.params.snapshot().unwrap();
        let batch = data.batch(&[0, 1, 2, 3], t.dtype()).unwrap();
        let draws = t.draw(&batch, &mut state.rng.clone()).unwrap();
        let (d, a) = t.loss_parts(&state.params.view(), &batch, &draws).unwrap();
        let total = (d + a.unwrap().affine(0.0, 0.0).unwrap()).unwrap();
        t.apply(&mut state, &total).unwrap();
        let after = state.params.snapshot().unwrap();
        let mut backbone_moved = false;
        for name in before.names() {
            let bits = |m: &TensorMap| crate::params::tensor_bits(m.get(name).unwrap()).unwrap();
            let same = bits(&before) == bits(&after);
            if name.starts_with("align.") {
                assert!(same, "{name} changed");
            } else if !same {
                backbone_moved = true;
            }
        }
        assert!(backbone_moved);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { ema_decays: vec![1.5], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
