//! Linear-interpolant flow matching.
//!
//! Data sits at `t = 1` and noise at `t = 0`: `x_t = t·x + (1−t)·eps`, with
//! target velocity `v = x − eps`. The denoiser predicts the clean image, and
//! its velocity is recovered as `(x_pred − x_t) / (1 − t)`, which has a pole at
//! `t = 1`; every entry point here refuses timesteps closer than
//! [`SINGULARITY_GUARD`] to it.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default distance kept from the `t = 1` pole.
pub const SINGULARITY_GUARD: f64 = 1e-3;

/// Coefficients of the linear schedule `x_t = a(t)·x + b(t)·eps`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinearSchedule;

impl LinearSchedule {
    pub fn data_coeff(&self, t: f64) -> f64 {
        t
    }

    pub fn noise_coeff(&self, t: f64) -> f64 {
        1.0 - t
    }
}

/// One fully materialized point on the interpolant path.
#[derive(Debug, Clone)]
pub struct InterpolantState {
    pub x: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v: Tensor,
}

impl InterpolantState {
    pub fn new(x: &Tensor, eps: &Tensor, t: f64) -> Result<Self> {
        let x_t = interpolate(x, eps, t)?;
        let v = target_velocity(x, eps)?;
        Ok(Self {
            x: x.clone(),
            eps: eps.clone(),
            t,
            x_t,
            v,
        })
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidInput(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_unit_interval(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_guard(t: f64, guard: f64) -> Result<()> {
    if t > 1.0 - guard {
        return Err(Error::Singularity { t, guard });
    }
    Ok(())
}

/// `t·x + (1−t)·eps`. Both endpoints are reproduced exactly.
pub fn interpolate(x: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_same_shape(x, eps, "interpolate")?;
    check_unit_interval(t)?;
    let schedule = LinearSchedule;
    Ok((x.affine(schedule.data_coeff(t), 0.0)? + eps.affine(schedule.noise_coeff(t), 0.0)?)?)
}

/// Per-sample timesteps broadcast against a `[batch, ...]` tensor.
pub(crate) fn per_sample(ts: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![ts.len()];
    shape.extend(std::iter::repeat_n(1, like.rank().saturating_sub(1)));
    Ok(Tensor::from_slice(ts, ts.len(), like.device())?
        .to_dtype(like.dtype())?
        .reshape(shape)?)
}

fn check_batch(ts: &[f64], like: &Tensor) -> Result<()> {
    let batch = like.dims().first().copied().unwrap_or(0);
    if ts.len() != batch {
        return Err(Error::InvalidInput(format!(
            "{} timesteps for a batch of {batch}",
            ts.len()
        )));
    }
    Ok(())
}

/// Batched [`interpolate`] with one timestep per leading-axis sample.
pub fn interpolate_batch(x: &Tensor, eps: &Tensor, ts: &[f64]) -> Result<Tensor> {
    check_same_shape(x, eps, "interpolate")?;
    check_batch(ts, x)?;
    for &t in ts {
        check_unit_interval(t)?;
    }
    let a = per_sample(ts, x)?;
    let b = per_sample(&ts.iter().map(|t| 1.0 - t).collect::<Vec<_>>(), x)?;
    Ok((x.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

pub fn target_velocity(x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(x, eps, "target_velocity")?;
    Ok((x - eps)?)
}

/// `(x_pred − x_t) / (1 − t)`; refuses `t > 1 − guard`.
pub fn xpred_to_velocity(x_pred: &Tensor, x_t: &Tensor, t: f64, guard: f64) -> Result<Tensor> {
    check_same_shape(x_pred, x_t, "xpred_to_velocity")?;
    check_guard(t, guard)?;
    Ok((x_pred - x_t)?.affine(1.0 / (1.0 - t), 0.0)?)
}

pub fn xpred_to_velocity_batch(
    x_pred: &Tensor,
    x_t: &Tensor,
    ts: &[f64],
    guard: f64,
) -> Result<Tensor> {
    check_same_shape(x_pred, x_t, "xpred_to_velocity")?;
    check_batch(ts, x_t)?;
    for &t in ts {
        check_guard(t, guard)?;
    }
    let inv = per_sample(&ts.iter().map(|t| 1.0 / (1.0 - t)).collect::<Vec<_>>(), x_t)?;
    Ok((x_pred - x_t)?.broadcast_mul(&inv)?)
}

/// Mean over batch and elements of `‖ṽ − v‖²`, as a differentiable scalar.
pub fn denoising_loss(
    x_pred: &Tensor,
    x_t: &Tensor,
    x: &Tensor,
    eps: &Tensor,
    ts: &[f64],
    guard: f64,
) -> Result<Tensor> {
    check_same_shape(x_pred, x, "denoising_loss")?;
    let v_tilde = xpred_to_velocity_batch(x_pred, x_t, ts, guard)?;
    let v = target_velocity(x, eps)?;
    Ok((v_tilde - v)?.sqr()?.mean_all()?)
}

/// Training-time timestep distribution on `[0, 1 − guard]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimestepDistribution {
    Uniform,
    /// `sigmoid(N(mean, std))`, clamped into the guarded range.
    LogitNormal { mean: f64, std: f64 },
}

impl Default for TimestepDistribution {
    fn default() -> Self {
        TimestepDistribution::Uniform
    }
}

pub fn sample_timesteps<R: Rng + ?Sized>(
    batch_size: usize,
    dist: TimestepDistribution,
    guard: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be at least 1".into()));
    }
    let hi = 1.0 - guard;
    let ts = (0..batch_size)
        .map(|_| match dist {
            TimestepDistribution::Uniform => rng.random::<f64>() * hi,
            TimestepDistribution::LogitNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                let s = 1.0 / (1.0 + (-(mean + std * z)).exp());
                s.clamp(0.0, hi)
            }
        })
        .collect();
    Ok(ts)
}

/// Standard-normal tensor drawn from a seeded generator (candle's own RNG is
/// not seedable per call).
pub fn randn<R: Rng + ?Sized>(
    shape: &[usize],
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}
