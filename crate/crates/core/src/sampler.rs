//! Deterministic Heun sampling with classifier-free guidance restricted to a
//! timestep interval.
//!
//! Time runs from noise at `t = 0` to data at `t = 1` on a linear grid. The
//! velocity `(x_pred − x_t)/(1 − t)` has a pole at `t = 1`, so the step that
//! lands on `t = 1` outputs the (guided) x-prediction directly.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::flow::{randn, xpred_to_velocity, SINGULARITY_GUARD};
use crate::params::TensorMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// `[t_lo, t_hi]`; outside it only the conditional branch is evaluated.
    pub guidance_interval: [f64; 2],
    /// `false` disables guidance entirely (conditional velocity everywhere).
    pub guidance: bool,
    /// EMA shadow to sample from: a decay such as `"0.9999"`, or `"none"`
    /// for the raw parameters.
    pub ema: String,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 1.5,
            guidance_interval: [0.1, 1.0],
            guidance: true,
            ema: "0.9999".into(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        // Every non-final grid time must stay below the singular region.
        if self.steps > 1 && 1.0 - 1.0 / self.steps as f64 > 1.0 - SINGULARITY_GUARD {
            return Err(Error::Config(format!(
                "sampler.steps {} puts grid points inside the t = 1 guard band",
                self.steps
            )));
        }
        let [lo, hi] = self.guidance_interval;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "sampler.guidance_interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("sampler.guidance_scale must be finite".into()));
        }
        self.ema_decay()?;
        Ok(())
    }

    /// `None` selects raw parameters.
    pub fn ema_decay(&self) -> Result<Option<f64>> {
        parse_ema(&self.ema)
    }

    pub fn guidance(&self) -> Option<Guidance> {
        self.guidance.then_some(Guidance {
            scale: self.guidance_scale,
            interval: self.guidance_interval,
        })
    }
}

pub fn parse_ema(s: &str) -> Result<Option<f64>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(d) if (0.0..=1.0).contains(&d) => Ok(Some(d)),
        _ => Err(Error::Config(format!(
            "ema selection {s:?} is neither \"none\" nor a decay in [0, 1]"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub scale: f64,
    pub interval: [f64; 2],
}

impl Guidance {
    /// Whether the unconditional branch is needed at time `t`.
    pub fn active_at(&self, t: f64) -> bool {
        self.scale != 1.0 && in_interval(t, self.interval)
    }
}

fn in_interval(t: f64, [lo, hi]: [f64; 2]) -> bool {
    lo <= t && t <= hi
}

/// `v_u + w·(v_c − v_u)` inside `[t_lo, t_hi]`, `v_c` outside.
pub fn guided_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f64, t: f64, interval: [f64; 2]) -> Result<Tensor> {
    if v_cond.dims() != v_uncond.dims() {
        return Err(Error::InvalidInput(format!(
            "guided_velocity shape mismatch {:?} vs {:?}",
            v_cond.dims(),
            v_uncond.dims()
        )));
    }
    if !in_interval(t, interval) {
        return Ok(v_cond.clone());
    }
    Ok((v_uncond + (v_cond - v_uncond)?.affine(w, 0.0)?)?)
}

/// Anything that maps `(x_t, t, labels)` to a clean-image estimate.
pub trait Denoiser {
    fn predict_x(&self, x_t: &Tensor, ts: &[f64], class_ids: &[u32]) -> Result<Tensor>;
    /// Label used for the unconditional branch.
    fn null_class(&self) -> u32;
    /// `(channels, height, width)` of one sample.
    fn image_shape(&self) -> (usize, usize, usize);
}

/// The backbone evaluated with a fixed parameter map. Only `backbone.*`
/// entries are ever read.
#[derive(Debug, Clone, Copy)]
pub struct BackboneDenoiser<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a TensorMap,
}

impl<'a> BackboneDenoiser<'a> {
    pub fn new(backbone: &'a Backbone, params: &'a TensorMap) -> Self {
        Self { backbone, params }
    }
}

impl Denoiser for BackboneDenoiser<'_> {
    fn predict_x(&self, x_t: &Tensor, ts: &[f64], class_ids: &[u32]) -> Result<Tensor> {
        Ok(self.backbone.forward(self.params, x_t, ts, class_ids)?.x_pred)
    }

    fn null_class(&self) -> u32 {
        self.backbone.config().null_class()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        let c = self.backbone.config();
        (c.channels, c.image_size, c.image_size)
    }
}

/// The guided velocity field for one batch of labels.
pub struct VelocityField<'a, D: Denoiser + ?Sized> {
    model: &'a D,
    class_ids: Vec<u32>,
    null_ids: Vec<u32>,
    guidance: Option<Guidance>,
}

impl<'a, D: Denoiser + ?Sized> VelocityField<'a, D> {
    pub fn new(model: &'a D, class_ids: &[u32], guidance: Option<Guidance>) -> Self {
        Self {
            model,
            class_ids: class_ids.to_vec(),
            null_ids: vec![model.null_class(); class_ids.len()],
            guidance,
        }
    }

    fn guided_at(&self, t: f64) -> Option<Guidance> {
        self.guidance.filter(|g| g.active_at(t))
    }

    /// Conditional and (when guidance is active at `t`) unconditional
    /// x-predictions.
    fn predictions(&self, x: &Tensor, t: f64) -> Result<(Tensor, Option<Tensor>)> {
        let ts = vec![t; self.class_ids.len()];
        let cond = self.model.predict_x(x, &ts, &self.class_ids)?;
        let uncond = match self.guided_at(t) {
            Some(_) => Some(self.model.predict_x(x, &ts, &self.null_ids)?),
            None => None,
        };
        Ok((cond, uncond))
    }

    /// Guided velocity at `t ≤ 1 − δ`.
    pub fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let (xc, xu) = self.predictions(x, t)?;
        let vc = xpred_to_velocity(&xc, x, t, SINGULARITY_GUARD)?;
        match (xu, self.guided_at(t)) {
            (Some(xu), Some(g)) => {
                let vu = xpred_to_velocity(&xu, x, t, SINGULARITY_GUARD)?;
                guided_velocity(&vc, &vu, g.scale, t, g.interval)
            }
            _ => Ok(vc),
        }
    }

    /// Guided clean-image estimate, used by the terminal step. Since the
    /// velocity is affine in `x_pred` at fixed `(x_t, t)`, guiding the
    /// prediction is the same as guiding the velocity.
    pub fn x_pred(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let (xc, xu) = self.predictions(x, t)?;
        match (xu, self.guided_at(t)) {
            (Some(xu), Some(g)) => Ok((&xu + (&xc - &xu)?.affine(g.scale, 0.0)?)?),
            _ => Ok(xc),
        }
    }
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(t
        .to_dtype(DType::F64)?
        .abs()?
        .sum_all()?
        .to_scalar::<f64>()?
        .is_finite())
}

/// One Heun (explicit trapezoidal) step of size `dt` from `(x, t)`.
pub fn heun_step<F>(mut field: F, x: &Tensor, t: f64, dt: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("heun_step needs dt > 0, got {dt}")));
    }
    let k1 = field(x, t)?;
    if !all_finite(&k1)? {
        return Err(Error::Numerical(format!("non-finite velocity at t={t}")));
    }
    let x_e = (x + k1.affine(dt, 0.0)?)?;
    let k2 = field(&x_e, t + dt)?;
    if !all_finite(&k2)? {
        return Err(Error::Numerical(format!("non-finite velocity at t={}", t + dt)));
    }
    Ok((x + (k1 + k2)?.affine(dt / 2.0, 0.0)?)?)
}

/// `steps + 1` linearly spaced times from 0 to 1.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// `t0` followed by every point of the `steps` grid strictly above it.
pub fn time_grid_from(t0: f64, steps: usize) -> Vec<f64> {
    let mut grid = vec![t0];
    grid.extend(time_grid(steps).into_iter().filter(|&t| t > t0));
    grid
}

/// Integrate along `grid` (ending at 1). Steps ending beyond `1 − δ` take the
/// guided x-prediction as the next state.
pub fn integrate<D: Denoiser + ?Sized>(field: &VelocityField<'_, D>, x0: &Tensor, grid: &[f64]) -> Result<Tensor> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("time grid must be strictly increasing with at least two points".into()));
    }
    let mut x = x0.clone();
    for (i, w) in grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let step = if t_next > 1.0 - SINGULARITY_GUARD {
            field.x_pred(&x, t)
        } else {
            heun_step(|x, t| field.velocity(x, t), &x, t, t_next - t)
        };
        x = step.map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("sampler step {i}: {msg}")),
            other => other,
        })?;
        if !all_finite(&x)? {
            return Err(Error::Numerical(format!("sampler step {i}: non-finite state at t={t_next}")));
        }
        if t_next > 1.0 - SINGULARITY_GUARD {
            break;
        }
    }
    Ok(x)
}

/// Draw noise from `rng`, integrate to `t = 1`, clamp to `[-1, 1]`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    config: &SamplerConfig,
    class_ids: &[u32],
    dtype: DType,
    rng: &mut R,
) -> Result<Tensor> {
    config.validate()?;
    if class_ids.is_empty() {
        return Err(Error::InvalidInput("sample needs at least one class id".into()));
    }
    let (c, h, w) = model.image_shape();
    let noise = randn(&[class_ids.len(), c, h, w], dtype, &candle_core::Device::Cpu, rng)?;
    let field = VelocityField::new(model, class_ids, config.guidance());
    Ok(integrate(&field, &noise, &time_grid(config.steps))?.clamp(-1.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::params::tensor_bits;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn scalar(x: f64) -> Tensor {
        Tensor::new(&[x], &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_vec1::<f64>().unwrap()[0]
    }

    fn integrate_exp(n: usize) -> f64 {
        let dt = 1.0 / n as f64;
        let mut x = scalar(1.0);
        for i in 0..n {
            x = heun_step(|x, _| Ok(x.clone()), &x, i as f64 * dt, dt).unwrap();
        }
        value(&x)
    }

    #[test]
    fn constant_field_is_exact() {
        let c = Tensor::new(&[0.3f64, -1.25], &Device::Cpu).unwrap();
        let x = Tensor::new(&[2.0f64, 0.5], &Device::Cpu).unwrap();
        let out = heun_step(|_, _| Ok(c.clone()), &x, 0.2, 0.125).unwrap();
        assert_eq!(out.to_vec1::<f64>().unwrap(), vec![2.0 + 0.3 * 0.125, 0.5 - 1.25 * 0.125]);
    }

    #[test]
    fn linear_ode_single_step() {
        for dt in [0.5, 0.1, 0.01] {
            let out = value(&heun_step(|x, _| Ok(x.clone()), &scalar(1.0), 0.0, dt).unwrap());
            assert!((out - (1.0 + dt + dt * dt / 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn second_order_convergence() {
        let e = std::f64::consts::E;
        let ns = [10usize, 20, 40, 80];
        let errs: Vec<f64> = ns.iter().map(|&n| (integrate_exp(n) - e).abs()).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
        let xs: Vec<f64> = ns.iter().map(|&n| (1.0 / n as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((1.9..=2.1).contains(&slope), "slope {slope}");
    }

    #[test]
    fn non_finite_field_is_reported() {
        let r = heun_step(|x, _| Ok((x * f64::NAN).unwrap()), &scalar(1.0), 0.0, 0.1);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert!(heun_step(|x, _| Ok(x.clone()), &scalar(1.0), 0.0, 0.0).is_err());
    }

    #[test]
    fn guidance_algebra() {
        let vc = Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let vu = Tensor::new(&[-3.0f64, 0.5], &Device::Cpu).unwrap();
        let iv = [0.1, 1.0];
        let g = |w, t| guided_velocity(&vc, &vu, w, t, iv).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g(1.0, 0.5), vec![1.0, 2.0]);
        assert_eq!(g(1.0, 0.0), vec![1.0, 2.0]);
        assert_eq!(g(2.0, 0.5), vec![5.0, 3.5]);
        assert_eq!(g(2.0, 0.05), vec![1.0, 2.0]);
        assert_eq!(g(2.0, 0.1), vec![5.0, 3.5]);
    }

    /// Predicts `x_t · (1 + label)`, counting calls by label kind.
    struct Stub {
        calls: RefCell<Vec<(f64, bool)>>,
    }

    impl Stub {
        fn new() -> Self {
            Self { calls: RefCell::new(Vec::new()) }
        }
    }

    impl Denoiser for Stub {
        fn predict_x(&self, x_t: &Tensor, ts: &[f64], class_ids: &[u32]) -> Result<Tensor> {
            self.calls.borrow_mut().push((ts[0], class_ids[0] == self.null_class()));
            Ok(x_t.affine(0.5 + 0.1 * class_ids[0] as f64, 0.0)?)
        }
        fn null_class(&self) -> u32 {
            9
        }
        fn image_shape(&self) -> (usize, usize, usize) {
            (1, 2, 2)
        }
    }

    #[test]
    fn evaluation_count_follows_interval() {
        let stub = Stub::new();
        let cfg = SamplerConfig { guidance_scale: 2.0, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sample(&stub, &cfg, &[1], DType::F64, &mut rng).unwrap();
        let calls = stub.calls.borrow();

        let mut times = Vec::new();
        for i in 0..49 {
            times.push(i as f64 / 50.0);
            times.push((i + 1) as f64 / 50.0);
        }
        times.push(49.0 / 50.0);
        let expected: usize = times.iter().map(|&t| if (0.1..=1.0).contains(&t) { 2 } else { 1 }).sum();
        assert_eq!(calls.len(), expected);
        for &(t, uncond) in calls.iter() {
            assert!(!uncond || (0.1..=1.0).contains(&t));
        }
        // Exactly 50 integrator steps: the terminal prediction happens at t_49.
        assert_eq!(calls.last().unwrap().0, 0.98);
    }

    #[test]
    fn unit_scale_needs_one_evaluation() {
        let stub = Stub::new();
        let field = VelocityField::new(&stub, &[0], Some(Guidance { scale: 1.0, interval: [0.0, 1.0] }));
        field.velocity(&Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap(), 0.5).unwrap();
        assert_eq!(stub.calls.borrow().len(), 1);
    }

    #[test]
    fn unit_scale_matches_disabled_guidance() {
        let stub = Stub::new();
        let on = SamplerConfig { guidance_scale: 1.0, ..SamplerConfig::default() };
        let off = SamplerConfig { guidance: false, guidance_scale: 3.0, ..SamplerConfig::default() };
        let a = sample(&stub, &on, &[2, 3], DType::F64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample(&stub, &off, &[2, 3], DType::F64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(tensor_bits(&a).unwrap(), tensor_bits(&b).unwrap());
    }

    #[test]
    fn terminal_step_outputs_prediction() {
        // With one step, the sample is the x-prediction at the noise itself.
        let stub = Stub::new();
        let cfg = SamplerConfig { steps: 1, guidance: false, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = sample(&stub, &cfg, &[0], DType::F64, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = randn(&[1, 1, 2, 2], DType::F64, &Device::Cpu, &mut rng).unwrap();
        let want = noise.affine(0.5, 0.0).unwrap().clamp(-1.0, 1.0).unwrap();
        assert_eq!(tensor_bits(&out).unwrap(), tensor_bits(&want).unwrap());
    }

    #[test]
    fn backbone_sampling_is_deterministic_and_finite() {
        let cfg = ModelConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            depth: 2,
            hidden_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
            in_context_tokens: 1,
            in_context_start_block: 2,
            alignment_depth: 1,
            time_embed_dim: 8,
        };
        let backbone = Backbone::new(cfg).unwrap();
        let params = TensorMap::initialize(&backbone.param_specs(), 3, DType::F32, &Device::Cpu).unwrap();
        let model = BackboneDenoiser::new(&backbone, &params);
        let sc = SamplerConfig { steps: 5, ..SamplerConfig::default() };
        let a = sample(&model, &sc, &[0, 1], DType::F32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample(&model, &sc, &[0, 1], DType::F32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.dims(), &[2, 3, 8, 8]);
        assert!(all_finite(&a).unwrap());
        assert_eq!(tensor_bits(&a).unwrap(), tensor_bits(&b).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { guidance_interval: [0.5, 0.5], ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { ema: "bogus".into(), ..Default::default() }.validate().is_err());
        assert_eq!(parse_ema("none").unwrap(), None);
        assert_eq!(parse_ema("0.9998").unwrap(), Some(0.9998));
    }

    #[test]
    fn grid_from_t0() {
        assert_eq!(time_grid_from(0.2, 10), vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        assert_eq!(time_grid_from(0.25, 4), vec![0.25, 0.5, 0.75, 1.0]);
    }
}
