//! Self-checks run by `pixelrepa verify`: finite-difference gradients for all
//! three branches, integrator order, flow identities, guidance algebra,
//! cosine/mask invariants, zero-init identity, and branch isolation.
//!
//! The guidance combination is passed in so a deliberately broken one can be
//! shown to fail.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    alignment_loss, apply_mask, cosine_similarity, sample_mask, AlignmentConfig, AlignmentVariant, EncoderConfig,
    EncoderKind,
};
use crate::backbone::{Backbone, ModelConfig, TokenGrid};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::flow::{interpolate, randn, target_velocity, xpred_to_velocity, SINGULARITY_GUARD};
use crate::params::{named_rng, ParamStore, TensorMap};
use crate::sampler::{guided_velocity, heun_step, sample, BackboneDenoiser, SamplerConfig};
use crate::trainer::{Precision, StepDraws, TrainConfig, Trainer};

pub type GuidanceFn = fn(&Tensor, &Tensor, f64, f64, [f64; 2]) -> Result<Tensor>;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn max_abs(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?)
}

fn max_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    max_abs(&(a - b)?)
}

/// A model small enough for finite differences in f64.
pub fn check_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        depth: 2,
        hidden_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        in_context_tokens: 2,
        in_context_start_block: 2,
        alignment_depth: 1,
        time_embed_dim: 8,
    }
}

pub fn check_alignment(variant: AlignmentVariant) -> AlignmentConfig {
    AlignmentConfig {
        variant,
        mask_ratio: 0.5,
        lambda: 0.1,
        mask_token: false,
        mlp_hidden: 8,
        encoder: EncoderConfig {
            kind: EncoderKind::LossyPool,
            feature_dim: 4,
            grid: 2,
            ..EncoderConfig::default()
        },
    }
}

fn check_train() -> TrainConfig {
    TrainConfig {
        precision: Precision::F64,
        ema_decays: vec![],
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const GRAD_DENOM_FLOOR: f64 = 1e-6;

/// Compare autodiff gradients of the total loss with a fourth-order central
/// difference at `n` randomly chosen scalar parameters. Parameters are
/// perturbed away from initialization first so zero-initialized gates do
/// not hide whole subgraphs; for active branches a third of the probes land
/// in the alignment head.
pub fn gradient_check(variant: AlignmentVariant, n: usize, seed: u64) -> Result<GradCheck> {
    let dev = Device::Cpu;
    let model = check_model();
    let trainer = Trainer::new(&model, &check_alignment(variant), &check_train())?;
    let mut params = TensorMap::new();
    for (name, t) in trainer.init_params()?.iter() {
        let noise = randn(t.dims(), DType::F64, &dev, &mut named_rng(seed ^ 0x9e37, name))?;
        params.insert(name.to_string(), (t + noise.affine(0.1, 0.0)?)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::rand(-1.0f64, 1.0, (2, 3, 8, 8), &dev)?;
    let images = (images + randn(&[2, 3, 8, 8], DType::F64, &dev, &mut rng)?.affine(0.3, 0.0)?)?;
    let batch = Batch {
        images,
        labels: vec![0, 2],
        ids: vec!["a".into(), "b".into()],
    };
    let draws = StepDraws {
        ts: vec![0.3, 0.7],
        eps: randn(&[2, 3, 8, 8], DType::F64, &dev, &mut rng)?,
        labels: vec![1, model.null_class()],
        mask: match variant {
            AlignmentVariant::Mta => Some(sample_mask(2, model.num_patches(), 0.5, &mut rng)?),
            _ => None,
        },
    };
    let store = ParamStore::from_map(&params)?;
    let (_, grads) = trainer.gradients(&store, &batch, &draws)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let head: Vec<String> = names.iter().filter(|n| n.starts_with("align.")).cloned().collect();
    let eval = |p: &TensorMap| -> Result<f64> { trainer.evaluate(p, &batch, &draws) };
    let h = 1e-3;
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for i in 0..n {
        let pool = if !head.is_empty() && i % 3 == 0 { &head } else { &names };
        let name = &pool[rng.random_range(0..pool.len())];
        let values = params.flat_values(name)?;
        let idx = rng.random_range(0..values.len());
        let at = |d: f64| eval(&params.with_element(name, idx, values[idx] + d)?);
        let fd = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
        let ad = grads.flat_values(name)?[idx];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(GRAD_DENOM_FLOOR);
        if rel >= out.max_rel {
            out.max_rel = rel;
            out.worst = format!("{name}[{idx}] autodiff {ad:.6e} vs fd {fd:.6e}");
        }
        out.checked += 1;
    }
    Ok(out)
}

/// Global error of Heun on `x' = x`, `x(0) = 1` at `t = 1` for each `dt`,
/// and the least-squares slope of `log err` against `log dt`.
pub fn heun_order(dts: &[f64]) -> Result<(Vec<f64>, f64)> {
    let dev = Device::Cpu;
    let mut errs = Vec::new();
    for &dt in dts {
        let n = (1.0 / dt).round() as usize;
        let mut x = Tensor::new(&[1.0f64], &dev)?;
        for i in 0..n {
            x = heun_step(|x, _| Ok(x.clone()), &x, i as f64 * dt, dt)?;
        }
        let v = x.to_vec1::<f64>()?[0];
        errs.push((v - std::f64::consts::E).abs());
    }
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok((errs, num / den))
}

/// Max deviation of Heun under a constant field from the exact line.
pub fn constant_field_error() -> Result<f64> {
    let dev = Device::Cpu;
    let c = Tensor::new(&[0.7f64, -1.3, 2.5], &dev)?;
    let x0 = Tensor::new(&[0.1f64, 0.2, -0.4], &dev)?;
    let mut x = x0.clone();
    let dt = 1.0 / 7.0;
    for i in 0..7 {
        x = heun_step(|_, _| Ok(c.clone()), &x, i as f64 * dt, dt)?;
    }
    max_diff(&x, &(x0 + c)?)
}

/// Endpoint and consistency identities over `cases` random draws.
pub fn flow_identities(cases: usize, seed: u64) -> Result<f64> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let x = randn(&[2, 3], DType::F64, &dev, &mut rng)?;
        let eps = randn(&[2, 3], DType::F64, &dev, &mut rng)?;
        let t = rng.random_range(0.0..1.0 - SINGULARITY_GUARD);
        worst = worst.max(max_diff(&interpolate(&x, &eps, 0.0)?, &eps)?);
        worst = worst.max(max_diff(&interpolate(&x, &eps, 1.0)?, &x)?);
        let x_t = interpolate(&x, &eps, t)?;
        let v = target_velocity(&x, &eps)?;
        worst = worst.max(max_diff(&xpred_to_velocity(&x, &x_t, t, SINGULARITY_GUARD)?, &v)?);
        worst = worst.max(max_diff(&(&x_t + v.affine(1.0 - t, 0.0)?)?, &x)?);
    }
    Ok(worst)
}

/// `guide` against the scalar rule, over a grid of `t` and `w`.
pub fn cfg_error(guide: GuidanceFn) -> Result<f64> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let vc = randn(&[4, 5], DType::F64, &dev, &mut rng)?;
    let vu = randn(&[4, 5], DType::F64, &dev, &mut rng)?;
    let (c, u) = (vc.flatten_all()?.to_vec1::<f64>()?, vu.flatten_all()?.to_vec1::<f64>()?);
    let interval = [0.1, 1.0];
    let mut worst: f64 = 0.0;
    for w in [0.0, 1.0, 1.5, 3.0] {
        for i in 0..=20 {
            let t = i as f64 / 20.0 * (1.0 - SINGULARITY_GUARD);
            let inside = t >= interval[0] && t <= interval[1];
            let want: Vec<f64> = c
                .iter()
                .zip(&u)
                .map(|(&c, &u)| if inside { u + w * (c - u) } else { c })
                .collect();
            let got = guide(&vc, &vu, w, t, interval)?.flatten_all()?.to_vec1::<f64>()?;
            for (g, e) in got.iter().zip(&want) {
                worst = worst.max((g - e).abs());
            }
        }
    }
    Ok(worst)
}

/// Cosine range on random pairs and the exact values on constructed ones.
pub fn cosine_checks(pairs: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = randn(&[pairs, 8], DType::F64, &dev, &mut rng)?.reshape((1, pairs, 8))?;
    let b = randn(&[pairs, 8], DType::F64, &dev, &mut rng)?.reshape((1, pairs, 8))?;
    let cos = cosine_similarity(&a, &b)?.flatten_all()?.to_vec1::<f64>()?;
    let lo = cos.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u = Tensor::new(&[[[3.0f64, 4.0, 0.0]]], &dev)?;
    let orth = Tensor::new(&[[[-4.0f64, 3.0, 0.0]]], &dev)?;
    let loss = |p: &Tensor| -> Result<f64> { Ok(alignment_loss(&u, p)?.to_scalar::<f64>()?) };
    let err = (loss(&u.affine(2.0, 0.0)?)? + 1.0)
        .abs()
        .max((loss(&u.neg()?)? - 1.0).abs())
        .max(loss(&orth)?.abs());
    Ok((lo, hi, err))
}

/// Max |gradient| reaching hidden positions through the zeroing path.
pub fn masked_gradient(seed: u64) -> Result<f64> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Var::from_tensor(&randn(&[2, 9, 4], DType::F64, &dev, &mut rng)?)?;
    let mask = sample_mask(2, 9, 0.4, &mut rng)?;
    let grid = TokenGrid::new(h.as_tensor().clone(), 3, 3)?;
    let masked = apply_mask(&grid, &mask)?;
    // Mix tokens so hidden positions would receive gradient from every output.
    let mixed = masked.tokens.sum_keepdim(1)?.broadcast_add(&masked.tokens)?.tanh()?;
    let target = randn(&[2, 9, 4], DType::F64, &dev, &mut rng)?;
    let g = alignment_loss(&target, &mixed)?.backward()?;
    let g = g.get(h.as_tensor()).ok_or_else(|| Error::State("no gradient".into()))?;
    let g = g.to_vec3::<f64>()?;
    let mut worst: f64 = 0.0;
    for b in 0..2 {
        for n in 0..9 {
            if mask.is_masked(b, n) {
                worst = worst.max(g[b][n].iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }
    }
    Ok(worst)
}

/// Every `(r, N)` on a grid hides exactly `floor(r·N)` tokens per sample.
pub fn mask_count_violations() -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for n in [1usize, 4, 9, 16, 49, 64, 256] {
        for i in 0..20 {
            let r = i as f64 * 0.05;
            let m = sample_mask(3, n, r, &mut rng)?;
            let want = (r * n as f64).floor() as usize;
            bad += (0..3).filter(|&b| m.masked_in_sample(b) != want).count();
        }
    }
    Ok(bad)
}

/// Max deviation of each freshly initialized block from the identity.
pub fn adaln_identity(model: &ModelConfig, seed: u64) -> Result<f64> {
    let dev = Device::Cpu;
    let backbone = Backbone::new(model.clone())?;
    let params = TensorMap::initialize(&backbone.param_specs(), seed, DType::F64, &dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = model.grid();
    let tokens = TokenGrid::new(randn(&[2, g * g, model.hidden_dim], DType::F64, &dev, &mut rng)?, g, g)?;
    let cond = backbone.conditioning(&params, &[0.3, 0.8], &[0, 1])?;
    let mut worst: f64 = 0.0;
    for i in 1..=model.depth {
        let out = backbone.block(&params, i, &tokens, &cond)?;
        worst = worst.max(max_diff(&out.tokens, &tokens.tokens)?);
    }
    Ok(worst)
}

/// x-predictions and samples agree bit for bit across branch variants.
pub fn branch_isolation(seed: u64) -> Result<bool> {
    let dev = Device::Cpu;
    let model = check_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&[2, 3, 8, 8], DType::F64, &dev, &mut rng)?;
    let sampler = SamplerConfig {
        steps: 5,
        ..SamplerConfig::default()
    };
    let mut outputs = Vec::new();
    for v in [AlignmentVariant::None, AlignmentVariant::Mlp, AlignmentVariant::Mta] {
        let train = TrainConfig { seed, ..check_train() };
        let trainer = Trainer::new(&model, &check_alignment(v), &train)?;
        let params = trainer.init_params()?;
        let pred = trainer.backbone().forward(&params, &x, &[0.2, 0.6], &[0, 1])?.x_pred;
        let den = BackboneDenoiser::new(trainer.backbone(), &params);
        let s = sample(&den, &sampler, &[0, 2], DType::F64, &mut ChaCha8Rng::seed_from_u64(seed))?;
        outputs.push((crate::params::tensor_bits(&pred)?, crate::params::tensor_bits(&s)?));
    }
    Ok(outputs.windows(2).all(|w| w[0] == w[1]))
}

/// The full suite with `guide` as the guidance combination.
pub fn run_checks(guide: GuidanceFn) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(run("flow identities", || {
        let e = flow_identities(1000, 1)?;
        Ok((e <= 1e-10, format!("max error {e:.2e} over 1000 cases (tol 1e-10)")))
    }));
    for (name, v) in [
        ("gradient check: none", AlignmentVariant::None),
        ("gradient check: mlp", AlignmentVariant::Mlp),
        ("gradient check: mta", AlignmentVariant::Mta),
    ] {
        out.push(run(name, || {
            let g = gradient_check(v, 20, 7)?;
            Ok((
                g.max_rel <= 1e-4,
                format!("{} params, max rel error {:.2e} (tol 1e-4) at {}", g.checked, g.max_rel, g.worst),
            ))
        }));
    }
    out.push(run("heun order", || {
        let (_, slope) = heun_order(&[0.1, 0.05, 0.025, 0.0125])?;
        let c = constant_field_error()?;
        Ok((
            (1.9..=2.1).contains(&slope) && c < 1e-12,
            format!("slope {slope:.4} (want [1.9, 2.1]), constant-field error {c:.1e}"),
        ))
    }));
    out.push(run("cfg interval", || {
        let e = cfg_error(guide)?;
        Ok((e < 1e-12, format!("max deviation from v_u + w(v_c - v_u) inside interval: {e:.2e}")))
    }));
    out.push(run("cosine alignment loss", || {
        let (lo, hi, e) = cosine_checks(100_000, 3)?;
        Ok((
            lo >= -1.0 && hi <= 1.0 && e < 1e-12,
            format!("range [{lo:.6}, {hi:.6}], constructed-case error {e:.1e}"),
        ))
    }));
    out.push(run("patch mask", || {
        let g = masked_gradient(11)?;
        let bad = mask_count_violations()?;
        Ok((g == 0.0 && bad == 0, format!("hidden-token gradient {g:e}, count violations {bad}")))
    }));
    out.push(run("adaln-zero identity", || {
        let e = adaln_identity(&ModelConfig::default(), 0)?;
        Ok((e < 1e-6, format!("max deviation {e:.1e} (tol 1e-6)")))
    }));
    out.push(run("branch isolation", || {
        let same = branch_isolation(3)?;
        Ok((same, format!("x_pred and samples bit-identical across variants: {same}")))
    }));
    out
}

/// The suite with the library's own guidance.
pub fn run_all() -> Vec<Check> {
    run_checks(guided_velocity)
}

/// Fixed-width pass/fail table.
pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        s.push_str(&format!(
            "{:<width$}  {}  {:>7.2}s  {}\n",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.seconds,
            c.detail
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_flipped_guidance_fails_cfg_check() {
        fn broken(vc: &Tensor, vu: &Tensor, w: f64, t: f64, iv: [f64; 2]) -> Result<Tensor> {
            if t < iv[0] || t > iv[1] {
                return Ok(vc.clone());
            }
            Ok((vu - (vc - vu)?.affine(w, 0.0)?)?)
        }
        assert!(cfg_error(guided_velocity).unwrap() < 1e-12);
        assert!(cfg_error(broken).unwrap() > 1e-3);
    }

    #[test]
    fn gradient_check_mta_small() {
        let g = gradient_check(AlignmentVariant::Mta, 6, 1).unwrap();
        assert_eq!(g.checked, 6);
        assert!(g.max_rel <= 1e-4, "{g:?}");
    }
}
