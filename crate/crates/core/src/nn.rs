//! Transformer building blocks evaluated against a [`TensorMap`].
//!
//! Every layer looks its weights up by name, so the same code serves the
//! trainable parameters, EMA shadows, and frozen encoders.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{Init, ParamSpec, TensorMap};

pub const LN_EPS: f64 = 1e-6;

/// `x · W + b` over the last axis; `W` is stored `[in, out]`.
pub fn linear(x: &Tensor, params: &TensorMap, prefix: &str) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    let dims = x.dims().to_vec();
    let (fan_in, fan_out) = w.dims2()?;
    let last = *dims.last().unwrap_or(&0);
    if last != fan_in {
        return Err(Error::InvalidInput(format!(
            "{prefix}: input width {last} does not match weight fan-in {fan_in}"
        )));
    }
    let rows = x.elem_count() / fan_in;
    let y = x.reshape((rows, fan_in))?.matmul(w)?;
    let y = kernels::add_rows(&y, b)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = fan_out;
    Ok(y.reshape(out_dims)?)
}

/// `x + pos` for tokens `[batch, n, c]` and a learned table `[n, c]`.
pub fn add_positions(x: &Tensor, pos: &Tensor) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if pos.dims() != [n, c] {
        return Err(Error::InvalidInput(format!(
            "position table {:?} does not match tokens [{b}, {n}, {c}]",
            pos.dims()
        )));
    }
    let y = kernels::add_rows(&x.reshape((b, n * c))?, &pos.reshape(n * c)?)?;
    Ok(y.reshape((b, n, c))?)
}

/// Layer norm over the last axis without an affine transform.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::layer_norm(x, LN_EPS)?)
}

/// `x·(1 + scale) + shift`, with `shift`/`scale` shaped `[batch, 1, width]`.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(kernels::modulate(x, scale, shift)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    // x·sigmoid(x), spelled out so it differentiates on every candle version.
    let sig = (x.neg()?.exp()? + 1.0)?.recip()?;
    Ok((x * sig)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::softmax_last(x)?)
}

/// Multi-head self-attention over `[batch, tokens, width]`.
pub fn attention(x: &Tensor, params: &TensorMap, prefix: &str, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    let head_dim = c / heads;
    let qkv = linear(x, params, &format!("{prefix}.qkv"))?
        .reshape((b, n, 3, heads, head_dim))?
        .permute((2, 0, 3, 1, 4))?;
    let q = qkv.get(0)?.contiguous()?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (head_dim as f64).powf(-0.5))?;
    let attn = softmax_last(&scores)?;
    let out = attn
        .matmul(&v)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, n, c))?;
    linear(&out, params, &format!("{prefix}.proj"))
}

pub fn mlp(x: &Tensor, params: &TensorMap, prefix: &str) -> Result<Tensor> {
    let h = linear(x, params, &format!("{prefix}.fc1"))?;
    let h = kernels::gelu(&h)?;
    linear(&h, params, &format!("{prefix}.fc2"))
}

fn attn_mlp_specs(prefix: &str, width: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    specs.extend(ParamSpec::linear(&format!("{prefix}.attn.qkv"), width, 3 * width));
    specs.extend(ParamSpec::linear(&format!("{prefix}.attn.proj"), width, width));
    specs.extend(ParamSpec::linear(&format!("{prefix}.mlp.fc1"), width, mlp_ratio * width));
    specs.extend(ParamSpec::linear(&format!("{prefix}.mlp.fc2"), mlp_ratio * width, width));
    specs
}

/// Parameters of one AdaLN-Zero block. The modulation projection starts at
/// zero, so every gate is zero and the block is the identity at init.
pub fn adaln_block_specs(prefix: &str, width: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    let mut specs = attn_mlp_specs(prefix, width, mlp_ratio);
    specs.extend(ParamSpec::zero_linear(&format!("{prefix}.adaln"), width, 6 * width));
    specs
}

/// Pre-norm attention + MLP residual block modulated by `cond` (`[batch, width]`).
pub fn adaln_block(
    x: &Tensor,
    cond: &Tensor,
    params: &TensorMap,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    if cond.dims() != [b, c] {
        return Err(Error::InvalidInput(format!(
            "{prefix}: conditioning shape {:?} does not match tokens [{b}, _, {c}]",
            cond.dims()
        )));
    }
    let m = linear(&silu(cond)?, params, &format!("{prefix}.adaln"))?.reshape((b, 6, 1, c))?;
    let part = |i: usize| -> Result<Tensor> { Ok(m.narrow(1, i, 1)?.squeeze(1)?) };
    let (shift_a, scale_a, gate_a) = (part(0)?, part(1)?, part(2)?);
    let (shift_m, scale_m, gate_m) = (part(3)?, part(4)?, part(5)?);

    let h = modulate(&layer_norm(x)?, &shift_a, &scale_a)?;
    let x = kernels::gated_add(x, &attention(&h, params, &format!("{prefix}.attn"), heads)?, &gate_a)?;
    let h = modulate(&layer_norm(&x)?, &shift_m, &scale_m)?;
    let x = kernels::gated_add(&x, &mlp(&h, params, &format!("{prefix}.mlp"))?, &gate_m)?;
    Ok(x)
}

/// Unconditioned pre-norm block, used by the frozen random encoder.
pub fn plain_block_specs(prefix: &str, width: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    let mut specs = attn_mlp_specs(prefix, width, mlp_ratio);
    // Random (nonzero) biases so the frozen block is not a near-linear map.
    for s in specs.iter_mut().filter(|s| s.name.ends_with(".bias")) {
        s.init = Init::Normal(0.02);
    }
    specs
}

pub fn plain_block(x: &Tensor, params: &TensorMap, prefix: &str, heads: usize) -> Result<Tensor> {
    let x = (x + attention(&layer_norm(x)?, params, &format!("{prefix}.attn"), heads)?)?;
    let x = (&x + mlp(&layer_norm(&x)?, params, &format!("{prefix}.mlp"))?)?;
    Ok(x)
}
