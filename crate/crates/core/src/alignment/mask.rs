use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::Rng;

use crate::backbone::TokenGrid;
use crate::error::{Error, Result};

/// Per-sample patch mask; `true` marks a hidden token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    bits: Vec<bool>,
    batch: usize,
    n_patch: usize,
    ratio: f64,
}

/// Number of tokens hidden per sample: `floor(r·N)`.
pub fn masked_count(ratio: f64, n_patch: usize) -> usize {
    (ratio * n_patch as f64).floor() as usize
}

impl PatchMask {
    pub fn from_bits(bits: Vec<bool>, batch: usize, n_patch: usize) -> Result<Self> {
        if bits.len() != batch * n_patch {
            return Err(Error::InvalidInput(format!(
                "{} mask bits for {batch}x{n_patch} tokens",
                bits.len()
            )));
        }
        let masked = bits.iter().filter(|&&b| b).count();
        let ratio = if bits.is_empty() {
            0.0
        } else {
            masked as f64 / bits.len() as f64
        };
        Ok(Self {
            bits,
            batch,
            n_patch,
            ratio,
        })
    }

    pub fn none(batch: usize, n_patch: usize) -> Self {
        Self {
            bits: vec![false; batch * n_patch],
            batch,
            n_patch,
            ratio: 0.0,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n_patch(&self) -> usize {
        self.n_patch
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn is_masked(&self, sample: usize, token: usize) -> bool {
        self.bits[sample * self.n_patch + token]
    }

    pub fn masked_in_sample(&self, sample: usize) -> usize {
        self.bits[sample * self.n_patch..(sample + 1) * self.n_patch]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// `[batch, n_patch, 1]` tensor holding 1 for visible and 0 for hidden tokens.
    pub fn keep_tensor(&self, like: &Tensor) -> Result<Tensor> {
        let keep: Vec<f32> = self.bits.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        Ok(Tensor::from_vec(keep, (self.batch, self.n_patch, 1), like.device())?
            .to_dtype(like.dtype())?)
    }
}

/// Hide exactly `floor(r·n_patch)` tokens per sample, chosen uniformly without
/// replacement.
pub fn sample_mask<R: Rng + ?Sized>(
    batch: usize,
    n_patch: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Domain(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = masked_count(ratio, n_patch);
    let mut bits = vec![false; batch * n_patch];
    if k > 0 {
        for b in 0..batch {
            for i in sample(rng, n_patch, k) {
                bits[b * n_patch + i] = true;
            }
        }
    }
    Ok(PatchMask {
        bits,
        batch,
        n_patch,
        ratio,
    })
}

fn check_mask(h: &TokenGrid, mask: &PatchMask) -> Result<()> {
    if h.n_ctx != 0 {
        return Err(Error::InvalidInput(
            "masking expects image tokens only (context tokens present)".into(),
        ));
    }
    let (b, n, _) = h.tokens.dims3()?;
    if b != mask.batch || n != mask.n_patch {
        return Err(Error::InvalidInput(format!(
            "mask {}x{} does not match tokens {b}x{n}",
            mask.batch, mask.n_patch
        )));
    }
    Ok(())
}

/// Zero hidden tokens element-wise; sequence length and order are unchanged.
pub fn apply_mask(h: &TokenGrid, mask: &PatchMask) -> Result<TokenGrid> {
    check_mask(h, mask)?;
    let keep = mask.keep_tensor(&h.tokens)?;
    Ok(TokenGrid {
        tokens: h.tokens.broadcast_mul(&keep)?,
        ..h.clone()
    })
}

/// Replace hidden tokens by a learned `[width]` embedding instead of zeros.
pub fn apply_mask_with_token(h: &TokenGrid, mask: &PatchMask, token: &Tensor) -> Result<TokenGrid> {
    check_mask(h, mask)?;
    let keep = mask.keep_tensor(&h.tokens)?;
    let hide = keep.affine(-1.0, 1.0)?;
    let filled = h.tokens.broadcast_mul(&keep)? + hide.broadcast_mul(&token.reshape((1, 1, ()))?)?;
    Ok(TokenGrid {
        tokens: filled?,
        ..h.clone()
    })
}

/// Count of tokens per sample with at least one nonzero entry.
pub fn nonzero_tokens_per_sample(h: &Tensor) -> Result<Vec<usize>> {
    let nz = h.abs()?.sum(2)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(nz.iter().map(|row| row.iter().filter(|&&v| v != 0.0).count()).collect())
}
