//! Representation-alignment branches.
//!
//! The branch reads the backbone's intermediate tokens `h_align` and predicts
//! frozen-encoder features of the clean image. Three variants:
//!
//! * `none`: no auxiliary loss.
//! * `mlp`: a token-wise three-layer MLP projection (the REPA baseline).
//! * `mta`: the masked transformer adapter. A random fraction `r` of input
//!   tokens is hidden, the rest pass through two AdaLN-Zero blocks and a
//!   linear projection, and the loss still covers every position, so hidden
//!   positions can only be predicted from context.
//!
//! Nothing in this module writes back into the backbone path; x-prediction is
//! the same whichever branch is attached.

pub mod encoder;
pub mod features;
pub mod mask;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::{adaln_block, adaln_block_specs, linear, silu};
use crate::params::{Init, ParamSpec, TensorMap};

pub use encoder::{EncoderConfig, EncoderKind, SemanticEncoder};
pub use mask::{apply_mask, apply_mask_with_token, sample_mask, PatchMask};

/// Prefix under which every alignment-head parameter is stored.
pub const PREFIX: &str = "align";

/// Norm stabilizer inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Number of transformer blocks in the masked adapter.
pub const ADAPTER_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentVariant {
    None,
    Mlp,
    Mta,
}

impl AlignmentVariant {
    pub fn is_active(self) -> bool {
        self != AlignmentVariant::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentVariant::None => "none",
            AlignmentVariant::Mlp => "mlp",
            AlignmentVariant::Mta => "mta",
        }
    }
}

impl std::str::FromStr for AlignmentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AlignmentVariant::None),
            "mlp" => Ok(AlignmentVariant::Mlp),
            "mta" => Ok(AlignmentVariant::Mta),
            other => Err(Error::Usage(format!("unknown alignment variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub variant: AlignmentVariant,
    pub mask_ratio: f64,
    pub lambda: f64,
    /// Replace hidden tokens by a learned embedding instead of zeros.
    pub mask_token: bool,
    /// Hidden width of the MLP projection head.
    pub mlp_hidden: usize,
    pub encoder: EncoderConfig,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            variant: AlignmentVariant::Mta,
            mask_ratio: 0.2,
            lambda: 0.1,
            mask_token: false,
            mlp_hidden: 128,
            encoder: EncoderConfig::default(),
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant.is_active() && !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "alignment.lambda must be > 0 for variant {}, got {}",
                self.variant.as_str(),
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "alignment.mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if self.variant == AlignmentVariant::Mlp && self.mlp_hidden == 0 {
            return Err(Error::Config("alignment.mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// The trainable projection `h_φ` (mlp) or adapter `d_φ` (mta).
#[derive(Debug, Clone)]
pub struct AlignmentHead {
    variant: AlignmentVariant,
    hidden_dim: usize,
    heads: usize,
    mlp_ratio: usize,
    mlp_hidden: usize,
    feature_dim: usize,
    mask_token: bool,
}

impl AlignmentHead {
    pub fn new(config: &AlignmentConfig, model: &ModelConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            variant: config.variant,
            hidden_dim: model.hidden_dim,
            heads: model.heads,
            mlp_ratio: model.mlp_ratio,
            mlp_hidden: config.mlp_hidden,
            feature_dim,
            mask_token: config.mask_token,
        })
    }

    pub fn variant(&self) -> AlignmentVariant {
        self.variant
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn adapter_block_prefix(i: usize) -> String {
        format!("{PREFIX}.mta.blocks.{i}")
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (h, f) = (self.hidden_dim, self.feature_dim);
        let mut specs = Vec::new();
        match self.variant {
            AlignmentVariant::None => {}
            AlignmentVariant::Mlp => {
                let m = self.mlp_hidden;
                specs.extend(ParamSpec::linear(&format!("{PREFIX}.mlp.fc1"), h, m));
                specs.extend(ParamSpec::linear(&format!("{PREFIX}.mlp.fc2"), m, m));
                specs.extend(ParamSpec::linear(&format!("{PREFIX}.mlp.fc3"), m, f));
            }
            AlignmentVariant::Mta => {
                for i in 0..ADAPTER_BLOCKS {
                    specs.extend(adaln_block_specs(&Self::adapter_block_prefix(i), h, self.mlp_ratio));
                }
                specs.extend(ParamSpec::linear(&format!("{PREFIX}.mta.proj"), h, f));
                if self.mask_token {
                    specs.push(ParamSpec::new(
                        format!("{PREFIX}.mta.mask_token"),
                        &[h],
                        Init::Normal(0.02),
                    ));
                }
            }
        }
        specs
    }

    fn expect(&self, variant: AlignmentVariant) -> Result<()> {
        if self.variant != variant {
            return Err(Error::Usage(format!(
                "{} forward called on a {} head",
                variant.as_str(),
                self.variant.as_str()
            )));
        }
        Ok(())
    }

    /// Token-wise MLP projection `[batch, N, hidden]` → `[batch, N, feature_dim]`.
    pub fn mlp_forward(&self, params: &TensorMap, h: &TokenGrid) -> Result<Tensor> {
        self.expect(AlignmentVariant::Mlp)?;
        let x = silu(&linear(&h.tokens, params, &format!("{PREFIX}.mlp.fc1"))?)?;
        let x = silu(&linear(&x, params, &format!("{PREFIX}.mlp.fc2"))?)?;
        linear(&x, params, &format!("{PREFIX}.mlp.fc3"))
    }

    /// Hide tokens according to `mask` (zeros, or the learned mask token).
    pub fn mask_input(&self, params: &TensorMap, h: &TokenGrid, mask: &PatchMask) -> Result<TokenGrid> {
        if self.mask_token {
            let token = params.get(&format!("{PREFIX}.mta.mask_token"))?;
            apply_mask_with_token(h, mask, token)
        } else {
            apply_mask(h, mask)
        }
    }

    /// Two AdaLN-Zero blocks over the (already masked) tokens, then a linear
    /// projection; predictions are produced at every position.
    pub fn mta_forward(&self, params: &TensorMap, h_masked: &TokenGrid, cond: &Tensor) -> Result<Tensor> {
        self.expect(AlignmentVariant::Mta)?;
        let mut x = h_masked.tokens.clone();
        for i in 0..ADAPTER_BLOCKS {
            x = adaln_block(&x, cond, params, &Self::adapter_block_prefix(i), self.heads)?;
        }
        linear(&x, params, &format!("{PREFIX}.mta.proj"))
    }

    /// Feature predictions for whichever variant this head is, or `None`.
    pub fn predict(
        &self,
        params: &TensorMap,
        h_align: &TokenGrid,
        cond: &Tensor,
        mask: Option<&PatchMask>,
    ) -> Result<Option<Tensor>> {
        match self.variant {
            AlignmentVariant::None => Ok(None),
            AlignmentVariant::Mlp => self.mlp_forward(params, h_align).map(Some),
            AlignmentVariant::Mta => {
                let masked = match mask {
                    Some(m) => self.mask_input(params, h_align, m)?,
                    None => h_align.clone(),
                };
                self.mta_forward(params, &masked, cond).map(Some)
            }
        }
    }
}

/// Per-position cosine similarity with `ε`-stabilized norms: `[batch, N]`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidInput(format!(
            "cosine similarity shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let dot = (a * b)?.sum(D::Minus1)?;
    let eps2 = COSINE_EPS * COSINE_EPS;
    let na = (a.sqr()?.sum(D::Minus1)? + eps2)?.sqrt()?;
    let nb = (b.sqr()?.sum(D::Minus1)? + eps2)?.sqrt()?;
    Ok((dot / (na * nb)?)?)
}

/// Negative mean cosine similarity over batch and every patch position.
pub fn alignment_loss(targets: &Tensor, preds: &Tensor) -> Result<Tensor> {
    Ok(cosine_similarity(targets, preds)?.mean_all()?.neg()?)
}

/// `l_denoise + λ·l_align`; the alignment term is ignored for variant `none`.
pub fn total_loss(
    l_denoise: &Tensor,
    l_align: Option<&Tensor>,
    lambda: f64,
    variant: AlignmentVariant,
) -> Result<Tensor> {
    if !variant.is_active() {
        return Ok(l_denoise.clone());
    }
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "lambda must be > 0 with an active alignment branch, got {lambda}"
        )));
    }
    let l_align = l_align.ok_or_else(|| {
        Error::State(format!("variant {} produced no alignment loss", variant.as_str()))
    })?;
    Ok((l_denoise + l_align.affine(lambda, 0.0)?)?)
}
