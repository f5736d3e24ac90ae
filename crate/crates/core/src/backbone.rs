//! JiT-style pixel denoiser: patch embedding, AdaLN-Zero blocks with in-context
//! class tokens appended from a fixed block onward, and an x-prediction head.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adaln_block, adaln_block_specs, add_positions, layer_norm, linear, modulate, silu};
use crate::params::{Init, ParamSpec, TensorMap};

/// Prefix under which every backbone parameter is stored.
pub const PREFIX: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub in_context_tokens: usize,
    /// 1-based index of the first block that sees the class tokens.
    pub in_context_start_block: usize,
    /// Block whose output feeds the alignment branch (0 = patch embeddings).
    pub alignment_depth: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            depth: 6,
            hidden_dim: 128,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            in_context_tokens: 8,
            in_context_start_block: 3,
            alignment_depth: 2,
            time_embed_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.depth == 0 || !(1..=self.depth).contains(&self.in_context_start_block) {
            return fail(format!(
                "in_context_start_block {} must lie in [1, depth={}]",
                self.in_context_start_block, self.depth
            ));
        }
        if self.alignment_depth >= self.in_context_start_block {
            return fail(format!(
                "alignment_depth {} must precede in_context_start_block {}",
                self.alignment_depth, self.in_context_start_block
            ));
        }
        if self.num_classes == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return fail("num_classes, channels and mlp_ratio must be positive".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return fail("time_embed_dim must be a positive even number".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Label of the learned unconditional class.
    pub fn null_class(&self) -> u32 {
        self.num_classes as u32
    }
}

/// Hidden tokens with their spatial layout. Context tokens, when present,
/// follow the `rows·cols` image tokens.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub rows: usize,
    pub cols: usize,
    pub n_ctx: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, rows: usize, cols: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != rows * cols {
            return Err(Error::InvalidInput(format!(
                "{n} tokens do not fill a {rows}x{cols} grid"
            )));
        }
        Ok(Self {
            tokens,
            rows,
            cols,
            n_ctx: 0,
        })
    }

    pub fn n_patch(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.n_patch() + self.n_ctx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.tokens.dims3()?.0)
    }

    /// Append `[batch, K, width]` context tokens after the image tokens.
    pub fn in_context_concat(&self, class_tokens: &Tensor) -> Result<TokenGrid> {
        if self.n_ctx != 0 {
            return Err(Error::State(
                "in-context class tokens were already concatenated".into(),
            ));
        }
        let (b, k, c) = class_tokens.dims3()?;
        let (tb, _, tc) = self.tokens.dims3()?;
        if b != tb || c != tc {
            return Err(Error::InvalidInput(format!(
                "class tokens [{b}, {k}, {c}] do not match tokens [{tb}, _, {tc}]"
            )));
        }
        if k == 0 {
            return Ok(self.clone());
        }
        Ok(TokenGrid {
            tokens: Tensor::cat(&[&self.tokens, class_tokens], 1)?,
            rows: self.rows,
            cols: self.cols,
            n_ctx: k,
        })
    }

    pub fn strip_context(&self) -> Result<TokenGrid> {
        if self.n_ctx == 0 {
            return Ok(self.clone());
        }
        Ok(TokenGrid {
            tokens: self.tokens.narrow(1, 0, self.n_patch())?,
            rows: self.rows,
            cols: self.cols,
            n_ctx: 0,
        })
    }
}

/// `[B, C, H, W]` → `[B, (H/p)·(W/p), C·p·p]`, patches in row-major order.
pub fn patches_from_images(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape(vec![b, c, gh, patch, gw, patch])?
        .permute(vec![0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, gh * gw, c * patch * patch))?)
}

/// Inverse of [`patches_from_images`].
pub fn images_from_patches(
    patches: &Tensor,
    channels: usize,
    patch: usize,
    rows: usize,
    cols: usize,
) -> Result<Tensor> {
    let (b, n, d) = patches.dims3()?;
    if n != rows * cols || d != channels * patch * patch {
        return Err(Error::InvalidInput(format!(
            "patch tensor [{b}, {n}, {d}] does not match {rows}x{cols} grid of {channels}x{patch}x{patch}"
        )));
    }
    Ok(patches
        .reshape(vec![b, rows, cols, channels, patch, patch])?
        .permute(vec![0, 3, 1, 4, 2, 5])?
        .contiguous()?
        .reshape((b, channels, rows * patch, cols * patch))?)
}

/// Sinusoidal timestep features `[cos(ωt), sin(ωt)]` with `t` scaled by 1000.
pub fn timestep_features(ts: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let (mut cos, mut sin) = (Vec::with_capacity(half), Vec::with_capacity(half));
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = 1000.0 * t * freq;
            cos.push(arg.cos());
            sin.push(arg.sin());
        }
        data.extend(cos);
        data.extend(sin);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Output of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub x_pred: Tensor,
    /// Image-token features after block `alignment_depth`.
    pub h_align: TokenGrid,
    /// The conditioning vector shared by every AdaLN block.
    pub cond: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: ModelConfig,
}

impl Backbone {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn name(&self, s: &str) -> String {
        format!("{PREFIX}.{s}")
    }

    pub fn block_prefix(&self, index: usize) -> String {
        self.name(&format!("blocks.{index}"))
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let h = c.hidden_dim;
        let n = PREFIX;
        let mut specs = Vec::new();
        specs.extend(ParamSpec::linear(&format!("{n}.patch_embed"), c.patch_dim(), h));
        specs.push(ParamSpec::new(
            format!("{n}.pos_embed"),
            &[c.num_patches(), h],
            Init::Normal(0.02),
        ));
        specs.extend(ParamSpec::linear(&format!("{n}.t_embed.fc1"), c.time_embed_dim, h));
        specs.extend(ParamSpec::linear(&format!("{n}.t_embed.fc2"), h, h));
        specs.push(ParamSpec::new(
            format!("{n}.class_embed"),
            &[c.num_classes + 1, h],
            Init::Normal(0.02),
        ));
        if c.in_context_tokens > 0 {
            specs.push(ParamSpec::new(
                format!("{n}.context_tokens"),
                &[c.num_classes + 1, c.in_context_tokens * h],
                Init::Normal(0.02),
            ));
        }
        for i in 1..=c.depth {
            specs.extend(adaln_block_specs(&self.block_prefix(i), h, c.mlp_ratio));
        }
        specs.extend(ParamSpec::zero_linear(&format!("{n}.final.adaln"), h, 2 * h));
        specs.extend(ParamSpec::linear(&format!("{n}.final.linear"), h, c.patch_dim()));
        specs
    }

    fn check_classes(&self, class_ids: &[u32]) -> Result<()> {
        if let Some(bad) = class_ids.iter().find(|&&y| y > self.config.null_class()) {
            return Err(Error::InvalidInput(format!(
                "class id {bad} outside [0, {}]",
                self.config.null_class()
            )));
        }
        Ok(())
    }

    fn class_index(class_ids: &[u32], device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(class_ids, class_ids.len(), device)?)
    }

    /// Patch embedding plus learned positions.
    pub fn embed(&self, params: &TensorMap, images: &Tensor) -> Result<TokenGrid> {
        let c = &self.config;
        let (_, ch, h, w) = images.dims4()?;
        if ch != c.channels || h != c.image_size || w != c.image_size {
            return Err(Error::InvalidInput(format!(
                "expected [_, {}, {s}, {s}] images, got {:?}",
                c.channels,
                images.dims(),
                s = c.image_size
            )));
        }
        let patches = patches_from_images(images, c.patch_size)?;
        let tokens = linear(&patches, params, &self.name("patch_embed"))?;
        let tokens = add_positions(&tokens, params.get(&self.name("pos_embed"))?)?;
        TokenGrid::new(tokens, c.grid(), c.grid())
    }

    /// Timestep MLP output plus class embedding: `[batch, hidden]`.
    pub fn conditioning(&self, params: &TensorMap, ts: &[f64], class_ids: &[u32]) -> Result<Tensor> {
        self.check_classes(class_ids)?;
        if ts.len() != class_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} timesteps for {} labels",
                ts.len(),
                class_ids.len()
            )));
        }
        let table = params.get(&self.name("class_embed"))?;
        let feats = timestep_features(ts, self.config.time_embed_dim, table.dtype(), table.device())?;
        let t_emb = linear(&feats, params, &self.name("t_embed.fc1"))?;
        let t_emb = linear(&silu(&t_emb)?, params, &self.name("t_embed.fc2"))?;
        let y_emb = table.index_select(&Self::class_index(class_ids, table.device())?, 0)?;
        Ok((t_emb + y_emb)?)
    }

    /// `[batch, K, hidden]` in-context tokens for the given labels.
    pub fn class_tokens(&self, params: &TensorMap, class_ids: &[u32]) -> Result<Option<Tensor>> {
        let c = &self.config;
        if c.in_context_tokens == 0 {
            return Ok(None);
        }
        self.check_classes(class_ids)?;
        let table = params.get(&self.name("context_tokens"))?;
        let rows = table.index_select(&Self::class_index(class_ids, table.device())?, 0)?;
        Ok(Some(rows.reshape((
            class_ids.len(),
            c.in_context_tokens,
            c.hidden_dim,
        ))?))
    }

    /// One AdaLN-Zero block (1-based index).
    pub fn block(&self, params: &TensorMap, index: usize, tokens: &TokenGrid, cond: &Tensor) -> Result<TokenGrid> {
        let out = adaln_block(
            &tokens.tokens,
            cond,
            params,
            &self.block_prefix(index),
            self.config.heads,
        )?;
        Ok(TokenGrid {
            tokens: out,
            ..tokens.clone()
        })
    }

    /// Final modulated norm and linear map back to pixels.
    pub fn head(&self, params: &TensorMap, tokens: &TokenGrid, cond: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let tokens = tokens.strip_context()?;
        let (b, _, h) = tokens.tokens.dims3()?;
        let m = linear(&silu(cond)?, params, &self.name("final.adaln"))?.reshape((b, 2, 1, h))?;
        let shift = m.narrow(1, 0, 1)?.squeeze(1)?;
        let scale = m.narrow(1, 1, 1)?.squeeze(1)?;
        let x = modulate(&layer_norm(&tokens.tokens)?, &shift, &scale)?;
        let patches = linear(&x, params, &self.name("final.linear"))?;
        images_from_patches(&patches, c.channels, c.patch_size, tokens.rows, tokens.cols)
    }

    pub fn forward(
        &self,
        params: &TensorMap,
        x_t: &Tensor,
        ts: &[f64],
        class_ids: &[u32],
    ) -> Result<BackboneOutput> {
        let c = &self.config;
        let batch = x_t.dims4()?.0;
        if class_ids.len() != batch {
            return Err(Error::InvalidInput(format!(
                "{} labels for a batch of {batch}",
                class_ids.len()
            )));
        }
        let cond = self.conditioning(params, ts, class_ids)?;
        let mut tokens = self.embed(params, x_t)?;
        let mut h_align = (c.alignment_depth == 0).then(|| tokens.clone());
        for i in 1..=c.depth {
            if i == c.in_context_start_block {
                if let Some(ctx) = self.class_tokens(params, class_ids)? {
                    tokens = tokens.in_context_concat(&ctx)?;
                }
            }
            tokens = self.block(params, i, &tokens, &cond)?;
            if i == c.alignment_depth {
                h_align = Some(tokens.clone());
            }
        }
        let x_pred = self.head(params, &tokens, &cond)?;
        let h_align = h_align.ok_or_else(|| Error::State("alignment depth never reached".into()))?;
        Ok(BackboneOutput {
            x_pred,
            h_align,
            cond,
        })
    }
}
