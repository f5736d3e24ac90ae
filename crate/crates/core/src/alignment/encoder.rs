//! Frozen semantic encoders producing per-patch alignment targets.
//!
//! None of these ever see gradients: outputs are detached, and the random
//! encoder's weights live in a private map that training never touches.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::patches_from_images;
use crate::error::{Error, Result};
use crate::nn::{add_positions, layer_norm, linear, plain_block, plain_block_specs};
use crate::params::{Init, ParamSpec, TensorMap};

use super::features::{write_feature_dir, FeatureIndex, FeatureStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Small transformer with seed-fixed weights.
    FrozenRandomVit,
    /// Feature grids prepared offline and read from disk.
    PrecomputedFile,
    /// Blur, cell average and a fixed random projection: deliberately many-to-one.
    LossyPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub feature_dim: usize,
    /// Native grid side (rows = cols) for the computed encoders.
    pub grid: usize,
    pub seed: u64,
    pub blur_passes: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    /// Directory of precomputed shards (precomputed-file only).
    pub features_dir: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::LossyPool,
            feature_dim: 32,
            grid: 4,
            seed: 1234,
            blur_passes: 2,
            vit_depth: 2,
            vit_heads: 4,
            features_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    RandomVit { params: TensorMap, patch: usize },
    LossyPool { params: TensorMap, cell: usize },
    Precomputed(FeatureStore),
}

/// A frozen encoder `f(·)` mapping clean images to a feature grid.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    config: EncoderConfig,
    rows: usize,
    cols: usize,
    inner: Inner,
}

impl SemanticEncoder {
    pub fn new(config: &EncoderConfig, image_size: usize, channels: usize) -> Result<Self> {
        let device = Device::Cpu;
        let d = config.feature_dim;
        if d == 0 {
            return Err(Error::Config("encoder feature_dim must be positive".into()));
        }
        let computed_grid = || -> Result<usize> {
            if config.grid == 0 || image_size % config.grid != 0 {
                return Err(Error::Config(format!(
                    "encoder grid {} does not divide image size {image_size}",
                    config.grid
                )));
            }
            Ok(image_size / config.grid)
        };
        let (rows, cols, inner) = match config.kind {
            EncoderKind::FrozenRandomVit => {
                let patch = computed_grid()?;
                if config.vit_heads == 0 || d % config.vit_heads != 0 {
                    return Err(Error::Config(format!(
                        "encoder feature_dim {d} not divisible by vit_heads {}",
                        config.vit_heads
                    )));
                }
                let mut specs = Vec::new();
                specs.extend(ParamSpec::linear("enc.patch_embed", channels * patch * patch, d));
                specs.push(ParamSpec::new("enc.pos_embed", &[config.grid * config.grid, d], Init::Normal(0.5)));
                for i in 0..config.vit_depth {
                    specs.extend(plain_block_specs(&format!("enc.blocks.{i}"), d, 2));
                }
                let params = TensorMap::initialize(&specs, config.seed, DType::F64, &device)?;
                (config.grid, config.grid, Inner::RandomVit { params, patch })
            }
            EncoderKind::LossyPool => {
                let cell = computed_grid()?;
                let specs = [
                    ParamSpec::new("enc.proj.weight", &[channels, d], Init::Normal(1.5)),
                    ParamSpec::new("enc.proj.bias", &[d], Init::Normal(0.5)),
                ];
                let params = TensorMap::initialize(&specs, config.seed, DType::F64, &device)?;
                (config.grid, config.grid, Inner::LossyPool { params, cell })
            }
            EncoderKind::PrecomputedFile => {
                if config.features_dir.is_empty() {
                    return Err(Error::Config(
                        "precomputed-file encoder needs alignment.encoder.features_dir".into(),
                    ));
                }
                let store = FeatureStore::open(PathBuf::from(&config.features_dir))?;
                if store.feature_dim() != d {
                    return Err(Error::Config(format!(
                        "feature store has dim {}, config says {d}",
                        store.feature_dim()
                    )));
                }
                (store.rows(), store.cols(), Inner::Precomputed(store))
            }
        };
        if rows == 0 || cols == 0 {
            return Err(Error::Config("encoder grid is empty".into()));
        }
        Ok(Self {
            config: config.clone(),
            rows,
            cols,
            inner,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.config.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// The encoder's own weights (empty for the file-backed encoder).
    pub fn frozen_params(&self) -> TensorMap {
        match &self.inner {
            Inner::RandomVit { params, .. } | Inner::LossyPool { params, .. } => params.clone(),
            Inner::Precomputed(_) => TensorMap::new(),
        }
    }

    /// Features on the encoder's native grid: `[batch, rows·cols, feature_dim]`.
    pub fn encode(&self, images: &Tensor, ids: &[String]) -> Result<Tensor> {
        let images = images.detach();
        let dtype = images.dtype();
        let out = match &self.inner {
            Inner::RandomVit { params, patch } => {
                let params = params.to_dtype(dtype)?;
                let patches = patches_from_images(&images, *patch)?;
                let mut x = add_positions(
                    &linear(&patches, &params, "enc.patch_embed")?,
                    params.get("enc.pos_embed")?,
                )?;
                for i in 0..self.config.vit_depth {
                    x = plain_block(&x, &params, &format!("enc.blocks.{i}"), self.config.vit_heads)?;
                }
                layer_norm(&x)?
            }
            Inner::LossyPool { params, cell } => {
                let params = params.to_dtype(dtype)?;
                let (_, c, _, _) = images.dims4()?;
                let mut x = images.clone();
                if self.config.blur_passes > 0 {
                    let kernel = (Tensor::ones((c, 1, 3, 3), dtype, images.device())? / 9.0)?;
                    for _ in 0..self.config.blur_passes {
                        x = x.conv2d(&kernel, 1, 1, 1, c)?;
                    }
                }
                let pooled = x.avg_pool2d(*cell)?;
                let (b, c, r, q) = pooled.dims4()?;
                let cells = pooled.reshape((b, c, r * q))?.transpose(1, 2)?.contiguous()?;
                linear(&cells, &params, "enc.proj")?.tanh()?
            }
            Inner::Precomputed(store) => store.gather(ids)?.to_dtype(dtype)?,
        };
        Ok(out.detach())
    }

    /// Encode `images` and store the native grids as a feature directory
    /// readable by the precomputed-file encoder.
    pub fn write_features(&self, dir: &Path, images: &Tensor, ids: &[String], shard_size: usize) -> Result<FeatureIndex> {
        let n = images.dim(0)?;
        let mut grids = Vec::with_capacity(n);
        for start in (0..n).step_by(256) {
            let len = 256.min(n - start);
            let feats = self.encode(&images.narrow(0, start, len)?, &ids[start..start + len])?;
            for g in feats.to_dtype(DType::F32)?.reshape((len, ()))?.to_vec2::<f32>()? {
                grids.push(g);
            }
        }
        write_feature_dir(dir, ids, &grids, self.rows, self.cols, self.feature_dim(), shard_size)
    }

    /// Per-patch targets on the backbone's grid (bilinear when grids differ).
    pub fn encode_target(&self, images: &Tensor, ids: &[String], grid: (usize, usize)) -> Result<Tensor> {
        let native = self.encode(images, ids)?;
        if (self.rows, self.cols) == grid {
            return Ok(native);
        }
        resample_bilinear(&native, (self.rows, self.cols), grid)
    }
}

/// Interpolation weights for one axis with half-pixel centres, edge clamped:
/// `out[i] = Σ_j w[i][j]·in[j]`.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let w = src - i0 as f64;
            if i1 == i0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - w), (i1, w)]
            }
        })
        .collect()
}

/// Separable bilinear resampling of `[batch, rows·cols, dim]` feature grids.
pub fn resample_bilinear(feats: &Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    if from.0 == 0 || from.1 == 0 || to.0 == 0 || to.1 == 0 {
        return Err(Error::Config(format!(
            "cannot resample feature grid {from:?} to {to:?}"
        )));
    }
    let (b, n, d) = feats.dims3()?;
    if n != from.0 * from.1 {
        return Err(Error::InvalidInput(format!(
            "{n} feature tokens do not fill a {}x{} grid",
            from.0, from.1
        )));
    }
    let dtype = feats.dtype();
    let src = feats.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let wr = axis_weights(from.0, to.0);
    let wc = axis_weights(from.1, to.1);

    // Columns first, then rows.
    let mut tmp = vec![0.0; b * from.0 * to.1 * d];
    for bi in 0..b {
        for r in 0..from.0 {
            for (c, weights) in wc.iter().enumerate() {
                let dst = ((bi * from.0 + r) * to.1 + c) * d;
                for &(j, w) in weights {
                    let s = ((bi * from.0 + r) * from.1 + j) * d;
                    for k in 0..d {
                        tmp[dst + k] += w * src[s + k];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; b * to.0 * to.1 * d];
    for bi in 0..b {
        for (r, weights) in wr.iter().enumerate() {
            for c in 0..to.1 {
                let dst = ((bi * to.0 + r) * to.1 + c) * d;
                for &(i, w) in weights {
                    let s = ((bi * from.0 + i) * to.1 + c) * d;
                    for k in 0..d {
                        out[dst + k] += w * tmp[s + k];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (b, to.0 * to.1, d), feats.device())?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::randn;
    use crate::params::{named_rng, tensor_bits};

    fn images(b: usize) -> Tensor {
        let mut rng = named_rng(5, "images");
        randn(&[b, 3, 16, 16], DType::F32, &Device::Cpu, &mut rng)
            .unwrap()
            .clamp(-1.0, 1.0)
            .unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:06}")).collect()
    }

    #[test]
    fn lossy_pool_constant_image_gives_equal_features() {
        let cfg = EncoderConfig { blur_passes: 0, ..EncoderConfig::default() };
        let enc = SemanticEncoder::new(&cfg, 16, 3).unwrap();
        let img = Tensor::full(0.3f32, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let f = enc.encode(&img, &ids(1)).unwrap().to_vec3::<f32>().unwrap();
        for tok in &f[0] {
            assert_eq!(tok, &f[0][0]);
        }
    }

    #[test]
    fn encoders_are_deterministic() {
        for kind in [EncoderKind::LossyPool, EncoderKind::FrozenRandomVit] {
            let cfg = EncoderConfig { kind, ..EncoderConfig::default() };
            let enc = SemanticEncoder::new(&cfg, 16, 3).unwrap();
            let x = images(2);
            let a = enc.encode_target(&x, &ids(2), (8, 8)).unwrap();
            let b = SemanticEncoder::new(&cfg, 16, 3)
                .unwrap()
                .encode_target(&x, &ids(2), (8, 8))
                .unwrap();
            assert_eq!(a.dims(), &[2, 64, 32]);
            assert_eq!(tensor_bits(&a).unwrap(), tensor_bits(&b).unwrap());
        }
    }

    #[test]
    fn lossy_pool_ignores_fine_texture() {
        let cfg = EncoderConfig::default();
        let enc = SemanticEncoder::new(&cfg, 16, 3).unwrap();
        let base = Tensor::full(0.2f32, (1, 3, 16, 16), &Device::Cpu).unwrap();
        // ±0.1 checkerboard: zero mean over every 4x4 cell.
        let checker: Vec<f32> = (0..3 * 16 * 16)
            .map(|i| {
                let (y, x) = ((i / 16) % 16, i % 16);
                if (x + y) % 2 == 0 { 0.1 } else { -0.1 }
            })
            .collect();
        let tex = (&base + Tensor::from_vec(checker, (1, 3, 16, 16), &Device::Cpu).unwrap()).unwrap();
        let a = enc.encode(&base, &ids(1)).unwrap();
        let b = enc.encode(&tex, &ids(1)).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 0.05, "texture moved lossy features by {diff}");
    }

    /// Direct (non-separable) bilinear evaluation at one output location.
    fn bilinear_oracle(grid: &[Vec<f64>], r_in: usize, c_in: usize, r: usize, c: usize, r_out: usize, c_out: usize) -> f64 {
        let sy = ((r as f64 + 0.5) * r_in as f64 / r_out as f64 - 0.5).max(0.0).min((r_in - 1) as f64);
        let sx = ((c as f64 + 0.5) * c_in as f64 / c_out as f64 - 0.5).max(0.0).min((c_in - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(r_in - 1), (x0 + 1).min(c_in - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        grid[y0][x0] * (1.0 - fy) * (1.0 - fx)
            + grid[y0][x1] * (1.0 - fy) * fx
            + grid[y1][x0] * fy * (1.0 - fx)
            + grid[y1][x1] * fy * fx
    }

    #[test]
    fn resample_matches_bilinear_oracle() {
        let mut rng = named_rng(3, "grid");
        let feats = randn(&[2, 16, 3], DType::F64, &Device::Cpu, &mut rng).unwrap();
        let out = resample_bilinear(&feats, (4, 4), (8, 8)).unwrap().to_vec3::<f64>().unwrap();
        let src = feats.to_vec3::<f64>().unwrap();
        for b in 0..2 {
            for k in 0..3 {
                let grid: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| src[b][r * 4 + c][k]).collect()).collect();
                for r in 0..8 {
                    for c in 0..8 {
                        let want = bilinear_oracle(&grid, 4, 4, r, c, 8, 8);
                        assert!((out[b][r * 8 + c][k] - want).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(matches!(resample_bilinear(&feats, (0, 4), (8, 8)), Err(Error::Config(_))));
    }

    #[test]
    fn resample_identity_when_grids_match() {
        let mut rng = named_rng(3, "grid");
        let feats = randn(&[1, 9, 2], DType::F64, &Device::Cpu, &mut rng).unwrap();
        let out = resample_bilinear(&feats, (3, 3), (3, 3)).unwrap();
        assert_eq!(tensor_bits(&out).unwrap(), tensor_bits(&feats).unwrap());
    }

    #[test]
    fn encoder_output_carries_no_gradient_path() {
        let enc = SemanticEncoder::new(&EncoderConfig::default(), 16, 3).unwrap();
        let var = candle_core::Var::from_tensor(&images(1)).unwrap();
        let f = enc.encode(var.as_tensor(), &ids(1)).unwrap();
        let g = f.sum_all().unwrap().backward().unwrap();
        assert!(g.get(var.as_tensor()).is_none());
    }
}
