//! Diagnostics for feature hacking: centroid-based subset selection in
//! encoder feature space, the partial-noise denoise probe, Gaussian Fréchet
//! distance and pairwise diversity, and the mask-ratio ablation runner.

pub mod ablation;
pub mod report;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::SemanticEncoder;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{interpolate_batch, randn, SINGULARITY_GUARD};
use crate::sampler::{integrate, time_grid_from, Denoiser, SamplerConfig, VelocityField};

pub use ablation::{run_mask_ablation, AblationRow, AblationTable};

/// Added to both covariances before the matrix square root.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Size of the most/least-similar subsets per class.
    pub k: usize,
    /// Noise level of the denoise probe (fraction of signal kept).
    pub t0: f64,
    pub ablation_ratios: Vec<f64>,
    pub ablation_seeds: Vec<u64>,
    /// Generated samples per class when scoring an ablation run.
    pub samples_per_class: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k: 16,
            t0: 0.2,
            ablation_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            ablation_seeds: vec![0],
            samples_per_class: 8,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("analysis.k must be positive".into()));
        }
        if !(self.t0 > 0.0 && self.t0 < 1.0) {
            return Err(Error::Config(format!("analysis.t0 {} outside (0, 1)", self.t0)));
        }
        if let Some(r) = self.ablation_ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("analysis.ablation_ratios entry {r} outside [0, 1)")));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("analysis.samples_per_class must be at least 2".into()));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-image pooled encoder features: the patch-grid mean, L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub pooled: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl FeatureSet {
    /// Pool `[n, patches, d]` grids.
    pub fn from_grids(ids: Vec<String>, labels: Vec<u32>, grids: &Tensor) -> Result<Self> {
        let (n, _, _) = grids.dims3()?;
        let means = grids.to_dtype(DType::F64)?.mean(1)?.to_vec2::<f64>()?;
        Self::from_vectors(ids, labels, means).map(|s| {
            debug_assert_eq!(s.len(), n);
            s
        })
    }

    /// Normalize already pooled vectors.
    pub fn from_vectors(ids: Vec<String>, labels: Vec<u32>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::InvalidInput("feature set is empty".into()));
        }
        if ids.len() != vectors.len() || labels.len() != vectors.len() {
            return Err(Error::InvalidInput(format!(
                "{} ids / {} labels for {} feature rows",
                ids.len(),
                labels.len(),
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        let mut pooled = Vec::with_capacity(vectors.len());
        for (id, v) in ids.iter().zip(vectors) {
            if v.len() != dim {
                return Err(Error::InvalidInput(format!("feature row {id} has dim {} not {dim}", v.len())));
            }
            let n = norm(&v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numerical(format!("feature row {id} has norm {n}")));
            }
            pooled.push(v.into_iter().map(|x| x / n).collect());
        }
        Ok(Self { ids, pooled, labels })
    }

    /// Encode images and pool.
    pub fn encode(encoder: &SemanticEncoder, images: &Tensor, ids: &[String], labels: &[u32]) -> Result<Self> {
        let grids = encoder.encode(&images.to_dtype(DType::F64)?, ids)?;
        Self::from_grids(ids.to_vec(), labels.to_vec(), &grids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pooled[0].len()
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn members(&self, class_id: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class_id).collect()
    }
}

/// Normalized mean of the class's pooled vectors.
pub fn class_centroid(feats: &FeatureSet, class_id: u32) -> Result<Vec<f64>> {
    let members = feats.members(class_id);
    if members.is_empty() {
        return Err(Error::InvalidInput(format!("class {class_id} has no members")));
    }
    let mut mean = vec![0.0; feats.dim()];
    for &i in &members {
        for (m, x) in mean.iter_mut().zip(&feats.pooled[i]) {
            *m += x;
        }
    }
    let count = members.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let n = norm(&mean);
    // Unit inputs: a mean this small is cancellation, not a direction.
    if n < 1e-12 {
        return Err(Error::DegenerateClass(class_id));
    }
    Ok(mean.into_iter().map(|m| m / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetReport {
    pub class_id: u32,
    pub centroid: Vec<f64>,
    /// Most similar first.
    pub most_k: Vec<String>,
    /// Least similar first.
    pub least_k: Vec<String>,
    pub similarity: BTreeMap<String, f64>,
}

/// Top-k and bottom-k class members by cosine similarity to `centroid`.
/// Equal similarities are ordered by ascending id in both lists.
pub fn select_subsets(feats: &FeatureSet, class_id: u32, centroid: &[f64], k: usize) -> Result<SubsetReport> {
    let members = feats.members(class_id);
    if k == 0 || k > members.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} for class {class_id} with {} members",
            members.len()
        )));
    }
    if centroid.len() != feats.dim() {
        return Err(Error::InvalidInput(format!(
            "centroid dim {} vs feature dim {}",
            centroid.len(),
            feats.dim()
        )));
    }
    let cn = norm(centroid);
    let mut scored: Vec<(f64, &str)> = members
        .iter()
        .map(|&i| (dot(&feats.pooled[i], centroid) / cn, feats.ids[i].as_str()))
        .collect();
    let by_id = |a: &(f64, &str), b: &(f64, &str)| a.1.cmp(b.1);
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| by_id(a, b)));
    let most_k = scored[..k].iter().map(|s| s.1.to_string()).collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then_with(|| by_id(a, b)));
    let least_k = scored[..k].iter().map(|s| s.1.to_string()).collect();
    Ok(SubsetReport {
        class_id,
        centroid: centroid.to_vec(),
        most_k,
        least_k,
        similarity: scored.into_iter().map(|(s, id)| (id.to_string(), s)).collect(),
    })
}

/// Centroid and subsets for every class present.
pub fn subset_reports(feats: &FeatureSet, k: usize) -> Result<Vec<SubsetReport>> {
    feats
        .classes()
        .into_iter()
        .map(|c| select_subsets(feats, c, &class_centroid(feats, c)?, k))
        .collect()
}

/// Noise `images` to `t0` with fresh noise from `config.seed`, then integrate
/// the guided field from `t0` to 1 along the tail of the `config.steps` grid.
pub fn denoise_from_t<D: Denoiser + ?Sized>(
    model: &D,
    images: &Tensor,
    class_ids: &[u32],
    t0: f64,
    config: &SamplerConfig,
) -> Result<Tensor> {
    if !(t0 > 0.0 && t0 < 1.0) {
        return Err(Error::Domain(format!("denoise_from_t needs 0 < t0 < 1, got {t0}")));
    }
    config.validate()?;
    let (b, ..) = images.dims4()?;
    if class_ids.len() != b {
        return Err(Error::InvalidInput(format!("{} labels for {b} images", class_ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eps = randn(images.dims(), images.dtype(), images.device(), &mut rng)?;
    let x_t = interpolate_batch(images, &eps, &vec![t0; b])?;
    let field = VelocityField::new(model, class_ids, config.guidance());
    let grid = time_grid_from(t0, config.steps);
    if grid.len() < 2 {
        // t0 is past the last grid point below one: a single x-prediction.
        return field.x_pred(&x_t, t0.min(1.0 - SINGULARITY_GUARD));
    }
    integrate(&field, &x_t, &grid)
}

/// Result of denoising one subset from `t0`.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub class_id: u32,
    /// `"most"` or `"least"` similar to the class centroid.
    pub subset: &'static str,
    pub ids: Vec<String>,
    pub outputs: Tensor,
    /// Pixel-space [`diversity_score`] of the outputs.
    pub diversity: f64,
}

/// Run [`denoise_from_t`] on the most- and least-similar subset of every
/// report, conditioning on the class label.
pub fn denoise_probe<D: Denoiser + ?Sized>(
    model: &D,
    dataset: &Dataset,
    reports: &[SubsetReport],
    t0: f64,
    config: &SamplerConfig,
    dtype: DType,
) -> Result<Vec<ProbeResult>> {
    let index: HashMap<&str, usize> = dataset.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut out = Vec::new();
    for r in reports {
        for (subset, ids) in [("most", &r.most_k), ("least", &r.least_k)] {
            let idx = ids
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::InvalidInput(format!("sample {id} not in dataset")))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = dataset.batch(&idx, dtype)?;
            let labels = vec![r.class_id; idx.len()];
            let outputs = denoise_from_t(model, &batch.images, &labels, t0, config)?;
            let diversity = diversity_score(&tensor_rows(&outputs)?)?;
            out.push(ProbeResult {
                class_id: r.class_id,
                subset,
                ids: ids.clone(),
                outputs,
                diversity,
            });
        }
    }
    Ok(out)
}

/// Rows of `[n, ...]` flattened to f64 vectors.
pub fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = t.dim(0)?;
    Ok(t.to_dtype(DType::F64)?.reshape((n, ()))?.to_vec2::<f64>()?)
}

/// Mean pairwise Euclidean distance over all unordered pairs.
pub fn diversity_score(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("diversity needs at least 2 rows, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 rows for a covariance, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("ragged feature rows".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok((mean, cov))
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    if let Some(&l) = eig.eigenvalues.iter().find(|&&l| l < -1e-9 * scale) {
        return Err(Error::Numerical(format!("matrix is not PSD (eigenvalue {l:e})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2})`. The trace of the product root
/// is taken through the symmetric form `(Σa^{1/2} Σb Σa^{1/2})^{1/2}`, which
/// has the same eigenvalues.
pub fn frechet_gaussian(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::InvalidInput("Gaussian statistics have mismatched dimensions".into()));
    }
    let sa = symmetric_sqrt(cov_a)?;
    let inner = &sa * cov_b * &sa;
    let cross = symmetric_sqrt(&inner)?.trace();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross)
}

/// Fréchet distance between Gaussians fitted to two feature sets, each
/// covariance regularized by `1e-6·I`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, mut ca) = gaussian_stats(a)?;
    let (mb, mut cb) = gaussian_stats(b)?;
    if ma.len() != mb.len() {
        return Err(Error::InvalidInput(format!("feature dims {} vs {}", ma.len(), mb.len())));
    }
    let ridge = DMatrix::identity(ma.len(), ma.len()) * COVARIANCE_RIDGE;
    ca += &ridge;
    cb += &ridge;
    frechet_gaussian(&ma, &ca, &mb, &cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::Rng;

    fn rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn set(vectors: Vec<Vec<f64>>, labels: Vec<u32>) -> FeatureSet {
        let ids = (0..vectors.len()).map(|i| format!("{i:06}")).collect();
        FeatureSet::from_vectors(ids, labels, vectors).unwrap()
    }

    #[test]
    fn identical_members_give_their_direction() {
        let u = vec![0.6, 0.8, 0.0];
        let fs = set(vec![u.clone(); 4], vec![1; 4]);
        let c = class_centroid(&fs, 1).unwrap();
        for (a, b) in c.iter().zip(&u) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn antipodal_members_are_degenerate() {
        let fs = set(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0, 0]);
        assert!(matches!(class_centroid(&fs, 0), Err(Error::DegenerateClass(_))));
        assert!(matches!(class_centroid(&fs, 5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn full_k_selects_whole_class() {
        let fs = set(rows(3, 6, 4), vec![2; 6]);
        let c = class_centroid(&fs, 2).unwrap();
        let r = select_subsets(&fs, 2, &c, 6).unwrap();
        let mut a = r.most_k.clone();
        let mut b = r.least_k.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(select_subsets(&fs, 2, &c, 7).is_err());
    }

    #[test]
    fn duplicate_of_top_ranks_second() {
        let mut v = rows(4, 10, 5);
        let fs = set(v.clone(), vec![0; 10]);
        let c = class_centroid(&fs, 0).unwrap();
        let top = select_subsets(&fs, 0, &c, 1).unwrap().most_k[0].clone();
        let idx: usize = top.parse().unwrap();
        v.push(v[idx].clone());
        let fs2 = set(v, vec![0; 11]);
        // Centroid held fixed so only the tie rule is exercised.
        let r = select_subsets(&fs2, 0, &c, 2).unwrap();
        assert_eq!(r.most_k, vec![top, "000010".to_string()]);
    }

    #[test]
    fn diversity_basics() {
        assert_eq!(diversity_score(&vec![vec![1.0, 2.0]; 3]).unwrap(), 0.0);
        assert!((diversity_score(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap() - 3.0).abs() < 1e-15);
        assert!(diversity_score(&[vec![0.0]]).is_err());
    }

    #[test]
    fn frechet_identical_and_shifted() {
        let a = rows(7, 40, 3);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let shift = [0.5, -1.0, 2.0];
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let want: f64 = shift.iter().map(|s| s * s).sum();
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let mu = DVector::zeros(2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let ok = DMatrix::identity(2, 2);
        assert!(matches!(frechet_gaussian(&mu, &bad, &mu, &ok), Err(Error::Numerical(_))));
    }

    /// Returns the clean batch regardless of input.
    struct Perfect {
        x: Tensor,
    }

    impl Denoiser for Perfect {
        fn predict_x(&self, _: &Tensor, _: &[f64], _: &[u32]) -> Result<Tensor> {
            Ok(self.x.clone())
        }
        fn null_class(&self) -> u32 {
            0
        }
        fn image_shape(&self) -> (usize, usize, usize) {
            let (_, c, h, w) = self.x.dims4().unwrap();
            (c, h, w)
        }
    }

    #[test]
    fn perfect_denoiser_recovers_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[3, 3, 4, 4], DType::F64, &Device::Cpu, &mut rng).unwrap();
        let model = Perfect { x: x.clone() };
        let cfg = SamplerConfig::default();
        for t0 in [0.05, 0.2, 0.5, 0.97, 1.0 - SINGULARITY_GUARD] {
            let out = denoise_from_t(&model, &x, &[1, 2, 3], t0, &cfg).unwrap();
            let err = (out - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(err < 1e-10, "t0 = {t0}: {err}");
        }
        assert!(denoise_from_t(&model, &x, &[1, 2, 3], 0.0, &cfg).is_err());
        assert!(denoise_from_t(&model, &x, &[1, 2, 3], 1.0, &cfg).is_err());
    }

    #[test]
    fn pooled_rows_are_unit() {
        let g = Tensor::rand(-1.0f64, 1.0, (5, 4, 3), &Device::Cpu).unwrap();
        let fs = FeatureSet::from_grids((0..5).map(|i| i.to_string()).collect(), vec![0; 5], &g).unwrap();
        for r in &fs.pooled {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
    }
}
