use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;

use pixelrepa::alignment::features::FeatureStore;
use pixelrepa::alignment::SemanticEncoder;
use pixelrepa::analysis::report::{ablation_rows, plot_series, subset_rows, write_csv};
use pixelrepa::analysis::{
    denoise_probe, diversity_score, frechet_distance, run_mask_ablation, subset_reports, tensor_rows, FeatureSet,
    SubsetReport,
};
use pixelrepa::backbone::Backbone;
use pixelrepa::config::RunConfig;
use pixelrepa::data::{write_png_grid, DataConfig, Dataset, DatasetKind};
use pixelrepa::run::{checkpoint_config, open_checkpoint, read_sample_tensor, train_run, write_samples, RunDir};
use pixelrepa::sampler::{parse_ema, BackboneDenoiser, SamplerConfig};
use pixelrepa::verify;
use pixelrepa::{Error, Result};

use crate::{AnalyzeArgs, AnalyzeMode, Kind, MakeDatasetArgs, SampleArgs, TrainArgs, EXIT_VERIFY, RUN_ROOT_ENV};

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| Error::Usage(format!("bad {what} entry {p:?} in {s:?}"))))
        .collect()
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let config = RunConfig::load(&a.config, &a.overrides)?;
    let canonical = config.canonical()?;
    if a.dry_run {
        print!("{canonical}");
        println!("# config hash {}", config.hash_hex()?);
        return Ok(0);
    }
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => {
            let stem = a.config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            run_root().join(format!("{stem}-{}", &config.hash_hex()?[..8]))
        }
    };
    let every = a.log_every;
    let out = train_run(&config, &dir, |m| {
        if every > 0 && (m.step % every == 0 || m.step == 1) {
            let align = m.l_align.map(|v| format!(" l_align {v:.4}")).unwrap_or_default();
            eprintln!(
                "step {:>6}  l_denoise {:.4}{align}  total {:.4}  |g| {:.3}",
                m.step, m.l_denoise, m.total, m.grad_norm
            );
        }
    })?;
    println!("{}", out.checkpoint.display());
    Ok(0)
}

fn sampler_from(base: &SamplerConfig, a: &SampleArgs) -> Result<SamplerConfig> {
    let mut s = base.clone();
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.w {
        s.guidance_scale = v;
    }
    if let Some(v) = &a.interval {
        let iv: Vec<f64> = parse_list(v, "interval")?;
        if iv.len() != 2 {
            return Err(Error::Usage(format!("--interval takes lo,hi, got {v:?}")));
        }
        s.guidance_interval = [iv[0], iv[1]];
    }
    if let Some(v) = &a.ema {
        parse_ema(v)?;
        s.ema = v.clone();
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    s.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(s)
}

pub fn sample(a: &SampleArgs) -> Result<u8> {
    if !a.checkpoint.exists() {
        return Err(Error::io(&a.checkpoint, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let ckpt = open_checkpoint(&a.checkpoint, None)?;
    let config = checkpoint_config(&ckpt)?;
    let sampler = sampler_from(&config.sampler, a)?;
    let classes: Vec<u32> = match &a.classes {
        Some(c) => parse_list(c, "class")?,
        None => (0..config.model.num_classes as u32).collect(),
    };
    if classes.is_empty() {
        return Err(Error::Usage("--classes is empty".into()));
    }
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a
            .checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|run| RunDir::new(run).samples())
            .unwrap_or_else(|| PathBuf::from("samples")),
    };
    let name = a.name.clone().unwrap_or_else(|| {
        format!(
            "step{}_seed{}_steps{}_w{}_ema{}",
            ckpt.trailer.step, sampler.seed, sampler.steps, sampler.guidance_scale, sampler.ema
        )
    });
    let s = write_samples(&ckpt, &sampler, &classes, &out, &name)?;
    println!("{}", s.png.display());
    println!("{}", s.tensor.display());
    println!("{}", s.sidecar.display());
    Ok(0)
}

fn analysis_config(a: &AnalyzeArgs) -> Result<RunConfig> {
    match &a.config {
        Some(p) => RunConfig::load(p, &a.overrides),
        None if !a.overrides.is_empty() => RunConfig::parse_with("", &a.overrides),
        None => Ok(RunConfig::default()),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Usage(format!("analyze {mode} needs --{flag}")))
}

/// Pooled features for every dataset image, from shards when given.
fn dataset_features(data: &Dataset, features: Option<&Path>, config: &RunConfig) -> Result<FeatureSet> {
    match features {
        Some(dir) => {
            let store = FeatureStore::open(dir.to_path_buf())?;
            FeatureSet::from_grids(data.ids.clone(), data.labels.clone(), &store.gather(&data.ids)?)
        }
        None => {
            let encoder = SemanticEncoder::new(&config.alignment.encoder, data.image_size(), data.channels())?;
            FeatureSet::encode(&encoder, &data.images, &data.ids, &data.labels)
        }
    }
}

fn out_dir(a: &AnalyzeArgs, default: &str) -> Result<PathBuf> {
    let d = a.out.clone().unwrap_or_else(|| run_root().join(default));
    mkdir(&d)?;
    Ok(d)
}

/// Fraction of each class's most-similar subset that is in the tight mode.
fn tight_overlap(data: &Dataset, reports: &[SubsetReport]) -> Option<Vec<(u32, f64)>> {
    let m = data.mode_manifest()?;
    Some(
        reports
            .iter()
            .map(|r| {
                let tight = m.tight.get(&r.class_id).cloned().unwrap_or_default();
                let hit = r.most_k.iter().filter(|id| tight.contains(id)).count();
                (r.class_id, hit as f64 / r.most_k.len() as f64)
            })
            .collect(),
    )
}

pub fn analyze(a: &AnalyzeArgs) -> Result<u8> {
    match a.mode {
        AnalyzeMode::Centroids => centroids(a),
        AnalyzeMode::DenoiseProbe => probe(a),
        AnalyzeMode::Metrics => metrics(a),
        AnalyzeMode::AblateMask => ablate(a),
    }
}

fn centroids(a: &AnalyzeArgs) -> Result<u8> {
    let config = analysis_config(a)?;
    let data = Dataset::load_dir(require(&a.data, "data", "centroids")?)?;
    let feats = dataset_features(&data, a.features.as_deref(), &config)?;
    let k = a.k.unwrap_or(config.analysis.k);
    let reports = subset_reports(&feats, k)?;
    let out = out_dir(a, "analysis")?;
    let (header, rows) = subset_rows(&reports);
    let mut comments = vec![format!(
        "centroid = normalized mean of patch-mean, L2-normalized encoder features; k = {k}; ties by ascending id"
    )];
    if let Some(ov) = tight_overlap(&data, &reports) {
        for (c, f) in ov {
            comments.push(format!("class {c}: tight-mode fraction of most-similar subset {f:.3}"));
        }
    }
    let path = out.join("subsets.csv");
    write_csv(&path, &comments, &header, &rows)?;
    for r in &reports {
        let mean = |ids: &[String]| ids.iter().map(|i| r.similarity[i]).sum::<f64>() / ids.len() as f64;
        println!(
            "class {:>3}: most-{k} mean similarity {:.4}, least-{k} {:.4}",
            r.class_id,
            mean(&r.most_k),
            mean(&r.least_k)
        );
    }
    println!("{}", path.display());
    Ok(0)
}

fn probe(a: &AnalyzeArgs) -> Result<u8> {
    if a.checkpoint.is_empty() {
        return Err(Error::Usage("analyze denoise-probe needs at least one --checkpoint".into()));
    }
    let data = Dataset::load_dir(require(&a.data, "data", "denoise-probe")?)?;
    let out = out_dir(a, "analysis")?;
    let header = ["checkpoint", "class_id", "subset", "diversity"].map(String::from).to_vec();
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut reports = None;
    let mut t0_used = None;
    for (i, path) in a.checkpoint.iter().enumerate() {
        let ckpt = open_checkpoint(path, None)?;
        let config = checkpoint_config(&ckpt)?;
        let t0 = a.t0.unwrap_or(config.analysis.t0);
        t0_used = Some(t0);
        // Subsets come from the first checkpoint's encoder so every model
        // is probed on the same images.
        if reports.is_none() {
            let cfg = match &a.config {
                Some(_) => analysis_config(a)?,
                None => config.clone(),
            };
            let feats = dataset_features(&data, a.features.as_deref(), &cfg)?;
            reports = Some(subset_reports(&feats, a.k.unwrap_or(cfg.analysis.k))?);
        }
        let reports = reports.as_ref().unwrap();
        let mut sampler = config.sampler.clone();
        if let Some(e) = &a.ema {
            parse_ema(e)?;
            sampler.ema = e.clone();
        }
        let dtype = config.train.precision.dtype();
        let params = ckpt.select(sampler.ema_decay()?)?.to_dtype(dtype)?;
        let backbone = Backbone::new(config.model.clone())?;
        let model = BackboneDenoiser::new(&backbone, &params);
        let results = denoise_probe(&model, &data, reports, t0, &sampler, dtype)?;
        for subset in ["most", "least"] {
            let mut pts = Vec::new();
            let mut imgs = Vec::new();
            for r in results.iter().filter(|r| r.subset == subset) {
                rows.push(vec![
                    path.display().to_string(),
                    r.class_id.to_string(),
                    subset.to_string(),
                    format!("{:.6}", r.diversity),
                ]);
                pts.push((r.class_id as f64, r.diversity));
                imgs.push(r.outputs.clone());
            }
            let cols = reports.first().map_or(1, |r| r.most_k.len());
            let grid = Tensor::cat(&imgs, 0)?;
            write_png_grid(&out.join(format!("probe_{i}_{subset}.png")), &grid, cols)?;
            series.push(pts);
        }
        for subset in ["most", "least"] {
            let v: Vec<f64> = results.iter().filter(|r| r.subset == subset).map(|r| r.diversity).collect();
            println!(
                "{}: mean diversity on {subset}-similar subsets {:.4}",
                path.display(),
                v.iter().sum::<f64>() / v.len() as f64
            );
        }
    }
    let comments = vec![format!(
        "denoise from t0 = {} with fresh seeded noise; diversity = mean pairwise pixel distance within each subset; \
         series order in probe.png: per checkpoint, most then least",
        t0_used.unwrap_or_default()
    )];
    let path = out.join("probe.csv");
    write_csv(&path, &comments, &header, &rows)?;
    plot_series(&out.join("probe.png"), &series)?;
    println!("{}", path.display());
    Ok(0)
}

fn metrics(a: &AnalyzeArgs) -> Result<u8> {
    if a.samples.is_empty() {
        return Err(Error::Usage("analyze metrics needs at least one --samples file".into()));
    }
    let config = analysis_config(a)?;
    let data = Dataset::load_dir(require(&a.data, "data", "metrics")?)?;
    let reference = dataset_features(&data, a.features.as_deref(), &config)?;
    let encoder = SemanticEncoder::new(&config.alignment.encoder, data.image_size(), data.channels())?;
    let out = out_dir(a, "analysis")?;
    let header = ["samples", "count", "frechet", "diversity"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for path in &a.samples {
        let sidecar = path.with_extension("json");
        let images = read_sample_tensor(path, &sidecar)?;
        let meta: pixelrepa::run::SampleSidecar = serde_json::from_str(
            &std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?,
        )?;
        let ids: Vec<String> = (0..meta.classes.len()).map(|i| format!("gen{i:06}")).collect();
        let gen = FeatureSet::encode(&encoder, &images, &ids, &meta.classes)?;
        let frechet = frechet_distance(&gen.pooled, &reference.pooled)?;
        let diversity = diversity_score(&tensor_rows(&images)?)?;
        println!("{}: frechet {frechet:.6}, diversity {diversity:.6}", path.display());
        rows.push(vec![
            path.display().to_string(),
            meta.classes.len().to_string(),
            format!("{frechet:.6}"),
            format!("{diversity:.6}"),
        ]);
    }
    let comments = vec![
        "frechet: Gaussian Frechet distance of pooled encoder features, generated vs. the whole dataset, 1e-6 ridge"
            .to_string(),
        "diversity: mean pairwise pixel distance over all generated images".to_string(),
    ];
    let path = out.join("metrics.csv");
    write_csv(&path, &comments, &header, &rows)?;
    println!("{}", path.display());
    Ok(0)
}

fn ablate(a: &AnalyzeArgs) -> Result<u8> {
    let config = analysis_config(a)?;
    let ratios: Vec<f64> = match &a.ratios {
        Some(r) => parse_list(r, "ratio")?,
        None => config.analysis.ablation_ratios.clone(),
    };
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => parse_list(s, "seed")?,
        None => config.analysis.ablation_seeds.clone(),
    };
    if ratios.is_empty() {
        return Err(Error::Usage("ablate-mask needs at least one ratio".into()));
    }
    let out = out_dir(a, &format!("ablate-mask-{}", &config.hash_hex()?[..8]))?;
    let table = run_mask_ablation(&config, &ratios, &seeds, &out, |r| {
        eprintln!(
            "ratio {} seed {}: l_denoise {:.4} frechet {:.4} diversity {:.4}",
            r.ratio, r.seed, r.final_denoise, r.frechet, r.diversity
        );
    })?;
    let comments = vec![format!(
        "masked-adapter runs, {} steps each, seeds {seeds:?}; values are seed means; frechet uses {} samples per class",
        config.train.steps, config.analysis.samples_per_class
    )];
    let (header, rows) = table.wide();
    let wide = out.join("ablation.csv");
    write_csv(&wide, &comments, &header, &rows)?;
    let (header, rows) = ablation_rows(&table);
    write_csv(&out.join("ablation_runs.csv"), &comments, &header, &rows)?;
    let pts: Vec<(f64, f64)> = ratios.iter().map(|&r| (r, table.mean("frechet", r).unwrap_or(f64::NAN))).collect();
    plot_series(&out.join("ablation_frechet.png"), &[pts])?;
    let text = std::fs::read_to_string(&wide).map_err(|e| Error::io(&wide, e))?;
    print!("{text}");
    println!("{}", wide.display());
    Ok(0)
}

pub fn verify() -> Result<u8> {
    let checks = verify::run_all();
    print!("{}", verify::format_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        println!("{failed} check(s) failed");
        return Ok(EXIT_VERIFY);
    }
    println!("all {} checks passed", checks.len());
    Ok(0)
}

pub fn make_dataset(a: &MakeDatasetArgs) -> Result<u8> {
    let kind = match a.kind {
        Kind::Shapes => DatasetKind::Shapes,
        Kind::Tightmode => DatasetKind::Tightmode,
    };
    let data = Dataset::generate(&DataConfig {
        kind,
        dir: String::new(),
        num_classes: a.num_classes,
        per_class: a.per_class,
        image_size: a.image_size,
        tight_fraction: a.tight_fraction,
        seed: a.seed,
    })?;
    data.write_dir(&a.out)?;
    if a.features {
        let config = match &a.config {
            Some(p) => RunConfig::load(p, &[])?,
            None => RunConfig::default(),
        };
        let encoder = SemanticEncoder::new(&config.alignment.encoder, a.image_size, data.channels())?;
        let index = encoder.write_features(&a.out.join("features"), &data.images, &data.ids, a.shard_size)?;
        println!("{} feature grids ({}x{}x{})", index.samples.len(), index.rows, index.cols, index.feature_dim);
    }
    println!("{} images in {} classes -> {}", data.len(), data.num_classes, a.out.display());
    Ok(0)
}
