use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
image_size = 8
patch_size = 4
depth = 2
hidden_dim = 8
heads = 2
mlp_ratio = 2
num_classes = 3
in_context_tokens = 2
in_context_start_block = 2
alignment_depth = 1
time_embed_dim = 8

[train]
batch_size = 6
steps = 4
ema_decays = [0.9]

[alignment]
variant = "mta"
mlp_hidden = 8

[alignment.encoder]
kind = "lossy-pool"
grid = 2
feature_dim = 4

[sampler]
steps = 4
ema = "0.9"

[data]
num_classes = 3
per_class = 4
image_size = 8

[analysis]
k = 2
samples_per_class = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pixelrepa"))
}

fn run(args: &[&str], root: &Path) -> Output {
    bin().args(args).env("PIXELREPA_RUN_ROOT", root).output().expect("spawn pixelrepa")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn make_dataset(dir: &Path, kind: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(kind);
    let mut args = vec!["make-dataset", kind, "--out", s(&out), "--num-classes", "3", "--per-class", "4", "--image-size", "8"];
    args.extend_from_slice(extra);
    ok(&run(&args, dir));
    out
}

fn train(dir: &Path, run_dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let stdout = ok(&run(&["train", "--config", s(&cfg), "--run-dir", s(run_dir), "--log-every", "0"], dir));
    PathBuf::from(stdout.lines().last().unwrap().trim())
}

#[test]
fn make_dataset_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = make_dataset(tmp.path(), "shapes", &[]);
    let labels: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels["samples"].as_array().unwrap().len(), 12);
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 12);
    assert!(!a.join("modes.json").exists());

    let b = tmp.path().join("again");
    ok(&run(
        &["make-dataset", "shapes", "--out", s(&b), "--num-classes", "3", "--per-class", "4", "--image-size", "8"],
        tmp.path(),
    ));
    assert_eq!(std::fs::read(a.join("labels.json")).unwrap(), std::fs::read(b.join("labels.json")).unwrap());
    for e in std::fs::read_dir(a.join("images")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            std::fs::read(a.join("images").join(&name)).unwrap(),
            std::fs::read(b.join("images").join(&name)).unwrap()
        );
    }
}

#[test]
fn tightmode_writes_manifest_and_features() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = make_dataset(tmp.path(), "tightmode", &["--features", "--config", s(&cfg), "--shard-size", "5"]);
    let modes: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("modes.json")).unwrap()).unwrap();
    for c in ["0", "1", "2"] {
        assert_eq!(modes["tight"][c].as_array().unwrap().len(), 2);
        assert_eq!(modes["off"][c].as_array().unwrap().len(), 2);
    }
    assert!(d.join("features").is_dir());

    // Shards store f32; tight-mode members differ by less than that, so
    // near-tied ranks may swap. Each selected id must score the same in
    // both runs.
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let base = ["analyze", "centroids", "--data", s(&d), "--config", s(&cfg)];
    ok(&run(&[&base[..], &["--out", s(&a)]].concat(), tmp.path()));
    ok(&run(&[&base[..], &["--out", s(&b), "--features", s(&d.join("features"))]].concat(), tmp.path()));
    let table = |dir: &Path| -> Vec<Vec<String>> {
        std::fs::read_to_string(dir.join("subsets.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(',').map(String::from).collect())
            .collect()
    };
    let (ta, tb) = (table(&a), table(&b));
    assert_eq!(ta.len(), 12);
    let sim_b: std::collections::HashMap<(String, String), f64> =
        tb.iter().map(|r| ((r[0].clone(), r[3].clone()), r[4].parse().unwrap())).collect();
    for (ra, rb) in ta.iter().zip(&tb) {
        assert_eq!(ra[..3], rb[..3]);
        let sa: f64 = ra[4].parse().unwrap();
        let other = sim_b[&(ra[0].clone(), ra[3].clone())];
        let here: f64 = rb[4].parse().unwrap();
        assert!((sa - other).abs() < 1e-6 && (sa - here).abs() < 1e-6, "{ra:?} vs {rb:?}");
    }
}

#[test]
fn dry_run_prints_canonical_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = ok(&run(&["train", "--config", s(&cfg), "--dry-run", "--set", "train.lr=0.01"], tmp.path()));
    assert!(out.contains("lr = 0.01"), "{out}");
    assert!(out.contains("variant = \"mta\""));
    assert!(out.lines().last().unwrap().starts_with("# config hash "));
    assert!(std::fs::read_dir(tmp.path()).unwrap().count() == 1, "dry run must not create a run directory");

    let bad = run(&["train", "--config", s(&cfg), "--dry-run", "--set", "train.nonsense=1"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    let missing = run(&["train", "--config", s(&cfg), "--dry-run", "--set", "train.lr"], tmp.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn train_and_sample_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ck_a = train(tmp.path(), &tmp.path().join("run_a"));
    let ck_b = train(tmp.path(), &tmp.path().join("run_b"));
    assert!(ck_a.ends_with("checkpoints/step_00000004.ckpt"), "{}", ck_a.display());
    assert_eq!(
        std::fs::read(tmp.path().join("run_a/metrics.jsonl")).unwrap(),
        std::fs::read(tmp.path().join("run_b/metrics.jsonl")).unwrap()
    );
    assert_eq!(std::fs::read(&ck_a).unwrap(), std::fs::read(&ck_b).unwrap());

    let sample = |ck: &Path| {
        let out = ok(&run(&["sample", "--checkpoint", s(ck), "--seed", "7", "--w", "2", "--name", "x"], tmp.path()));
        out.lines().map(PathBuf::from).collect::<Vec<_>>()
    };
    let a = sample(&ck_a);
    let b = sample(&ck_b);
    assert_eq!(a.len(), 3);
    assert_eq!(a[0], tmp.path().join("run_a/samples/x.png"));
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap(), "{}", pa.display());
    }
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(&a[2]).unwrap()).unwrap();
    assert_eq!(side["seed"], 7);
    assert_eq!(side["classes"], serde_json::json!([0, 1, 2]));

    // Scoring the samples twice gives identical reports.
    let data = make_dataset(tmp.path(), "shapes", &[]);
    let cfg = tmp.path().join("tiny.toml");
    let m1 = tmp.path().join("m1");
    let m2 = tmp.path().join("m2");
    for m in [&m1, &m2] {
        ok(&run(
            &["analyze", "metrics", "--data", s(&data), "--config", s(&cfg), "--samples", s(&a[1]), "--out", s(m)],
            tmp.path(),
        ));
    }
    let text = std::fs::read_to_string(m1.join("metrics.csv")).unwrap();
    assert_eq!(text, std::fs::read_to_string(m2.join("metrics.csv")).unwrap());
    assert!(text.lines().any(|l| l.starts_with("samples,count,frechet,diversity")), "{text}");

    // Probe the checkpoint on its own training distribution.
    let p = tmp.path().join("probe");
    let out = ok(&run(
        &["analyze", "denoise-probe", "--data", s(&data), "--checkpoint", s(&ck_a), "--out", s(&p)],
        tmp.path(),
    ));
    assert!(out.contains("most-similar subsets"), "{out}");
    assert!(p.join("probe.csv").exists() && p.join("probe.png").exists());
    assert!(p.join("probe_0_most.png").exists());

    let bad = run(&["sample", "--checkpoint", s(&ck_a), "--classes", "9"], tmp.path());
    assert_ne!(bad.status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["sample", "--checkpoint", s(&tmp.path().join("nope.ckpt"))], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}

#[test]
fn unknown_arguments_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["analyze", "nonsense"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["make-dataset", "cifar", "--out", "x"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["analyze", "centroids"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn centroids_reports_every_class() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = make_dataset(tmp.path(), "shapes", &[]);
    let out = ok(&run(&["analyze", "centroids", "--data", s(&d), "--config", s(&cfg), "--k", "3"], tmp.path()));
    assert_eq!(out.lines().filter(|l| l.starts_with("class")).count(), 3, "{out}");
    let csv = std::fs::read_to_string(tmp.path().join("analysis/subsets.csv")).unwrap();
    assert!(csv.starts_with("# "));
    let too_big = run(&["analyze", "centroids", "--data", s(&d), "--config", s(&cfg), "--k", "5"], tmp.path());
    assert_eq!(too_big.status.code(), Some(2));
}

#[test]
fn ablate_mask_emits_one_column_per_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    ok(&run(
        &["analyze", "ablate-mask", "--config", s(&cfg), "--set", "train.steps=2", "--out", s(&out_dir)],
        tmp.path(),
    ));
    let text = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, ["metric", "r=0.1", "r=0.2", "r=0.3", "r=0.4", "r=0.5"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.len(), 6);
        for v in &r[1..] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{r:?}");
        }
    }
    assert!(out_dir.join("ablation_runs.csv").exists());
    assert!(out_dir.join("ablation_frechet.png").exists());
}

#[test]
fn verify_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&run(&["verify"], tmp.path()));
    assert!(out.contains("all 10 checks passed"), "{out}");
}
