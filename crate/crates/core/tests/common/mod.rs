//! Brute-force counterparts of the analysis routines.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixelrepa::analysis::{class_centroid, diversity_score, frechet_gaussian, select_subsets, FeatureSet};


pub fn random_set(rng: &mut ChaCha8Rng) -> FeatureSet {
    let classes = rng.random_range(1..4u32);
    let per = rng.random_range(3..12usize);
    let d = rng.random_range(2..7usize);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut vecs = Vec::new();
    for c in 0..classes {
        let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..per {
            ids.push(format!("c{c}_{i:03}"));
            labels.push(c);
            // Coarse grid values produce exact ties now and then.
            vecs.push(bias.iter().map(|b| b + (rng.random_range(-4..=4) as f64) * 0.25).collect::<Vec<f64>>());
        }
    }
    for v in &mut vecs {
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
    }
    FeatureSet::from_vectors(ids, labels, vecs).unwrap()
}

/// Mean by a running double loop, then normalize.
pub fn centroid_oracle(f: &FeatureSet, class: u32) -> Vec<f64> {
    let d = f.dim();
    let mut acc = vec![0.0; d];
    let mut n = 0.0;
    for i in 0..f.len() {
        if f.labels[i] == class {
            for j in 0..d {
                acc[j] += f.pooled[i][j];
            }
            n += 1.0;
        }
    }
    let norm = acc.iter().map(|a| (a / n) * (a / n)).sum::<f64>().sqrt();
    acc.iter().map(|a| a / n / norm).collect()
}

/// Rank by a full lexicographic sort on (−similarity, id) and (similarity, id).
pub fn subsets_oracle(f: &FeatureSet, class: u32, centroid: &[f64], k: usize) -> (Vec<String>, Vec<String>) {
    let cn = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, String)> = (0..f.len())
        .filter(|&i| f.labels[i] == class)
        .map(|i| (f.pooled[i].iter().zip(centroid).map(|(a, b)| a * b).sum::<f64>() / cn, f.ids[i].clone()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let most = scored.iter().take(k).map(|s| s.1.clone()).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let least = scored.iter().take(k).map(|s| s.1.clone()).collect();
    (most, least)
}

/// Max deviation of `class_centroid` from the double loop.
pub fn centroid_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_set(&mut rng);
        for c in f.classes() {
            let Ok(got) = class_centroid(&f, c) else { continue };
            let want = centroid_oracle(&f, c);
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    worst
}

/// Instances where `select_subsets` disagrees with the full sort.
pub fn subset_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let f = random_set(&mut rng);
        for c in f.classes() {
            let Ok(centroid) = class_centroid(&f, c) else { continue };
            let n = f.members(c).len();
            let k = rng.random_range(1..=n);
            let r = select_subsets(&f, c, &centroid, k).unwrap();
            let (most, least) = subsets_oracle(&f, c, &centroid, k);
            bad += usize::from(r.most_k != most || r.least_k != least);
        }
    }
    bad
}

fn random_spd2(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
    &a * a.transpose() + DMatrix::identity(2, 2) * 0.05
}

/// Max deviation of `frechet_gaussian` from the 2×2 closed form.
pub fn frechet_2x2_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    // For a 2×2 matrix with non-negative eigenvalues,
    // tr √M = √(tr M + 2√det M).
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (ca, cb) = (random_spd2(&mut rng), random_spd2(&mut rng));
        let ma = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let mb = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let m = &ca * &cb;
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let tr_sqrt = (m.trace() + 2.0 * det.sqrt()).sqrt();
        let want = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
        let got = frechet_gaussian(&ma, &ca, &mb, &cb).unwrap();
        worst = worst.max((got - want).abs());
    }
    worst
}

/// Max deviation of `frechet_gaussian` from the diagonal closed form.
pub fn frechet_diagonal_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let d = rng.random_range(1..6usize);
        let va: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..4.0)).collect();
        let vb: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..4.0)).collect();
        let ma = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mb = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let want = (&ma - &mb).norm_squared()
            + va.iter().zip(&vb).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
        let got = frechet_gaussian(
            &ma,
            &DMatrix::from_diagonal(&DVector::from_vec(va)),
            &mb,
            &DMatrix::from_diagonal(&DVector::from_vec(vb)),
        )
        .unwrap();
        worst = worst.max((got - want).abs());
    }
    worst
}

/// Max deviation of `diversity_score` from the ordered-pair average.
pub fn diversity_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let n = rng.random_range(2..10usize);
        let d = rng.random_range(1..8usize);
        let r: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += r[i].iter().zip(&r[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                }
            }
        }
        let want = total / (n * (n - 1)) as f64;
        let got = diversity_score(&r).unwrap();
        worst = worst.max((got - want).abs());
    }
    worst
}
