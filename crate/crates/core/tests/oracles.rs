mod common;

use common::*;

const INSTANCES: u64 = 100;

#[test]
fn centroids_match_double_loop() {
    let e = centroid_error(INSTANCES);
    assert!(e < 1e-12, "{e}");
}

#[test]
fn subsets_match_full_sort() {
    assert_eq!(subset_mismatches(INSTANCES), 0);
}

#[test]
fn frechet_2x2_matches_closed_form() {
    let e = frechet_2x2_error(INSTANCES);
    assert!(e < 1e-8, "{e}");
}

#[test]
fn frechet_diagonal_matches_closed_form() {
    let e = frechet_diagonal_error(INSTANCES);
    assert!(e < 1e-9, "{e}");
}

#[test]
fn diversity_matches_ordered_pair_average() {
    let e = diversity_error(INSTANCES);
    assert!(e < 1e-12, "{e}");
}
