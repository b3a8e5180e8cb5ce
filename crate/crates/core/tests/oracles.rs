//! Library routines checked against independent brute-force oracles.

mod common;

use common::oracles;

#[test]
fn complex_score_matches_complex_arithmetic() {
    oracles::complex_score(1000).unwrap();
}

#[test]
fn rank_metrics_match_linear_scan() {
    oracles::rank_metrics_scan(1000).unwrap();
}

#[test]
fn wide_beam_matches_path_enumeration() {
    oracles::wide_beam(200).unwrap();
}
