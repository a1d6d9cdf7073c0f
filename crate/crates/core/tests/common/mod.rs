//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use probesel::features::{FeatureMatrix, LabelConfig, NUM_FEATURES};
use probesel::predictor::{grad, loss, CnnArch, CnnModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Set to regenerate the frozen regression fixtures.
pub const BLESS_VAR: &str = "PROBESEL_BLESS";

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compares `actual` byte for byte against a frozen fixture.
pub fn check_golden(name: &str, actual: &[u8]) {
    let path = fixture_path(name);
    if std::env::var_os(BLESS_VAR).is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path)
        .unwrap_or_else(|_| panic!("missing fixture {}; rerun with {BLESS_VAR}=1", path.display()));
    assert!(
        expected == actual,
        "{name} differs from the frozen fixture ({} vs {} bytes)",
        expected.len(),
        actual.len()
    );
}

/// Straight double loop over output positions and taps.
pub fn naive_conv(row: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = row.len();
    let t = kernel.len();
    let mut out = vec![0.0; n - t + 1];
    for l in (t - 1)..n {
        let mut acc = 0.0;
        for p in 0..t {
            acc += kernel[p] * row[l - p];
        }
        out[l - (t - 1)] = acc;
    }
    out
}

/// Largest absolute difference between `conv1d_row` and [`naive_conv`] over
/// `cases` random pairs.
pub fn conv_oracle_max_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..=24);
        let t = rng.random_range(1..=n);
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let kernel: Vec<f64> = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fast = probesel::predictor::conv1d_row(&row, &kernel).unwrap();
        let slow = naive_conv(&row, &kernel);
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Count of PSNRs above the threshold, compared with `k` by hand.
pub fn brute_force_label(psnrs: &[f64], cfg: &LabelConfig) -> u8 {
    let mut good = 0;
    for i in 0..psnrs.len() {
        if psnrs[i] > cfg.threshold_db {
            good += 1;
        }
    }
    if good >= cfg.k {
        1
    } else {
        0
    }
}

/// Number of mismatches between `label_window` and [`brute_force_label`] over
/// `cases` random vectors and configurations.
pub fn label_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let window = rng.random_range(1..=15);
        let cfg = LabelConfig {
            window,
            threshold_db: rng.random_range(20.0..50.0),
            k: rng.random_range(0..=window),
        };
        let psnrs: Vec<f64> = (0..window)
            .map(|_| {
                if rng.random_bool(0.1) {
                    cfg.threshold_db
                } else {
                    rng.random_range(15.0..55.0)
                }
            })
            .collect();
        if probesel::features::label_window(&psnrs, &cfg).unwrap() != brute_force_label(&psnrs, &cfg) {
            bad += 1;
        }
    }
    bad
}

pub fn random_matrix(rng: &mut ChaCha8Rng, history_len: usize) -> FeatureMatrix {
    let values = (0..NUM_FEATURES * (history_len + 1))
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    FeatureMatrix::from_values(history_len, values).unwrap()
}

/// Architecture with fewer than 200 parameters.
pub fn small_arch(shared_kernels: bool) -> CnnArch {
    CnnArch {
        history_len: 3,
        num_kernels: 2,
        kernel_len: 2,
        hidden: vec![4, 3],
        shared_kernels,
    }
}

/// Worst relative error `|analytic - numeric| / max(1, |analytic|)` of the
/// central-difference check over every parameter, and the parameter count.
pub fn gradient_check(arch: CnnArch, seed: u64, h: f64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CnnModel::init(arch, &mut rng).unwrap();
    for w in &mut model.params {
        *w += rng.random_range(-0.3..0.3);
    }
    let batch: Vec<(FeatureMatrix, u8)> = (0..6)
        .map(|i| (random_matrix(&mut rng, model.arch.history_len), (i % 2) as u8))
        .collect();
    let (_, analytic) = grad(&model, &batch).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let w = model.params[i];
        model.params[i] = w + h;
        let up = loss(&model, &batch).unwrap();
        model.params[i] = w - h;
        let down = loss(&model, &batch).unwrap();
        model.params[i] = w;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    (worst, model.params.len())
}
