mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pst_evade::attack::{Algorithm, Outcome};
use pst_evade::harness::{
    aggregate, compute_asr, compute_cdf, run_experiment, seed_from_env, CorpusSource, ExperimentConfig,
    MetricsReport, SEED_ENV,
};

use common::small_spec;

fn small_experiment(workers: usize) -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusSource::Spec(small_spec(40, 7)),
        budgets: vec![10, 40],
        sample_count: 8,
        seeds: vec![0, 1],
        master_seed: 9,
        workers,
        measure_time: false,
        ..ExperimentConfig::default()
    }
}

fn small_report() -> &'static MetricsReport {
    static REPORT: std::sync::OnceLock<MetricsReport> = std::sync::OnceLock::new();
    REPORT.get_or_init(|| run_experiment(&small_experiment(1)).unwrap())
}

/// Asymptotic Kolmogorov distribution tail, with the usual small-sample
/// correction on the statistic.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
        sum += sign * (-2.0 * k * k * lambda * lambda).exp();
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[test]
fn bigger_budgets_never_lower_asr() {
    let report = small_report();
    assert!(!report.rows.is_empty());
    for alg in Algorithm::ALL {
        let a10 = report.cell("linear", alg, 10, None).unwrap().asr.unwrap();
        let a40 = report.cell("linear", alg, 40, None).unwrap().asr.unwrap();
        assert!(a40 >= a10, "{alg}: {a10} > {a40}");
    }
    assert_eq!(report.consistency_violations, 0);
}

#[test]
fn cells_are_recomputable_from_rows() {
    let report = small_report();
    let expected: Vec<_> = report
        .cells
        .iter()
        .filter_map(|c| c.seed.map(|s| (c.detector.clone(), c.algorithm, c.budget, s)))
        .collect();
    assert_eq!(aggregate(&report.rows, &expected), report.cells);
    for c in &report.cells {
        let outcomes = report
            .rows
            .iter()
            .filter(|r| r.detector == c.detector && r.algorithm == c.algorithm && r.budget == c.budget)
            .filter(|r| c.seed.is_none_or(|s| s == r.seed))
            .map(|r| r.outcome);
        assert_eq!(compute_asr(outcomes).ok(), c.asr);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let parallel = run_experiment(&small_experiment(4)).unwrap();
    let sequential = small_report();
    assert_eq!(parallel.rows, sequential.rows);
    assert_eq!(parallel.cells, sequential.cells);
}

#[test]
fn outputs_round_trip() {
    let report = small_report();
    let dir = tempfile::tempdir().unwrap();
    report.write_outputs(dir.path()).unwrap();
    assert_eq!(&MetricsReport::load_json(&dir.path().join("report.json")).unwrap(), report);
    let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sample_id,detector,algorithm,budget,seed,outcome,queries_used,wall_ms"
    );
    assert_eq!(lines.count(), report.rows.len());
}

#[test]
fn cdf_of_uniform_draws_passes_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
    let cdf = compute_cdf(&xs).unwrap();
    let mut d: f64 = 0.0;
    let mut prev = 0.0;
    for &(x, f) in &cdf {
        d = d.max((f - x).abs()).max((prev - x).abs());
        prev = f;
    }
    let p = ks_p_value(d, xs.len());
    assert!(p > 0.01, "D = {d}, p = {p}");
    assert!(ks_p_value(0.5, 100) < 1e-6);
}

#[test]
fn seed_comes_from_environment() {
    // the only test in this binary touching the variable
    std::env::remove_var(SEED_ENV);
    assert_eq!(seed_from_env().unwrap(), None);
    std::env::set_var(SEED_ENV, " 42 ");
    assert_eq!(seed_from_env().unwrap(), Some(42));
    let mut cfg = ExperimentConfig::default();
    cfg.apply_env().unwrap();
    assert_eq!(cfg.master_seed, 42);
    std::env::set_var(SEED_ENV, "forty-two");
    assert!(seed_from_env().is_err());
    std::env::remove_var(SEED_ENV);
}

fn outcome() -> impl Strategy<Value = Outcome> {
    prop::sample::select(vec![Outcome::Success, Outcome::Failure, Outcome::NotApplicable])
}

proptest! {
    #[test]
    fn cdf_is_a_step_distribution(xs in prop::collection::vec(0.0f64..100.0, 1..200)) {
        let cdf = compute_cdf(&xs).unwrap();
        prop_assert!(cdf.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        prop_assert_eq!(cdf.last().unwrap().1, 1.0);
        for &(x, f) in &cdf {
            let below = xs.iter().filter(|&&v| v <= x).count();
            prop_assert!((f - below as f64 / xs.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn asr_ignores_not_applicable(outcomes in prop::collection::vec(outcome(), 0..60)) {
        let s = outcomes.iter().filter(|o| **o == Outcome::Success).count();
        let f = outcomes.iter().filter(|o| **o == Outcome::Failure).count();
        match compute_asr(outcomes.iter().copied()) {
            Ok(asr) => prop_assert!((asr - s as f64 / (s + f) as f64).abs() < 1e-12),
            Err(_) => prop_assert_eq!(s + f, 0),
        }
    }
}
