//! Experiment orchestration: corpus, detectors, true-positive sampling,
//! attacks across the algorithm x budget x seed grid, and aggregation.

pub mod metrics;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, Algorithm, AttackConfig, MabConfig};
use crate::corpus::{generate_corpus_with, is_consistent_perturbation, ApkModel, Corpus, CorpusSpec};
use crate::detectors::{DetectorModel, Hyperparams, ModelKind, Oracle, TrainingReport};
use crate::error::{Error, Result};
use crate::features::{ApiClusterMap, FeatureFamily};
use crate::parallel;
use crate::perturbset::{build_perturbation_set, AndroidCatalog, ClusteredSet, DEFAULT_THRESHOLD};
use crate::pstree::TreeConfig;
use crate::rng;

pub use metrics::{aggregate, compute_asr, compute_cdf, Cell, CsvRow, ResultRow};

/// Environment variable overriding the master seed.
pub const SEED_ENV: &str = "PST_EVADE_SEED";

/// Cap on candidates screened per requested true positive.
pub const OVERSAMPLING_CAP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Path(PathBuf),
    Spec(CorpusSpec),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Spec(CorpusSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub name: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub features: Option<FeatureFamily>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    /// Load a trained model instead of training one.
    #[serde(default)]
    pub model: Option<PathBuf>,
}

impl DetectorSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            name: format!("{kind:?}").to_lowercase(),
            kind,
            features: None,
            hyperparams: Hyperparams::default(),
            model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub catalog: Option<PathBuf>,
    pub cluster_threshold: f64,
    pub detectors: Vec<DetectorSpec>,
    pub algorithms: Vec<Algorithm>,
    pub budgets: Vec<usize>,
    /// True positives attacked per seed.
    pub sample_count: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    /// 0 uses every core.
    pub workers: usize,
    pub measure_time: bool,
    pub tree: TreeConfig,
    pub mab: MabConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::default(),
            catalog: None,
            cluster_threshold: DEFAULT_THRESHOLD,
            detectors: vec![DetectorSpec::new(ModelKind::Linear)],
            algorithms: Algorithm::ALL.to_vec(),
            budgets: vec![10, 20, 30, 40],
            sample_count: 100,
            seeds: (0..5).collect(),
            master_seed: 0,
            workers: parallel::ALL_CORES,
            measure_time: true,
            tree: TreeConfig::default(),
            mab: MabConfig::default(),
            output_dir: None,
        }
    }
}

/// Linear detector, all three algorithms, budgets {10, 20, 30, 40}, 100 true
/// positives, five seeds.
pub fn default_benchmark() -> ExperimentConfig {
    ExperimentConfig::default()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            bad.push("budgets must be non-empty and positive".to_string());
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            bad.push("budgets must be strictly increasing".to_string());
        }
        if self.seeds.is_empty() {
            bad.push("at least one seed is required".to_string());
        }
        if self.detectors.is_empty() {
            bad.push("at least one detector is required".to_string());
        }
        let names: BTreeSet<&str> = self.detectors.iter().map(|d| d.name.as_str()).collect();
        if names.len() != self.detectors.len() {
            bad.push("detector names must be unique".to_string());
        }
        if self.algorithms.is_empty() {
            bad.push("at least one algorithm is required".to_string());
        }
        if self.sample_count == 0 {
            bad.push("sample_count must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }

    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let CorpusSource::Path(p) = &mut cfg.corpus {
            resolve(p);
        }
        cfg.catalog.iter_mut().for_each(resolve);
        cfg.output_dir.iter_mut().for_each(resolve);
        for d in &mut cfg.detectors {
            d.model.iter_mut().for_each(resolve);
        }
        Ok(cfg)
    }

    /// Applies the seed environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.master_seed = seed;
        }
        Ok(())
    }

    fn expected_cells(&self) -> Vec<(String, Algorithm, usize, u64)> {
        let mut out = Vec::new();
        for d in &self.detectors {
            for &a in &self.algorithms {
                for &b in &self.budgets {
                    for &s in &self.seeds {
                        out.push((d.name.clone(), a, b, s));
                    }
                }
            }
        }
        out
    }
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v} is not a u64"))),
        Err(_) => Ok(None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub name: String,
    pub kind: ModelKind,
    pub vocab_hash: String,
    pub evaluation: TrainingReport,
}

/// Seeds with fewer true positives than requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub detector: String,
    pub seed: u64,
    pub found: usize,
    pub screened: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub detectors: Vec<DetectorSummary>,
    pub perturbation_count: usize,
    pub group_count: usize,
    pub cells: Vec<Cell>,
    pub rows: Vec<ResultRow>,
    pub shortfalls: Vec<Shortfall>,
    /// Successful attacks whose final sample failed the consistency check.
    pub consistency_violations: usize,
}

impl MetricsReport {
    pub fn cell(&self, detector: &str, algorithm: Algorithm, budget: usize, seed: Option<u64>) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.detector == detector && c.algorithm == algorithm && c.budget == budget && c.seed == seed)
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.rows.iter().map(CsvRow::from).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.csv_rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes `report.json` and `rows.csv` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save_json(&dir.join("report.json"))?;
        self.write_csv(&dir.join("rows.csv"))
    }

    /// Pooled ASR (percent) per detector and algorithm, one column per budget.
    pub fn format_grid(&self) -> String {
        let budgets = &self.config.budgets;
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:<14}", "detector", "algorithm");
        for b in budgets {
            let _ = write!(out, " {:>7}", format!("N={b}"));
        }
        out.push('\n');
        for d in &self.config.detectors {
            for &a in &self.config.algorithms {
                let _ = write!(out, "{:<12} {:<14}", d.name, a.as_str());
                for &b in budgets {
                    let v = self.cell(&d.name, a, b, None).and_then(|c| c.asr);
                    let _ = match v {
                        Some(v) => write!(out, " {:>6.1}%", 100.0 * v),
                        None => write!(out, " {:>7}", "-"),
                    };
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Side-by-side grids of two reports plus the per-cell ASR difference.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> String {
    let mut out = format!("A\n{}\nB\n{}\nB - A (points)\n", a.format_grid(), b.format_grid());
    let pooled_a = a.cells.iter().filter(|c| c.seed.is_none());
    for ca in pooled_a {
        if let Some(cb) = b.cell(&ca.detector, ca.algorithm, ca.budget, None) {
            if let (Some(x), Some(y)) = (ca.asr, cb.asr) {
                let _ = writeln!(
                    out,
                    "{:<12} {:<14} N={:<4} {:+.1}",
                    ca.detector,
                    ca.algorithm.as_str(),
                    ca.budget,
                    100.0 * (y - x)
                );
            }
        }
    }
    out
}

fn load_corpus(source: &CorpusSource, catalog: &AndroidCatalog, workers: usize) -> Result<Corpus> {
    let corpus = match source {
        CorpusSource::Path(p) => Corpus::load(p)?,
        CorpusSource::Spec(spec) => generate_corpus_with(spec, catalog, workers)?,
    };
    if corpus.benign.is_empty() || corpus.malicious.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok(corpus)
}

/// Trains (or loads) the detector described by `spec` on the training split.
pub fn prepare_detector(spec: &DetectorSpec, corpus: &Corpus, master_seed: u64) -> Result<DetectorModel> {
    if let Some(path) = &spec.model {
        return DetectorModel::load(path);
    }
    let split = corpus.split();
    let apps: Vec<&ApkModel> = corpus.all_apps().collect();
    let universe = ApiClusterMap::api_ids(&apps);
    let features = spec.features.unwrap_or(spec.kind.default_features());
    let seed = rng::derive_seed(master_seed, &["detector", &spec.name]);
    DetectorModel::fit(spec.kind, features, &split.train(), &universe, &spec.hyperparams, seed)
}

/// Up to `count` test-split malware that `oracle` labels malicious, screened
/// in a seed-dependent order and capped at `OVERSAMPLING_CAP * count`
/// candidates.
pub fn sample_true_positives<'a, O: Oracle + ?Sized>(
    oracle: &O,
    candidates: &'a [ApkModel],
    count: usize,
    seed: u64,
) -> Result<(Vec<&'a ApkModel>, usize)> {
    let mut order: Vec<&ApkModel> = candidates.iter().collect();
    order.shuffle(&mut rng::stream(seed));
    let mut picked = Vec::new();
    let mut screened = 0;
    for apk in order.into_iter().take(OVERSAMPLING_CAP * count) {
        if picked.len() == count {
            break;
        }
        screened += 1;
        if oracle.query(apk)?.is_malicious() {
            picked.push(apk);
        }
    }
    Ok((picked, screened))
}

struct Job<'a> {
    detector: usize,
    seed: u64,
    sample: &'a ApkModel,
    algorithm: Algorithm,
    budget: usize,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let catalog = match &config.catalog {
        Some(p) => AndroidCatalog::load(p)?,
        None => AndroidCatalog::default_catalog(),
    };
    let corpus = load_corpus(&config.corpus, &catalog, config.workers)?;
    let set = build_perturbation_set(&catalog, &corpus.donors)?;
    let clustered = ClusteredSet::new(set, config.cluster_threshold)?;
    let models = config
        .detectors
        .iter()
        .map(|d| prepare_detector(d, &corpus, config.master_seed))
        .collect::<Result<Vec<_>>>()?;

    let split = corpus.split();
    let mut summaries = Vec::new();
    for (spec, model) in config.detectors.iter().zip(&models) {
        summaries.push(DetectorSummary {
            name: spec.name.clone(),
            kind: model.kind,
            vocab_hash: model.vocab_hash.clone(),
            evaluation: model.evaluate(&split.test())?,
        });
    }

    let mut jobs = Vec::new();
    let mut shortfalls = Vec::new();
    for (di, spec) in config.detectors.iter().enumerate() {
        for &seed in &config.seeds {
            let pick_seed = rng::derive_seed(config.master_seed, &["samples", &spec.name, &seed.to_string()]);
            let (picked, screened) =
                sample_true_positives(&models[di], split.test_malicious, config.sample_count, pick_seed)?;
            if picked.len() < config.sample_count {
                shortfalls.push(Shortfall {
                    detector: spec.name.clone(),
                    seed,
                    found: picked.len(),
                    screened,
                });
            }
            for sample in picked {
                for &algorithm in &config.algorithms {
                    for &budget in &config.budgets {
                        jobs.push(Job {
                            detector: di,
                            seed,
                            sample,
                            algorithm,
                            budget,
                        });
                    }
                }
            }
        }
    }

    let rows = parallel::map_indexed(&jobs, config.workers, |_, job| {
        let name = &config.detectors[job.detector].name;
        let attack = AttackConfig {
            budget: job.budget,
            algorithm: job.algorithm,
            seed: rng::derive_seed(config.master_seed, &[name, &job.seed.to_string(), &job.sample.id]),
            tree: config.tree.clone(),
            mab: config.mab.clone(),
            count_initial_query: false,
            measure_time: config.measure_time,
        };
        let result = run_attack(&models[job.detector], job.sample, &clustered, &attack)?;
        let r = &result.report;
        Ok(ResultRow {
            sample_id: job.sample.id.clone(),
            detector: name.clone(),
            algorithm: job.algorithm,
            budget: job.budget,
            seed: job.seed,
            outcome: r.outcome,
            queries_used: r.queries_used,
            wall_ms: r.wall_ms,
            initial_confidence: r.initial_confidence(),
            min_confidence: r.min_confidence(),
            consistent: is_consistent_perturbation(job.sample, &result.adversarial),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let cells = aggregate(&rows, &config.expected_cells());
    let consistency_violations = rows.iter().filter(|r| r.outcome.is_success() && !r.consistent).count();
    let report = MetricsReport {
        config: config.clone(),
        detectors: summaries,
        perturbation_count: clustered.set.len(),
        group_count: clustered.groups.len(),
        cells,
        rows,
        shortfalls,
        consistency_violations,
    };
    if let Some(dir) = &config.output_dir {
        report.write_outputs(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_lists_problems() {
        let cfg = ExperimentConfig {
            budgets: vec![20, 10],
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        let Err(Error::InvalidConfig(msg)) = cfg.validate() else {
            panic!("expected invalid config");
        };
        assert!(msg.contains("increasing") && msg.contains("seed"));
        assert!(default_benchmark().validate().is_ok());
    }

    #[test]
    fn config_round_trips() {
        let cfg = default_benchmark();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"budgets":[5],"seeds":[3]}"#).unwrap();
        assert_eq!(partial.sample_count, 100);
        assert_eq!(partial.budgets, vec![5]);
    }
}
