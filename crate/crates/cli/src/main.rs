use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use pst_evade::attack::{run_attack, Algorithm, AttackConfig, AttackReport};
use pst_evade::corpus::{generate_corpus, ApkModel, Corpus, CorpusSpec};
use pst_evade::detectors::{DetectorModel, Hyperparams, ModelKind};
use pst_evade::features::{ApiClusterMap, FeatureFamily};
use pst_evade::harness::{self, compute_asr, ExperimentConfig, MetricsReport};
use pst_evade::perturbset::{build_perturbation_set, AndroidCatalog, ClusteredSet, DEFAULT_THRESHOLD};
use pst_evade::pstree::{PsTree, TreeConfig};
use pst_evade::rng;

#[derive(Parser)]
#[command(name = "pst-evade", version, about = "Query-budgeted evasion attacks on synthetic Android detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, env = harness::SEED_ENV)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on the corpus training split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kind: ModelKind,
        #[arg(long)]
        features: Option<FeatureFamily>,
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = harness::SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
    /// Build and cluster the perturbation set.
    BuildPset {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack true positives from the test split with a trained model.
    Attack {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "advdroidzero")]
        algorithm: Algorithm,
        #[arg(long, default_value_t = 40)]
        budget: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, env = harness::SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Clustered set from `build-pset`; built from the default catalog otherwise.
        #[arg(long)]
        pset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the initial selection tree as JSON.
        #[arg(long)]
        dump_tree: Option<PathBuf>,
    },
    /// Run a full experiment grid.
    Bench {
        /// Experiment config; the default benchmark when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's worker count (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the ASR grids of two reports.
    Compare {
        #[arg(long, num_args = 2, required = true)]
        reports: Vec<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn gen_corpus(spec: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: CorpusSpec = match spec {
        Some(p) => read_json(&p)?,
        None => CorpusSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let corpus = generate_corpus(&spec)?;
    corpus.save(out)?;
    println!(
        "{} benign, {} malicious, {} donors -> {}",
        corpus.benign.len(),
        corpus.malicious.len(),
        corpus.donors.len(),
        out.display()
    );
    Ok(())
}

fn train(
    corpus: &Path,
    kind: ModelKind,
    features: Option<FeatureFamily>,
    hyperparams: Option<PathBuf>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let hp: Hyperparams = match hyperparams {
        Some(p) => read_json(&p)?,
        None => Hyperparams::default(),
    };
    let split = corpus.split();
    let apps: Vec<&ApkModel> = corpus.all_apps().collect();
    let universe = ApiClusterMap::api_ids(&apps);
    let features = features.unwrap_or(kind.default_features());
    let model = DetectorModel::fit(kind, features, &split.train(), &universe, &hp, seed)?;
    let report = model.evaluate(&split.test())?;
    model.save(out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn clustered_set(catalog: Option<&Path>, corpus: &Corpus, threshold: f64) -> Result<ClusteredSet> {
    let catalog = match catalog {
        Some(p) => AndroidCatalog::load(p)?,
        None => AndroidCatalog::default_catalog(),
    };
    let set = build_perturbation_set(&catalog, &corpus.donors)?;
    Ok(ClusteredSet::new(set, threshold)?)
}

#[derive(Serialize)]
struct AttackSummary {
    algorithm: Algorithm,
    budget: usize,
    seed: u64,
    asr: Option<f64>,
    reports: Vec<AttackReport>,
}

#[allow(clippy::too_many_arguments)]
fn attack(
    corpus: &Path,
    model: &Path,
    algorithm: Algorithm,
    budget: usize,
    samples: usize,
    seed: u64,
    pset: Option<PathBuf>,
    out: &Path,
    dump_tree: Option<PathBuf>,
) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let model = DetectorModel::load(model).with_context(|| format!("loading model {}", model.display()))?;
    let set = match pset {
        Some(p) => read_json(&p)?,
        None => clustered_set(None, &corpus, DEFAULT_THRESHOLD)?,
    };
    if let Some(path) = dump_tree {
        std::fs::write(&path, PsTree::build(&set.groups, &TreeConfig::default())?.to_json()?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let split = corpus.split();
    let pick_seed = rng::derive_seed(seed, &["samples"]);
    let (picked, _) = harness::sample_true_positives(&model, split.test_malicious, samples, pick_seed)?;
    if picked.is_empty() {
        bail!("the model detects none of the test malware");
    }
    let mut reports = Vec::new();
    for apk in picked {
        let config = AttackConfig {
            budget,
            algorithm,
            seed: rng::derive_seed(seed, &[&apk.id]),
            ..AttackConfig::default()
        };
        reports.push(run_attack(&model, apk, &set, &config)?.report);
    }
    let asr = compute_asr(reports.iter().map(|r| r.outcome)).ok();
    let summary = AttackSummary {
        algorithm,
        budget,
        seed,
        asr,
        reports,
    };
    write_json(out, &summary)?;
    println!(
        "{algorithm} N={budget}: ASR {} over {} samples",
        asr.map_or("-".into(), |a| format!("{:.1}%", 100.0 * a)),
        summary.reports.len()
    );
    Ok(())
}

fn bench(config: Option<PathBuf>, out_dir: PathBuf, workers: Option<usize>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(&p).with_context(|| format!("loading config {}", p.display()))?,
        None => harness::default_benchmark(),
    };
    cfg.apply_env()?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.output_dir = Some(out_dir.clone());
    let report = harness::run_experiment(&cfg)?;
    print!("{}", report.format_grid());
    for s in &report.shortfalls {
        eprintln!(
            "warning: {} seed {} found {} true positives after screening {}",
            s.detector, s.seed, s.found, s.screened
        );
    }
    if report.consistency_violations > 0 {
        eprintln!("warning: {} consistency violations", report.consistency_violations);
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn compare(reports: &[PathBuf]) -> Result<()> {
    let a = MetricsReport::load_json(&reports[0])?;
    let b = MetricsReport::load_json(&reports[1])?;
    print!("{}", harness::compare_reports(&a, &b));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus { spec, seed, out } => gen_corpus(spec, seed, &out),
        Command::Train {
            corpus,
            kind,
            features,
            hyperparams,
            out,
            seed,
        } => train(&corpus, kind, features, hyperparams, &out, seed),
        Command::BuildPset {
            catalog,
            corpus,
            threshold,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let set = clustered_set(catalog.as_deref(), &corpus, threshold)?;
            write_json(&out, &set)?;
            println!("{} perturbations in {} groups", set.set.len(), set.groups.len());
            Ok(())
        }
        Command::Attack {
            corpus,
            model,
            algorithm,
            budget,
            samples,
            seed,
            pset,
            out,
            dump_tree,
        } => attack(&corpus, &model, algorithm, budget, samples, seed, pset, &out, dump_tree),
        Command::Bench {
            config,
            out_dir,
            workers,
        } => bench(config, out_dir, workers),
        Command::Compare { reports } => compare(&reports),
    }
}
