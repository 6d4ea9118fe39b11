use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pst_evade::attack::{run_attack, Algorithm, AttackConfig};
use pst_evade::corpus::{generate_corpus, ApkModel, CorpusSpec};
use pst_evade::detectors::{DetectorModel, Hyperparams, ModelKind, Oracle};
use pst_evade::features::{ApiClusterMap, FeatureFamily};
use pst_evade::parallel::{self, ALL_CORES};
use pst_evade::perturbset::{build_perturbation_set, AndroidCatalog, ClusteredSet, DEFAULT_THRESHOLD};

fn attack_batch(c: &mut Criterion) {
    let spec = CorpusSpec {
        n_benign: 60,
        n_malicious: 60,
        seed: 1,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let apps: Vec<&ApkModel> = corpus.all_apps().collect();
    let split = corpus.split();
    let model = DetectorModel::fit(
        ModelKind::Linear,
        FeatureFamily::Binary,
        &split.train(),
        &ApiClusterMap::api_ids(&apps),
        &Hyperparams::default(),
        0,
    )
    .unwrap();
    let set = build_perturbation_set(&AndroidCatalog::default_catalog(), &corpus.donors).unwrap();
    let set = ClusteredSet::new(set, DEFAULT_THRESHOLD).unwrap();
    let targets: Vec<&ApkModel> = split
        .test_malicious
        .iter()
        .filter(|a| model.query(a).unwrap().is_malicious())
        .collect();

    let mut group = c.benchmark_group("attack_batch");
    group.sample_size(10);
    for algorithm in Algorithm::ALL {
        for (label, workers) in [("sequential", 1), ("parallel", ALL_CORES)] {
            group.bench_with_input(BenchmarkId::new(label, algorithm), &workers, |b, &workers| {
                b.iter(|| {
                    parallel::map_indexed(&targets, workers, |i, apk| {
                        let config = AttackConfig {
                            algorithm,
                            budget: 40,
                            seed: i as u64,
                            measure_time: false,
                            ..AttackConfig::default()
                        };
                        run_attack(&model, apk, &set, &config).unwrap().report.queries_used
                    })
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, attack_batch);
criterion_main!(benches);
