#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::OnceLock;

use pst_evade::corpus::{generate_corpus, ApkModel, Corpus, CorpusSpec};
use pst_evade::detectors::{DetectorModel, Hyperparams, ModelKind};
use pst_evade::features::{ApiClusterMap, FeatureFamily};
use pst_evade::perturbset::{build_perturbation_set, AndroidCatalog, ClusteredSet, DEFAULT_THRESHOLD};

/// A corpus small enough for property tests, with code components shrunk.
pub fn small_spec(per_class: usize, seed: u64) -> CorpusSpec {
    let mut spec = CorpusSpec {
        n_benign: per_class,
        n_malicious: per_class,
        donor_count: 12,
        seed,
        ..CorpusSpec::default()
    };
    for r in [&mut spec.richness.service, &mut spec.richness.receiver, &mut spec.richness.provider] {
        r.mean_functions /= 20.0;
        r.mean_classes /= 20.0;
    }
    spec
}

pub struct World {
    pub corpus: Corpus,
    pub set: ClusteredSet,
    pub linear: DetectorModel,
}

impl World {
    pub fn universe(&self) -> BTreeSet<u32> {
        let apps: Vec<&ApkModel> = self.corpus.all_apps().collect();
        ApiClusterMap::api_ids(&apps)
    }

    /// Test-split malware the linear model detects.
    pub fn true_positives(&self) -> Vec<&ApkModel> {
        use pst_evade::detectors::Oracle;
        self.corpus
            .split()
            .test_malicious
            .iter()
            .filter(|a| self.linear.query(a).unwrap().is_malicious())
            .collect()
    }
}

pub fn small_world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let corpus = generate_corpus(&small_spec(40, 7)).unwrap();
        let set = build_perturbation_set(&AndroidCatalog::default_catalog(), &corpus.donors).unwrap();
        let set = ClusteredSet::new(set, DEFAULT_THRESHOLD).unwrap();
        let apps: Vec<&ApkModel> = corpus.all_apps().collect();
        let universe = ApiClusterMap::api_ids(&apps);
        let linear = DetectorModel::fit(
            ModelKind::Linear,
            FeatureFamily::Binary,
            &corpus.split().train(),
            &universe,
            &Hyperparams::default(),
            3,
        )
        .unwrap();
        World { corpus, set, linear }
    })
}
