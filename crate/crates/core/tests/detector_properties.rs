mod common;

use proptest::prelude::*;

use pst_evade::corpus::{generate_corpus, ApkModel, CorpusSpec};
use pst_evade::detectors::{DetectorModel, Hyperparams, ModelKind, Oracle};
use pst_evade::features::{ApiClusterMap, FeatureFamily, FeaturePipeline};

use common::small_world;

const KINDS: [ModelKind; 4] = [ModelKind::Linear, ModelKind::Mlp, ModelKind::Knn, ModelKind::Forest];

fn small_hp() -> Hyperparams {
    Hyperparams {
        n_trees: 8,
        ensemble_members: 4,
        ..Hyperparams::default()
    }
}

fn fit(kind: ModelKind, features: FeatureFamily, seed: u64) -> DetectorModel {
    let world = small_world();
    DetectorModel::fit(kind, features, &world.corpus.split().train(), &world.universe(), &small_hp(), seed).unwrap()
}

#[test]
fn every_kind_is_deterministic_and_round_trips() {
    let world = small_world();
    let test = world.corpus.split().test();
    let dir = tempfile::tempdir().unwrap();
    for kind in KINDS.into_iter().chain([ModelKind::Ensemble]) {
        let a = fit(kind, kind.default_features(), 11);
        let b = fit(kind, kind.default_features(), 11);
        assert_eq!(a, b, "{kind:?}");
        let path = dir.path().join(format!("{kind:?}.json"));
        a.save(&path).unwrap();
        let back = DetectorModel::load(&path).unwrap();
        for apk in &test {
            assert_eq!(a.query(apk).unwrap(), back.query(apk).unwrap(), "{kind:?}");
        }
    }
}

#[test]
fn all_feature_families_train() {
    for kind in KINDS {
        for features in [FeatureFamily::Binary, FeatureFamily::ApiCluster, FeatureFamily::Markov] {
            let model = fit(kind, features, 2);
            let report = model.evaluate(&small_world().corpus.split().test()).unwrap();
            assert!(report.accuracy > 0.5, "{kind:?}/{features:?}: {report:?}");
        }
    }
}

#[test]
fn linear_detects_default_corpus() {
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
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
    let report = model.evaluate(&split.test()).unwrap();
    assert!(report.tpr >= 0.8, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feedback_is_consistent(app in any::<prop::sample::Index>(), kind in prop::sample::select(KINDS.to_vec())) {
        let world = small_world();
        let apps: Vec<&ApkModel> = world.corpus.all_apps().collect();
        let apk = apps[app.index(apps.len())];
        let model = if kind == ModelKind::Linear { world.linear.clone() } else { fit(kind, kind.default_features(), 5) };
        let fb = model.query(apk).unwrap();
        prop_assert!((0.0..=1.0).contains(&fb.confidence));
        prop_assert_eq!(fb.is_malicious(), fb.confidence >= model.threshold);
        // queries never mutate the model
        prop_assert_eq!(model.query(apk).unwrap(), fb);
    }

    #[test]
    fn feature_vectors_are_well_formed(app in any::<prop::sample::Index>()) {
        let world = small_world();
        let train = world.corpus.split().train();
        let apps: Vec<&ApkModel> = world.corpus.all_apps().collect();
        let apk = apps[app.index(apps.len())];

        let binary = FeaturePipeline::fit(FeatureFamily::Binary, &train, &world.universe(), 0).unwrap();
        let v = binary.extract(apk).unwrap().to_dense();
        prop_assert_eq!(v.len(), binary.dim());
        prop_assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));

        let markov = FeaturePipeline::fit(FeatureFamily::Markov, &train, &world.universe(), 0).unwrap();
        let v = markov.extract(apk).unwrap().to_dense();
        let f = (markov.dim() as f64).sqrt() as usize;
        prop_assert_eq!(f * f, v.len());
        for row in v.chunks(f) {
            let s: f64 = row.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9, "row sum {}", s);
        }
    }
}
