//! Feature extractors for the detector families: binary string features,
//! API-cluster occurrence and family-level Markov transition probabilities.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ApkModel;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    BinaryString,
    MarkovFamily,
    ApiCluster,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct FeatureVocab {
    kind: VocabKind,
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    kind: VocabKind,
    keys: Vec<String>,
}

impl From<VocabRepr> for FeatureVocab {
    fn from(r: VocabRepr) -> Self {
        FeatureVocab::from_keys(r.kind, r.keys)
    }
}

impl From<FeatureVocab> for VocabRepr {
    fn from(v: FeatureVocab) -> Self {
        VocabRepr {
            kind: v.kind,
            keys: v.keys,
        }
    }
}

impl FeatureVocab {
    /// Builds a vocabulary from already-unique keys; index = position.
    pub fn from_keys(kind: VocabKind, keys: Vec<String>) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Self { kind, keys, index }
    }

    /// Dense `F x F` transition vocabulary, row-major.
    pub fn markov(families: usize) -> Self {
        let keys = (0..families)
            .flat_map(|a| (0..families).map(move |b| format!("markov:{a}->{b}")))
            .collect();
        Self::from_keys(VocabKind::MarkovFamily, keys)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Hex SHA-256 over the ordered keys; stored in model files.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.kind).as_bytes());
        for k in &self.keys {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Sparse real vector; entries are sorted by index and never hold zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn from_map(dim: usize, map: BTreeMap<usize, f64>) -> Self {
        Self {
            dim,
            entries: map.into_iter().filter(|(_, v)| *v != 0.0).collect(),
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.entries
            .binary_search_by_key(&i, |(k, _)| *k)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    pub fn squared_distance(&self, other: &FeatureVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut acc = 0.0;
        loop {
            match (a.peek(), b.peek()) {
                (Some(&&(i, x)), Some(&&(j, y))) => {
                    if i == j {
                        acc += (x - y) * (x - y);
                        a.next();
                        b.next();
                    } else if i < j {
                        acc += x * x;
                        a.next();
                    } else {
                        acc += y * y;
                        b.next();
                    }
                }
                (Some(&&(_, x)), None) => {
                    acc += x * x;
                    a.next();
                }
                (None, Some(&&(_, y))) => {
                    acc += y * y;
                    b.next();
                }
                (None, None) => return acc,
            }
        }
    }
}

/// Total map from api id to cluster id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiClusterMap {
    pub clusters: BTreeMap<u32, u32>,
}

impl ApiClusterMap {
    pub fn identity(apis: impl IntoIterator<Item = u32>) -> Self {
        Self {
            clusters: apis.into_iter().map(|a| (a, a)).collect(),
        }
    }

    /// Random balanced partition of `apis` into `n_clusters` clusters.
    pub fn random_balanced(apis: impl IntoIterator<Item = u32>, n_clusters: usize, seed: u64) -> Self {
        let mut ids: Vec<u32> = apis.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        ids.shuffle(&mut rng::derived_stream(seed, &["api-clusters"]));
        let n = n_clusters.max(1);
        Self {
            clusters: ids.into_iter().enumerate().map(|(i, a)| (a, (i % n) as u32)).collect(),
        }
    }

    pub fn cluster_of(&self, api: u32) -> Result<u32> {
        self.clusters.get(&api).copied().ok_or(Error::UnmappedApi(api))
    }

    pub fn api_ids(apps: &[&ApkModel]) -> BTreeSet<u32> {
        apps.iter()
            .flat_map(|a| a.code.components.iter().flat_map(|c| c.api_calls.iter().map(|x| x.api_id)))
            .collect()
    }
}

/// Manifest-derived string keys of an application.
pub fn manifest_keys(apk: &ApkModel) -> BTreeSet<String> {
    let m = &apk.manifest;
    let mut keys: BTreeSet<String> = m.uses_features.iter().map(|f| format!("feature:{f}")).collect();
    keys.extend(m.permissions.iter().map(|p| format!("perm:{}", p.name)));
    for c in &m.declared_components {
        keys.insert(format!("{}:{}", c.kind.as_str(), c.name));
        keys.extend(c.intent_actions.iter().map(|a| format!("action:{a}")));
        keys.extend(c.intent_categories.iter().map(|a| format!("category:{a}")));
    }
    keys
}

/// Manifest keys plus one `api:<id>` key per called api.
pub fn binary_keys(apk: &ApkModel) -> BTreeSet<String> {
    let mut keys = manifest_keys(apk);
    keys.extend(
        apk.code
            .components
            .iter()
            .flat_map(|c| c.api_calls.iter().map(|a| format!("api:{}", a.api_id))),
    );
    keys
}

fn cluster_keys(apk: &ApkModel, map: &ApiClusterMap) -> Result<BTreeSet<String>> {
    let mut keys = manifest_keys(apk);
    for call in apk.code.components.iter().flat_map(|c| &c.api_calls) {
        keys.insert(format!("cluster:{}", map.cluster_of(call.api_id)?));
    }
    Ok(keys)
}

fn max_family(apps: &[&ApkModel]) -> usize {
    apps.iter()
        .flat_map(|a| a.code.components.iter().flat_map(|c| c.functions.iter().map(|f| f.family as usize + 1)))
        .max()
        .unwrap_or(1)
}

/// Union of observed keys, sorted lexicographically. Markov vocabularies are
/// sized by the largest family id observed; api-cluster vocabularies need a map.
pub fn build_vocab(apps: &[&ApkModel], kind: VocabKind, map: Option<&ApiClusterMap>) -> Result<FeatureVocab> {
    if apps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let keys: BTreeSet<String> = match kind {
        VocabKind::BinaryString => apps.iter().flat_map(|a| binary_keys(a)).collect(),
        VocabKind::MarkovFamily => return Ok(FeatureVocab::markov(max_family(apps))),
        VocabKind::ApiCluster => {
            let map = map.ok_or_else(|| Error::InvalidHyperparams("api-cluster vocabulary needs a cluster map".into()))?;
            let mut all = BTreeSet::new();
            for a in apps {
                all.extend(cluster_keys(a, map)?);
            }
            all
        }
    };
    Ok(FeatureVocab::from_keys(kind, keys.into_iter().collect()))
}

fn indicator(keys: BTreeSet<String>, vocab: &FeatureVocab) -> FeatureVector {
    let mut idx: Vec<usize> = keys.iter().filter_map(|k| vocab.index_of(k)).collect();
    idx.sort_unstable();
    FeatureVector {
        dim: vocab.len(),
        entries: idx.into_iter().map(|i| (i, 1.0)).collect(),
    }
}

/// Coordinate `i` is 1 iff vocabulary key `i` occurs in `apk`.
pub fn extract_binary(apk: &ApkModel, vocab: &FeatureVocab) -> FeatureVector {
    indicator(binary_keys(apk), vocab)
}

/// Like [`extract_binary`] but api occurrences are replaced by the occurrence
/// of their cluster.
pub fn extract_api_cluster(apk: &ApkModel, vocab: &FeatureVocab, map: &ApiClusterMap) -> Result<FeatureVector> {
    Ok(indicator(cluster_keys(apk, map)?, vocab))
}

/// Row-normalised `F x F` family transition matrix, flattened row-major.
/// Rows with no outgoing edges stay zero; functions with a family id `>= F`
/// are ignored.
pub fn extract_markov(apk: &ApkModel, families: usize) -> FeatureVector {
    let family: HashMap<u32, usize> = apk
        .code
        .components
        .iter()
        .flat_map(|c| c.functions.iter().map(|f| (f.id, f.family as usize)))
        .collect();
    let mut counts = vec![0u64; families * families];
    let mut row_totals = vec![0u64; families];
    for (a, b) in &apk.code.edges {
        if let (Some(&fa), Some(&fb)) = (family.get(a), family.get(b)) {
            if fa < families && fb < families {
                counts[fa * families + fb] += 1;
                row_totals[fa] += 1;
            }
        }
    }
    let entries = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(i, c)| (i, *c as f64 / row_totals[i / families] as f64))
        .collect();
    FeatureVector {
        dim: families * families,
        entries,
    }
}

/// How a detector turns an application into a feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeaturePipeline {
    Binary { vocab: FeatureVocab },
    ApiCluster { vocab: FeatureVocab, map: ApiClusterMap },
    Markov { families: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFamily {
    Binary,
    ApiCluster,
    Markov,
}

impl std::str::FromStr for FeatureFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "binary" => Ok(FeatureFamily::Binary),
            "api-cluster" | "api_cluster" => Ok(FeatureFamily::ApiCluster),
            "markov" => Ok(FeatureFamily::Markov),
            other => Err(format!("unknown feature family `{other}`")),
        }
    }
}

/// Default number of api clusters for api-cluster pipelines.
pub const DEFAULT_API_CLUSTERS: usize = 60;

impl FeaturePipeline {
    /// Fits the pipeline on `train`. `api_universe` must cover every api that
    /// may later be queried (the cluster map is total over it).
    pub fn fit(family: FeatureFamily, train: &[&ApkModel], api_universe: &BTreeSet<u32>, seed: u64) -> Result<Self> {
        Ok(match family {
            FeatureFamily::Binary => FeaturePipeline::Binary {
                vocab: build_vocab(train, VocabKind::BinaryString, None)?,
            },
            FeatureFamily::ApiCluster => {
                let map = ApiClusterMap::random_balanced(api_universe.iter().copied(), DEFAULT_API_CLUSTERS, seed);
                let vocab = build_vocab(train, VocabKind::ApiCluster, Some(&map))?;
                FeaturePipeline::ApiCluster { vocab, map }
            }
            FeatureFamily::Markov => {
                if train.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
                FeaturePipeline::Markov {
                    families: max_family(train),
                }
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            FeaturePipeline::Binary { vocab } | FeaturePipeline::ApiCluster { vocab, .. } => vocab.len(),
            FeaturePipeline::Markov { families } => families * families,
        }
    }

    pub fn extract(&self, apk: &ApkModel) -> Result<FeatureVector> {
        match self {
            FeaturePipeline::Binary { vocab } => Ok(extract_binary(apk, vocab)),
            FeaturePipeline::ApiCluster { vocab, map } => extract_api_cluster(apk, vocab, map),
            FeaturePipeline::Markov { families } => Ok(extract_markov(apk, *families)),
        }
    }

    pub fn vocab_hash(&self) -> String {
        match self {
            FeaturePipeline::Binary { vocab } | FeaturePipeline::ApiCluster { vocab, .. } => vocab.hash(),
            FeaturePipeline::Markov { families } => FeatureVocab::markov(*families).hash(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ApiCall, CodeComponent, ComponentKind, FunctionNode, GroundTruth, Origin, Permission, ProtectionLevel};

    fn with_perms(id: &str, perms: &[&str]) -> ApkModel {
        let mut a = ApkModel::empty(id, GroundTruth::Benign);
        a.manifest.permissions = perms
            .iter()
            .map(|p| Permission {
                name: p.to_string(),
                protection_level: ProtectionLevel::Normal,
            })
            .collect();
        a
    }

    fn with_graph(families: &[u16], edges: &[(u32, u32)], apis: &[u32]) -> ApkModel {
        let mut a = ApkModel::empty("g", GroundTruth::Malicious);
        a.code.components.push(CodeComponent {
            kind: ComponentKind::Activity,
            name: "main".into(),
            classes: 1,
            functions: families
                .iter()
                .enumerate()
                .map(|(i, f)| FunctionNode { id: i as u32, family: *f })
                .collect(),
            api_calls: apis
                .iter()
                .map(|&api_id| ApiCall {
                    api_id,
                    family_id: 0,
                    package_id: 0,
                })
                .collect(),
            origin: Origin::Original,
        });
        a.code.edges = edges.to_vec();
        a
    }

    #[test]
    fn vocab_is_sorted_union() {
        let a = with_perms("a", &["P", "Q"]);
        let b = with_perms("b", &["P"]);
        let v = build_vocab(&[&a, &b], VocabKind::BinaryString, None).unwrap();
        assert_eq!(v.keys().iter().filter(|k| *k == "perm:P").count(), 1);
        let mut sorted = v.keys().to_vec();
        sorted.sort();
        assert_eq!(sorted, v.keys());
        let again = build_vocab(&[&a, &b], VocabKind::BinaryString, None).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn disjoint_samples_sum_their_key_counts() {
        let a = with_perms("a", &["P", "Q"]);
        let b = with_perms("b", &["R", "S", "T"]);
        let v = build_vocab(&[&a, &b], VocabKind::BinaryString, None).unwrap();
        assert_eq!(v.len(), binary_keys(&a).len() + binary_keys(&b).len());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(build_vocab(&[], VocabKind::BinaryString, None), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn binary_extraction() {
        let a = with_perms("a", &["P"]);
        let v = build_vocab(&[&with_perms("t", &["P", "Q"])], VocabKind::BinaryString, None).unwrap();
        let empty = ApkModel::empty("e", GroundTruth::Benign);
        assert_eq!(extract_binary(&empty, &v).nnz(), 0);
        let x = extract_binary(&a, &v);
        assert_eq!(x.to_dense(), vec![1.0, 0.0]);
        // unseen key ignored
        let c = with_perms("c", &["P", "UNSEEN"]);
        assert_eq!(extract_binary(&c, &v), x);
    }

    #[test]
    fn markov_examples() {
        let one = with_graph(&[0, 0], &[(0, 1)], &[]);
        assert_eq!(extract_markov(&one, 2).to_dense(), vec![1.0, 0.0, 0.0, 0.0]);
        let empty = ApkModel::empty("e", GroundTruth::Benign);
        assert_eq!(extract_markov(&empty, 2).to_dense(), vec![0.0; 4]);
        // 3 edges 0->1 and 1 edge 0->0
        let g = with_graph(&[0, 1, 1, 1, 0], &[(0, 1), (0, 2), (4, 3), (0, 4)], &[]);
        let m = extract_markov(&g, 2).to_dense();
        assert_eq!(&m[..2], &[0.25, 0.75]);
        assert_eq!(&m[2..], &[0.0, 0.0]);
    }

    #[test]
    fn api_cluster_extraction() {
        let x = with_graph(&[0], &[], &[1]);
        let y = with_graph(&[0], &[], &[2]);
        let both = [&x, &y];
        // identity map matches binary restricted to api features
        let id = ApiClusterMap::identity([1, 2]);
        let cv = build_vocab(&both, VocabKind::ApiCluster, Some(&id)).unwrap();
        let bv = build_vocab(&both, VocabKind::BinaryString, None).unwrap();
        let api_only = |v: &FeatureVector, vocab: &FeatureVocab, prefix: &str| -> Vec<String> {
            v.entries
                .iter()
                .map(|(i, _)| vocab.keys()[*i].clone())
                .filter(|k| k.starts_with(prefix))
                .map(|k| k.split(':').nth(1).unwrap().to_string())
                .collect()
        };
        let c = extract_api_cluster(&x, &cv, &id).unwrap();
        assert_eq!(api_only(&c, &cv, "cluster:"), api_only(&extract_binary(&x, &bv), &bv, "api:"));
        // one cluster holding both apis: either sample gives the same vector
        let merged = ApiClusterMap {
            clusters: [(1, 0), (2, 0)].into_iter().collect(),
        };
        let mv = build_vocab(&both, VocabKind::ApiCluster, Some(&merged)).unwrap();
        let vx = extract_api_cluster(&x, &mv, &merged).unwrap();
        assert_eq!(vx, extract_api_cluster(&y, &mv, &merged).unwrap());
        assert_eq!(vx.nnz(), 1);
        // api missing from the map
        let z = with_graph(&[0], &[], &[9]);
        assert!(matches!(extract_api_cluster(&z, &mv, &merged), Err(Error::UnmappedApi(9))));
    }

    #[test]
    fn squared_distance_matches_dense() {
        let a = FeatureVector::from_dense(&[1.0, 0.0, 2.0, 0.0]);
        let b = FeatureVector::from_dense(&[0.0, 3.0, 1.0, 0.0]);
        assert_eq!(a.squared_distance(&b), 1.0 + 9.0 + 1.0);
        assert_eq!(a.get(2), 2.0);
        assert_eq!(a.get(1), 0.0);
    }

    #[test]
    fn balanced_partition() {
        let m = ApiClusterMap::random_balanced(0..100, 10, 3);
        let mut counts = BTreeMap::new();
        for c in m.clusters.values() {
            *counts.entry(*c).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&n| n == 10));
        assert_eq!(m, ApiClusterMap::random_balanced(0..100, 10, 3));
    }
}
