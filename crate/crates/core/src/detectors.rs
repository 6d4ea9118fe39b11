//! Trainable detector oracles.
//!
//! Every model answers a query with a [`Feedback`]: a label plus the malicious
//! confidence in `[0, 1]`. Models are immutable after training and safe to
//! query from many threads at once.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ApkModel, GroundTruth};
use crate::error::{Error, Result};
use crate::features::{FeatureFamily, FeaturePipeline, FeatureVector};
use crate::parallel;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub label: GroundTruth,
    /// Malicious confidence.
    pub confidence: f64,
}

impl Feedback {
    pub fn from_confidence(confidence: f64, threshold: f64) -> Self {
        let label = if confidence >= threshold {
            GroundTruth::Malicious
        } else {
            GroundTruth::Benign
        };
        Self { label, confidence }
    }

    pub fn is_malicious(&self) -> bool {
        self.label.is_malicious()
    }
}

/// Anything that labels an application. Implementations must not learn from
/// queries.
pub trait Oracle: Sync {
    fn query(&self, apk: &ApkModel) -> Result<Feedback>;
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn query(&self, apk: &ApkModel) -> Result<Feedback> {
        (**self).query(apk)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
    Knn,
    Forest,
    Ensemble,
}

impl ModelKind {
    pub fn default_features(self) -> FeatureFamily {
        match self {
            ModelKind::Linear | ModelKind::Mlp | ModelKind::Ensemble => FeatureFamily::Binary,
            ModelKind::Knn | ModelKind::Forest => FeatureFamily::Markov,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "linear" => ModelKind::Linear,
            "mlp" => ModelKind::Mlp,
            "knn" => ModelKind::Knn,
            "forest" => ModelKind::Forest,
            "ensemble" => ModelKind::Ensemble,
            other => return Err(format!("unknown model kind `{other}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub hidden: usize,
    pub k: usize,
    pub n_trees: usize,
    pub max_depth: usize,
    pub threshold: f64,
    pub ensemble_members: usize,
    /// Fraction of the training set each ensemble member sees.
    pub member_subsample: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            hidden: 32,
            k: 3,
            n_trees: 32,
            max_depth: 8,
            threshold: 0.5,
            ensemble_members: 20,
            member_subsample: 0.8,
        }
    }
}

impl Hyperparams {
    fn validate(&self, kind: ModelKind) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidHyperparams(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold = {}", self.threshold));
        }
        match kind {
            ModelKind::Knn if self.k == 0 || self.k.is_multiple_of(2) => bad(format!("k = {} must be odd", self.k)),
            ModelKind::Mlp if self.hidden == 0 => bad("hidden = 0".into()),
            ModelKind::Forest if self.n_trees == 0 => bad("n_trees = 0".into()),
            ModelKind::Ensemble if self.ensemble_members == 0 => Err(Error::EmptyEnsemble),
            _ => Ok(()),
        }
    }
}

/// Labelled feature vectors; `labels[i]` is true for malicious.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub vectors: Vec<FeatureVector>,
    pub labels: Vec<bool>,
}

impl Dataset {
    pub fn new(dim: usize, vectors: Vec<FeatureVector>, labels: Vec<bool>) -> Self {
        Self { dim, vectors, labels }
    }

    pub fn from_apps(pipeline: &FeaturePipeline, apps: &[&ApkModel]) -> Result<Self> {
        let vectors = apps.iter().map(|a| pipeline.extract(a)).collect::<Result<Vec<_>>>()?;
        let labels = apps.iter().map(|a| a.ground_truth.is_malicious()).collect();
        Ok(Self::new(pipeline.dim(), vectors, labels))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_two_classes(&self) -> Result<()> {
        let pos = self.labels.iter().filter(|l| **l).count();
        if pos == 0 || pos == self.labels.len() {
            Err(Error::SingleClass)
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Classifier {
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    Mlp {
        /// `dim x hidden`, input-major.
        input_weights: Vec<Vec<f64>>,
        hidden_bias: Vec<f64>,
        output_weights: Vec<f64>,
        output_bias: f64,
    },
    Knn {
        k: usize,
        points: Vec<FeatureVector>,
        labels: Vec<bool>,
    },
    Forest {
        trees: Vec<DecisionTree>,
    },
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Classifier {
    /// Malicious confidence in `[0, 1]`.
    pub fn confidence(&self, x: &FeatureVector) -> f64 {
        match self {
            Classifier::Linear { weights, bias } => logistic(x.dot(weights) + bias),
            Classifier::Mlp {
                input_weights,
                hidden_bias,
                output_weights,
                output_bias,
            } => {
                let hidden = mlp_hidden(input_weights, hidden_bias, x);
                logistic(hidden.iter().zip(output_weights).map(|(a, w)| a * w).sum::<f64>() + output_bias)
            }
            Classifier::Knn { k, points, labels } => {
                let mut d: Vec<(f64, usize)> = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (p.squared_distance(x), i))
                    .collect();
                let k = (*k).min(d.len());
                d.select_nth_unstable_by(k.saturating_sub(1), |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d[..k].sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d[..k].iter().filter(|(_, i)| labels[*i]).count() as f64 / k as f64
            }
            Classifier::Forest { trees } => {
                trees.iter().filter(|t| t.predict(x)).count() as f64 / trees.len() as f64
            }
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Classifier::Linear { weights, bias } => bias.is_finite() && weights.iter().all(|w| w.is_finite()),
            Classifier::Mlp {
                input_weights,
                hidden_bias,
                output_weights,
                output_bias,
            } => {
                output_bias.is_finite()
                    && input_weights.iter().flatten().chain(hidden_bias).chain(output_weights).all(|w| w.is_finite())
            }
            _ => true,
        }
    }
}

fn mlp_hidden(input_weights: &[Vec<f64>], hidden_bias: &[f64], x: &FeatureVector) -> Vec<f64> {
    let mut h = hidden_bias.to_vec();
    for &(i, v) in &x.entries {
        for (acc, w) in h.iter_mut().zip(&input_weights[i]) {
            *acc += v * w;
        }
    }
    h.iter_mut().for_each(|a| *a = a.max(0.0));
    h
}

/// Trains a single (non-ensemble) classifier. Deterministic in `seed`.
pub fn train(kind: ModelKind, data: &Dataset, hp: &Hyperparams, seed: u64) -> Result<Classifier> {
    hp.validate(kind)?;
    data.check_two_classes()?;
    if let Some(v) = data.vectors.iter().find(|v| v.dim != data.dim) {
        return Err(Error::DimensionMismatch {
            expected: data.dim,
            actual: v.dim,
        });
    }
    let model = match kind {
        ModelKind::Linear => train_linear(data, hp),
        ModelKind::Mlp => train_mlp(data, hp, seed),
        ModelKind::Knn => Classifier::Knn {
            k: hp.k,
            points: data.vectors.clone(),
            labels: data.labels.clone(),
        },
        ModelKind::Forest => train_forest(data, hp, seed),
        ModelKind::Ensemble => {
            return Err(Error::InvalidHyperparams(
                "ensembles are trained from applications, see DetectorModel::fit".into(),
            ))
        }
    };
    if !model.is_finite() {
        return Err(Error::InvalidHyperparams("training diverged to non-finite parameters".into()));
    }
    Ok(model)
}

/// Full-batch gradient descent on L2-regularised logistic loss.
fn train_linear(data: &Dataset, hp: &Hyperparams) -> Classifier {
    let n = data.len() as f64;
    let mut w = vec![0.0; data.dim];
    let mut b = 0.0;
    let mut grad = vec![0.0; data.dim];
    for _ in 0..hp.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, &y) in data.vectors.iter().zip(&data.labels) {
            let err = logistic(x.dot(&w) + b) - if y { 1.0 } else { 0.0 };
            for &(i, v) in &x.entries {
                grad[i] += err * v;
            }
            gb += err;
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= hp.learning_rate * (gi / n + hp.l2 * *wi);
        }
        b -= hp.learning_rate * gb / n;
    }
    Classifier::Linear { weights: w, bias: b }
}

/// One hidden ReLU layer, sigmoid output, per-sample SGD.
fn train_mlp(data: &Dataset, hp: &Hyperparams, seed: u64) -> Classifier {
    let mut rng = rng::derived_stream(seed, &["mlp"]);
    let (dim, hidden) = (data.dim, hp.hidden);
    let bound = (6.0 / (dim + hidden) as f64).sqrt();
    let mut w1: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..hidden).map(|_| rng.random_range(-bound..bound)).collect())
        .collect();
    let mut b1 = vec![0.0; hidden];
    let out_bound = (6.0 / (hidden + 1) as f64).sqrt();
    let mut w2: Vec<f64> = (0..hidden).map(|_| rng.random_range(-out_bound..out_bound)).collect();
    let mut b2 = 0.0;
    let lr = hp.learning_rate * 0.1;
    let epochs = (hp.epochs / 10).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &s in &order {
            let x = &data.vectors[s];
            let h = mlp_hidden(&w1, &b1, x);
            let p = logistic(h.iter().zip(&w2).map(|(a, w)| a * w).sum::<f64>() + b2);
            let delta = p - if data.labels[s] { 1.0 } else { 0.0 };
            let dh: Vec<f64> = (0..hidden)
                .map(|j| if h[j] > 0.0 { delta * w2[j] } else { 0.0 })
                .collect();
            for j in 0..hidden {
                w2[j] -= lr * (delta * h[j] + hp.l2 * w2[j]);
                b1[j] -= lr * dh[j];
            }
            b2 -= lr * delta;
            for &(i, v) in &x.entries {
                for (w, d) in w1[i].iter_mut().zip(&dh) {
                    *w -= lr * d * v;
                }
            }
        }
    }
    Classifier::Mlp {
        input_weights: w1,
        hidden_bias: b1,
        output_weights: w2,
        output_bias: b2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { malicious: bool },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Axis-aligned CART tree; `x[feature] <= threshold` goes left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict(&self, x: &FeatureVector) -> bool {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { malicious } => return *malicious,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x.get(*feature) <= *threshold { *left } else { *right },
            }
        }
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct TreeBuilder<'a> {
    dense: &'a [Vec<f64>],
    labels: &'a [bool],
    max_depth: usize,
    features_per_split: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, samples: &[usize], depth: usize, rng: &mut rng::StreamRng) -> usize {
        let pos = samples.iter().filter(|&&s| self.labels[s]).count();
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            malicious: 2 * pos >= samples.len(),
        });
        if depth >= self.max_depth || pos == 0 || pos == samples.len() {
            return id;
        }
        let dim = self.dense[0].len();
        let mut candidates: Vec<usize> = (0..dim).collect();
        candidates.shuffle(rng);
        candidates.truncate(self.features_per_split);
        let parent = gini(pos, samples.len());
        let mut best: Option<(f64, usize, f64)> = None;
        let mut column: Vec<(f64, bool)> = Vec::with_capacity(samples.len());
        for &f in &candidates {
            column.clear();
            column.extend(samples.iter().map(|&s| (self.dense[s][f], self.labels[s])));
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for i in 1..column.len() {
                left_pos += column[i - 1].1 as usize;
                if column[i].0 == column[i - 1].0 {
                    continue;
                }
                let (nl, nr) = (i, column.len() - i);
                let impurity = (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(pos - left_pos, nr))
                    / column.len() as f64;
                if impurity < parent - 1e-12 && best.is_none_or(|b| impurity < b.0) {
                    best = Some((impurity, f, 0.5 * (column[i].0 + column[i - 1].0)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = samples.iter().partition(|&&s| self.dense[s][feature] <= threshold);
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn train_forest(data: &Dataset, hp: &Hyperparams, seed: u64) -> Classifier {
    let dense: Vec<Vec<f64>> = data.vectors.iter().map(FeatureVector::to_dense).collect();
    let features_per_split = ((data.dim as f64).sqrt().ceil() as usize).clamp(1, data.dim.max(1));
    let trees = parallel::map_range(hp.n_trees, parallel::ALL_CORES, |t| {
        let mut rng = rng::derived_stream(seed, &["tree", &t.to_string()]);
        let n = data.len();
        let bootstrap: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut builder = TreeBuilder {
            dense: &dense,
            labels: &data.labels,
            max_depth: hp.max_depth,
            features_per_split,
            nodes: Vec::new(),
        };
        builder.grow(&bootstrap, 0, &mut rng);
        DecisionTree { nodes: builder.nodes }
    });
    Classifier::Forest { trees }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelBody {
    Single {
        pipeline: FeaturePipeline,
        classifier: Classifier,
    },
    Ensemble {
        members: Vec<DetectorModel>,
    },
}

/// A trained detector: feature pipeline plus classifier, or an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub kind: ModelKind,
    pub features: FeatureFamily,
    pub hyperparams: Hyperparams,
    pub threshold: f64,
    pub vocab_hash: String,
    pub body: ModelBody,
}

/// Classifier/feature pairs cycled through when building an ensemble.
const ENSEMBLE_RECIPES: [(ModelKind, FeatureFamily); 8] = [
    (ModelKind::Linear, FeatureFamily::Binary),
    (ModelKind::Forest, FeatureFamily::Markov),
    (ModelKind::Mlp, FeatureFamily::Binary),
    (ModelKind::Knn, FeatureFamily::Markov),
    (ModelKind::Linear, FeatureFamily::ApiCluster),
    (ModelKind::Forest, FeatureFamily::Binary),
    (ModelKind::Linear, FeatureFamily::Markov),
    (ModelKind::Forest, FeatureFamily::ApiCluster),
];

impl DetectorModel {
    /// Fits a pipeline and classifier on `train`. `api_universe` is every api
    /// id that can appear at query time (training, test and donor apps).
    pub fn fit(
        kind: ModelKind,
        features: FeatureFamily,
        train_apps: &[&ApkModel],
        api_universe: &BTreeSet<u32>,
        hp: &Hyperparams,
        seed: u64,
    ) -> Result<Self> {
        hp.validate(kind)?;
        if kind == ModelKind::Ensemble {
            return Self::fit_ensemble(train_apps, api_universe, hp, seed);
        }
        let pipeline = FeaturePipeline::fit(features, train_apps, api_universe, seed)?;
        let data = Dataset::from_apps(&pipeline, train_apps)?;
        let mut hp = hp.clone();
        if features == FeatureFamily::Markov && kind == ModelKind::Linear {
            // transition probabilities are small; a plain step size underfits
            hp.learning_rate *= 10.0;
        }
        let classifier = train(kind, &data, &hp, seed)?;
        Ok(Self {
            kind,
            features,
            threshold: hp.threshold,
            vocab_hash: pipeline.vocab_hash(),
            hyperparams: hp,
            body: ModelBody::Single { pipeline, classifier },
        })
    }

    fn fit_ensemble(train_apps: &[&ApkModel], api_universe: &BTreeSet<u32>, hp: &Hyperparams, seed: u64) -> Result<Self> {
        let members = (0..hp.ensemble_members)
            .map(|i| {
                let (kind, features) = ENSEMBLE_RECIPES[i % ENSEMBLE_RECIPES.len()];
                let member_seed = rng::derive_seed(seed, &["member", &i.to_string()]);
                let mut subset: Vec<&ApkModel> = train_apps.to_vec();
                subset.shuffle(&mut rng::stream(member_seed));
                let keep = ((subset.len() as f64) * hp.member_subsample).ceil() as usize;
                subset.truncate(keep.max(2));
                Self::fit(kind, features, &subset, api_universe, hp, member_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let hashes: Vec<&str> = members.iter().map(|m| m.vocab_hash.as_str()).collect();
        Ok(Self {
            kind: ModelKind::Ensemble,
            features: FeatureFamily::Binary,
            hyperparams: hp.clone(),
            threshold: 0.0,
            vocab_hash: rng::derive_seed(seed, &hashes).to_string(),
            body: ModelBody::Ensemble { members },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn evaluate(&self, apps: &[&ApkModel]) -> Result<TrainingReport> {
        let mut r = TrainingReport::default();
        for a in apps {
            let predicted = self.query(a)?.is_malicious();
            match (a.ground_truth.is_malicious(), predicted) {
                (true, true) => r.true_positives += 1,
                (true, false) => r.false_negatives += 1,
                (false, true) => r.false_positives += 1,
                (false, false) => r.true_negatives += 1,
            }
        }
        r.finish();
        Ok(r)
    }
}

impl Oracle for DetectorModel {
    fn query(&self, apk: &ApkModel) -> Result<Feedback> {
        match &self.body {
            ModelBody::Single { pipeline, classifier } => {
                let x = pipeline.extract(apk)?;
                let c = classifier.confidence(&x).clamp(0.0, 1.0);
                Ok(Feedback::from_confidence(c, self.threshold))
            }
            ModelBody::Ensemble { members } => ensemble_query(members, apk),
        }
    }
}

/// Detection fraction over `members`; malicious as soon as one member fires.
pub fn ensemble_query<O: Oracle>(members: &[O], apk: &ApkModel) -> Result<Feedback> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut detections = 0usize;
    for m in members {
        if m.query(apk)?.is_malicious() {
            detections += 1;
        }
    }
    let confidence = detections as f64 / members.len() as f64;
    let label = if detections > 0 {
        GroundTruth::Malicious
    } else {
        GroundTruth::Benign
    };
    Ok(Feedback { label, confidence })
}

/// Held-out detection quality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub tpr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl TrainingReport {
    fn finish(&mut self) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (tp, fp, tn, fneg) = (self.true_positives, self.false_positives, self.true_negatives, self.false_negatives);
        self.tpr = ratio(tp, tp + fneg);
        self.recall = self.tpr;
        self.precision = ratio(tp, tp + fp);
        self.f1 = if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        };
        self.accuracy = ratio(tp + tn, tp + tn + fp + fneg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let xs = [[2.0, 0.0], [1.5, 0.5], [0.0, 2.0], [0.5, 1.5]];
        Dataset::new(
            2,
            xs.iter().map(|x| FeatureVector::from_dense(x)).collect(),
            vec![true, true, false, false],
        )
    }

    #[test]
    fn linear_separates_toy_set() {
        let data = toy();
        let m = train(ModelKind::Linear, &data, &Hyperparams::default(), 0).unwrap();
        for (x, y) in data.vectors.iter().zip(&data.labels) {
            assert_eq!(m.confidence(x) >= 0.5, *y);
        }
        assert_eq!(m, train(ModelKind::Linear, &data, &Hyperparams::default(), 0).unwrap());
    }

    #[test]
    fn linear_confidence_is_logistic_of_score() {
        let m = Classifier::Linear {
            weights: vec![1.0, -1.0],
            bias: 0.0,
        };
        let c = m.confidence(&FeatureVector::from_dense(&[1.0, 0.0]));
        assert!((c - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(Feedback::from_confidence(c, 0.5).is_malicious());
    }

    #[test]
    fn knn_three_points() {
        // hand 3-NN on a line: m(0), m(1), b(5)
        let data = Dataset::new(
            1,
            [[0.0], [1.0], [5.0]].iter().map(|x| FeatureVector::from_dense(x)).collect(),
            vec![true, true, false],
        );
        let m = train(ModelKind::Knn, &data, &Hyperparams::default(), 0).unwrap();
        for x in &data.vectors {
            assert!((m.confidence(x) - 2.0 / 3.0).abs() < 1e-15);
        }
        let hp = Hyperparams {
            k: 2,
            ..Hyperparams::default()
        };
        assert!(train(ModelKind::Knn, &data, &hp, 0).is_err());
    }

    #[test]
    fn forest_vote_fraction() {
        let leaf = |m| DecisionTree {
            nodes: vec![TreeNode::Leaf { malicious: m }],
        };
        let f = Classifier::Forest {
            trees: vec![leaf(true), leaf(false), leaf(false), leaf(false)],
        };
        let c = f.confidence(&FeatureVector::zeros(1));
        assert_eq!(c, 0.25);
        assert!(!Feedback::from_confidence(c, 0.5).is_malicious());
    }

    #[test]
    fn forest_and_mlp_fit_toy_set_deterministically() {
        let data = toy();
        let hp = Hyperparams::default();
        for kind in [ModelKind::Forest, ModelKind::Mlp] {
            let a = train(kind, &data, &hp, 11).unwrap();
            assert_eq!(a, train(kind, &data, &hp, 11).unwrap());
            let correct = data
                .vectors
                .iter()
                .zip(&data.labels)
                .filter(|(x, y)| (a.confidence(x) >= 0.5) == **y)
                .count();
            assert!(correct >= 3, "{kind:?} got {correct}/4");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let mut data = toy();
        data.labels = vec![true; 4];
        assert!(matches!(
            train(ModelKind::Linear, &data, &Hyperparams::default(), 0),
            Err(Error::SingleClass)
        ));
    }

    struct Fixed(bool);
    impl Oracle for Fixed {
        fn query(&self, _: &ApkModel) -> Result<Feedback> {
            Ok(Feedback::from_confidence(if self.0 { 1.0 } else { 0.0 }, 0.5))
        }
    }

    #[test]
    fn ensemble_counts_detections() {
        let apk = ApkModel::empty("x", GroundTruth::Malicious);
        let members: Vec<Fixed> = (0..20).map(|i| Fixed(i < 13)).collect();
        let f = ensemble_query(&members, &apk).unwrap();
        assert!((f.confidence - 0.65).abs() < 1e-15);
        assert!(f.is_malicious());
        let none: Vec<Fixed> = (0..5).map(|_| Fixed(false)).collect();
        let f = ensemble_query(&none, &apk).unwrap();
        assert_eq!((f.label, f.confidence), (GroundTruth::Benign, 0.0));
        for one in [true, false] {
            let f = ensemble_query(&[Fixed(one)], &apk).unwrap();
            assert_eq!(f.is_malicious(), one);
            assert_eq!(f.confidence, if one { 1.0 } else { 0.0 });
        }
        assert!(matches!(ensemble_query::<Fixed>(&[], &apk), Err(Error::EmptyEnsemble)));
    }
}
