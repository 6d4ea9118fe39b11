//! Query-budgeted attack loops: tree-guided search, a Thompson-sampling
//! bandit baseline and uniform random perturbation.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::{apply_in_place, ApkModel};
use crate::detectors::{Feedback, Oracle};
use crate::error::{Error, Result};
use crate::perturbset::{ClusteredSet, Perturbation};
use crate::pstree::{PsTree, TreeConfig};
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "advdroidzero")]
    AdvDroidZero,
    Mab,
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::AdvDroidZero, Algorithm::Mab, Algorithm::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::AdvDroidZero => "advdroidzero",
            Algorithm::Mab => "mab",
            Algorithm::Random => "random",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MabConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MabConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub budget: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub tree: TreeConfig,
    pub mab: MabConfig,
    /// Charge the initial classification query to the budget.
    pub count_initial_query: bool,
    /// Record wall time; off gives reproducible reports.
    pub measure_time: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: 40,
            algorithm: Algorithm::AdvDroidZero,
            seed: 0,
            tree: TreeConfig::default(),
            mab: MabConfig::default(),
            count_initial_query: false,
            measure_time: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.budget == 0 {
            bad.push("budget must be at least 1".to_string());
        }
        if !(self.mab.alpha > 0.0 && self.mab.beta > 0.0) {
            bad.push(format!("mab prior ({}, {}) must be positive", self.mab.alpha, self.mab.beta));
        }
        if !(self.tree.epsilon >= 0.0 && self.tree.penalty_constant >= 0.0) {
            bad.push("tree epsilon and penalty_constant must be non-negative".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    NotApplicable,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
            Outcome::NotApplicable => "not_applicable",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    BudgetExhausted,
    TreeDepleted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub sample_id: String,
    pub algorithm: Algorithm,
    pub budget: usize,
    pub outcome: Outcome,
    pub failure_reason: Option<FailureReason>,
    pub queries_used: usize,
    pub wall_ms: f64,
    /// Perturbation ids present in the final sample, in application order.
    pub applied: Vec<usize>,
    /// Initial confidence followed by one entry per counted query.
    pub confidence_trace: Vec<f64>,
}

impl AttackReport {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn initial_confidence(&self) -> f64 {
        self.confidence_trace[0]
    }

    pub fn final_confidence(&self) -> f64 {
        *self.confidence_trace.last().expect("trace holds the initial query")
    }

    /// Lowest confidence reached at any query.
    pub fn min_confidence(&self) -> f64 {
        self.confidence_trace.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// A report together with the final working sample.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub report: AttackReport,
    pub adversarial: ApkModel,
}

/// Shared bookkeeping for the three loops.
struct Run<'a, O: Oracle + ?Sized> {
    oracle: &'a O,
    config: &'a AttackConfig,
    started: Instant,
    queries: usize,
    trace: Vec<f64>,
    applied: Vec<usize>,
    current: ApkModel,
    y: f64,
}

enum Start<'a, O: Oracle + ?Sized> {
    Attack(Run<'a, O>),
    Done(AttackResult),
}

impl<'a, O: Oracle + ?Sized> Run<'a, O> {
    fn start(oracle: &'a O, apk: &ApkModel, config: &'a AttackConfig) -> Result<Start<'a, O>> {
        config.validate()?;
        let started = Instant::now();
        let initial = oracle.query(apk)?;
        let mut run = Run {
            oracle,
            config,
            started,
            queries: usize::from(config.count_initial_query),
            trace: vec![initial.confidence],
            applied: Vec::new(),
            current: apk.clone(),
            y: initial.confidence,
        };
        if !initial.is_malicious() {
            run.queries = 0;
            return Ok(Start::Done(run.finish(Outcome::NotApplicable, None)));
        }
        Ok(Start::Attack(run))
    }

    fn budget_left(&self) -> bool {
        self.queries < self.config.budget
    }

    fn query(&mut self, candidate: &ApkModel) -> Result<Feedback> {
        let fb = self.oracle.query(candidate)?;
        self.queries += 1;
        self.trace.push(fb.confidence);
        Ok(fb)
    }

    fn query_current(&mut self) -> Result<Feedback> {
        let fb = self.oracle.query(&self.current)?;
        self.queries += 1;
        self.trace.push(fb.confidence);
        Ok(fb)
    }

    fn finish(self, outcome: Outcome, reason: Option<FailureReason>) -> AttackResult {
        let wall_ms = if self.config.measure_time {
            self.started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        AttackResult {
            report: AttackReport {
                sample_id: self.current.id.clone(),
                algorithm: self.config.algorithm,
                budget: self.config.budget,
                outcome,
                failure_reason: reason,
                queries_used: self.queries,
                wall_ms,
                applied: self.applied,
                confidence_trace: self.trace,
            },
            adversarial: self.current,
        }
    }
}

fn apply_all(apk: &ApkModel, members: &[usize], set: &ClusteredSet, rng: &mut StreamRng) -> Result<ApkModel> {
    let mut out = apk.clone();
    for &m in members {
        apply_in_place(&mut out, lookup(set, m)?, rng);
    }
    Ok(out)
}

fn lookup(set: &ClusteredSet, id: usize) -> Result<&Perturbation> {
    set.set.get(id).ok_or(Error::UnknownNode(id))
}

fn attack_rng(config: &AttackConfig) -> StreamRng {
    rng::derived_stream(config.seed, &["attack", config.algorithm.as_str()])
}

/// Dispatches on `config.algorithm`.
pub fn run_attack<O: Oracle + ?Sized>(
    oracle: &O,
    apk: &ApkModel,
    set: &ClusteredSet,
    config: &AttackConfig,
) -> Result<AttackResult> {
    match config.algorithm {
        Algorithm::AdvDroidZero => advdroidzero_attack(oracle, apk, set, config),
        Algorithm::Mab => mab_attack(oracle, apk, set, config),
        Algorithm::Random => random_attack(oracle, apk, set, config),
    }
}

/// Tree-guided attack: sample a leaf, apply its whole group, query, update
/// the tree from the confidence change, keep the sample unless it got worse.
pub fn advdroidzero_attack<O: Oracle + ?Sized>(
    oracle: &O,
    apk: &ApkModel,
    set: &ClusteredSet,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut run = match Run::start(oracle, apk, config)? {
        Start::Done(r) => return Ok(r),
        Start::Attack(run) => run,
    };
    let mut tree = PsTree::build(&set.groups, &config.tree)?;
    let mut rng = attack_rng(config);
    while run.budget_left() {
        if tree.is_empty() {
            return Ok(run.finish(Outcome::Failure, Some(FailureReason::TreeDepleted)));
        }
        let path = tree.sample_path(&mut rng)?;
        let candidate = apply_all(&run.current, &path.group.members, set, &mut rng)?;
        let fb = run.query(&candidate)?;
        if !fb.is_malicious() {
            run.current = candidate;
            run.applied.extend(&path.group.members);
            return Ok(run.finish(Outcome::Success, None));
        }
        tree.adjust(path.leaf(), run.y, fb.confidence)?;
        if fb.confidence <= run.y {
            run.current = candidate;
            run.applied.extend(&path.group.members);
            run.y = fb.confidence;
        }
    }
    Ok(run.finish(Outcome::Failure, Some(FailureReason::BudgetExhausted)))
}

/// Thompson draw: index of the arm with the largest Beta sample; ties go to
/// the lowest index.
pub fn thompson_select<R: Rng + ?Sized>(rng: &mut R, arms: &[(f64, f64)]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &(a, b)) in arms.iter().enumerate() {
        let beta = Beta::new(a, b).map_err(|e| Error::InvalidConfig(format!("beta({a}, {b}): {e}")))?;
        let x = beta.sample(rng);
        if x > best.1 {
            best = (i, x);
        }
    }
    Ok(best.0)
}

/// Bandit baseline over the second-layer subtrees. Each pull applies one
/// perturbation drawn uniformly (with replacement) from the arm.
pub fn mab_attack<O: Oracle + ?Sized>(
    oracle: &O,
    apk: &ApkModel,
    set: &ClusteredSet,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut run = match Run::start(oracle, apk, config)? {
        Start::Done(r) => return Ok(r),
        Start::Attack(run) => run,
    };
    let tree = PsTree::build(&set.groups, &config.tree)?;
    let arms: Vec<Vec<usize>> = tree
        .second_layer()
        .into_iter()
        .map(|arm| {
            tree.descendant_leaves(arm)
                .into_iter()
                .flat_map(|l| tree.nodes[l].group.as_ref().map_or(&[][..], |g| &g.members[..]).to_vec())
                .collect()
        })
        .collect();
    let mut posterior = vec![(config.mab.alpha, config.mab.beta); arms.len()];
    let mut rng = attack_rng(config);
    let eps = config.tree.epsilon;
    while run.budget_left() {
        let arm = thompson_select(&mut rng, &posterior)?;
        let pick = arms[arm][rng.random_range(0..arms[arm].len())];
        let candidate = apply_all(&run.current, &[pick], set, &mut rng)?;
        let fb = run.query(&candidate)?;
        if !fb.is_malicious() {
            run.current = candidate;
            run.applied.push(pick);
            return Ok(run.finish(Outcome::Success, None));
        }
        if fb.confidence < run.y - eps {
            posterior[arm].0 += 1.0;
        } else {
            posterior[arm].1 += 1.0;
        }
        if fb.confidence <= run.y {
            run.current = candidate;
            run.applied.push(pick);
            run.y = fb.confidence;
        }
    }
    Ok(run.finish(Outcome::Failure, Some(FailureReason::BudgetExhausted)))
}

/// Uniform draws from the flat set, accumulated on the sample without revert.
pub fn random_attack<O: Oracle + ?Sized>(
    oracle: &O,
    apk: &ApkModel,
    set: &ClusteredSet,
    config: &AttackConfig,
) -> Result<AttackResult> {
    if set.set.is_empty() {
        return Err(Error::EmptyPerturbationSet);
    }
    let mut run = match Run::start(oracle, apk, config)? {
        Start::Done(r) => return Ok(r),
        Start::Attack(run) => run,
    };
    let mut rng = attack_rng(config);
    while run.budget_left() {
        let pick = rng.random_range(0..set.set.len());
        apply_in_place(&mut run.current, lookup(set, pick)?, &mut rng);
        run.applied.push(pick);
        let fb = run.query_current()?;
        run.y = fb.confidence;
        if !fb.is_malicious() {
            return Ok(run.finish(Outcome::Success, None));
        }
    }
    Ok(run.finish(Outcome::Failure, Some(FailureReason::BudgetExhausted)))
}
