//! Perturbation selection tree.
//!
//! Nodes live in an arena and are never reused; deleting a node only unlinks
//! it from its parent. Each internal node keeps an ordered list of
//! `(child, probability)` pairs that sums to one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbset::{PerturbationGroup, Subtree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLabel {
    Root,
    Manifest,
    Code,
    UsesFeature,
    Permission,
    ActionCategory,
    Hardware,
    Software,
    Normal,
    Signature,
    ActivityAction,
    Broadcast,
    Category,
    Service,
    Receiver,
    Provider,
    Leaf,
}

/// Labels from the first layer down to the subtree node holding the leaves.
pub fn path_labels(subtree: Subtree) -> &'static [NodeLabel] {
    use NodeLabel::*;
    match subtree {
        Subtree::Hardware => &[Manifest, UsesFeature, Hardware],
        Subtree::Software => &[Manifest, UsesFeature, Software],
        Subtree::Normal => &[Manifest, Permission, Normal],
        Subtree::Signature => &[Manifest, Permission, Signature],
        Subtree::ActivityAction => &[Manifest, ActionCategory, ActivityAction],
        Subtree::Broadcast => &[Manifest, ActionCategory, Broadcast],
        Subtree::Category => &[Manifest, ActionCategory, Category],
        Subtree::Service => &[Code, Service],
        Subtree::Receiver => &[Code, Receiver],
        Subtree::Provider => &[Code, Provider],
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalWeighting {
    /// Weight proportional to 1 / descendant leaf count.
    #[default]
    Inverse,
    /// Weight proportional to descendant leaf count.
    Proportional,
}

impl std::str::FromStr for InternalWeighting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inverse" => Ok(Self::Inverse),
            "proportional" => Ok(Self::Proportional),
            other => Err(format!("unknown internal weighting `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub internal_weighting: InternalWeighting,
    /// Tolerance for comparing confidences.
    pub epsilon: f64,
    pub penalty_constant: f64,
    /// `(p_manifest, p_code)`, normalized when both branches exist.
    pub first_layer_prior: Option<(f64, f64)>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            internal_weighting: InternalWeighting::Inverse,
            epsilon: 1e-6,
            penalty_constant: 0.1,
            first_layer_prior: None,
        }
    }
}

/// Multiplier applied to a node at `depth` when a query had no effect.
pub fn penalty_factor(depth: usize, constant: f64) -> f64 {
    (1.0 - depth as f64 * constant).max(0.01)
}

/// Normal density at each size, normalized; uniform when the sizes agree.
pub fn normal_fit_weights(sizes: &[usize]) -> Vec<f64> {
    let n = sizes.len() as f64;
    if sizes.is_empty() {
        return Vec::new();
    }
    let mean = sizes.iter().sum::<usize>() as f64 / n;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let uniform = vec![1.0 / n; sizes.len()];
    if sd == 0.0 {
        return uniform;
    }
    let density: Vec<f64> = sizes
        .iter()
        .map(|&s| {
            let z = (s as f64 - mean) / sd;
            (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    normalized(&density).unwrap_or(uniform)
}

fn normalized(weights: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| weights.iter().map(|w| w / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub label: NodeLabel,
    pub parent: Option<usize>,
    pub depth: usize,
    pub children: Vec<(usize, f64)>,
    /// Live leaves at or below this node.
    pub leaves_below: usize,
    pub group: Option<PerturbationGroup>,
    pub alive: bool,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.label == NodeLabel::Leaf
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    /// Root first, leaf last.
    pub nodes: Vec<usize>,
    pub group: PerturbationGroup,
}

impl SamplePath {
    pub fn leaf(&self) -> usize {
        *self.nodes.last().expect("paths are never empty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsTree {
    pub config: TreeConfig,
    pub nodes: Vec<Node>,
}

pub const ROOT: usize = 0;

impl PsTree {
    /// Routes groups to their subtrees and initializes probabilities.
    pub fn build(groups: &[PerturbationGroup], config: &TreeConfig) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::NoGroups);
        }
        let mut tree = Self {
            config: config.clone(),
            nodes: vec![Node {
                id: ROOT,
                label: NodeLabel::Root,
                parent: None,
                depth: 0,
                children: Vec::new(),
                leaves_below: 0,
                group: None,
                alive: true,
            }],
        };
        for subtree in Subtree::ALL {
            for g in groups.iter().filter(|g| g.subtree == subtree) {
                let mut at = ROOT;
                for &label in path_labels(subtree) {
                    at = tree.child_with_label(at, label).unwrap_or_else(|| tree.push(at, label, None));
                }
                tree.push(at, NodeLabel::Leaf, Some(g.clone()));
            }
        }
        tree.init_probabilities();
        Ok(tree)
    }

    fn push(&mut self, parent: usize, label: NodeLabel, group: Option<PerturbationGroup>) -> usize {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(Node {
            id,
            label,
            parent: Some(parent),
            depth,
            children: Vec::new(),
            leaves_below: 0,
            group,
            alive: true,
        });
        self.nodes[parent].children.push((id, 0.0));
        if label == NodeLabel::Leaf {
            self.nodes[id].leaves_below = 1;
            let mut up = Some(parent);
            while let Some(p) = up {
                self.nodes[p].leaves_below += 1;
                up = self.nodes[p].parent;
            }
        }
        id
    }

    fn child_with_label(&self, parent: usize, label: NodeLabel) -> Option<usize> {
        self.nodes[parent]
            .children
            .iter()
            .map(|&(c, _)| c)
            .find(|&c| self.nodes[c].label == label)
    }

    /// Resets every sibling set to its initial distribution.
    pub fn init_probabilities(&mut self) {
        let internal: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.alive && !n.children.is_empty())
            .map(|n| n.id)
            .collect();
        for id in internal {
            if id == ROOT {
                self.init_first_layer();
            } else if self.nodes[self.nodes[id].children[0].0].is_leaf() {
                self.init_leaf_siblings(id);
            } else {
                self.reinit_from_leaf_counts(id);
            }
        }
    }

    fn init_first_layer(&mut self) {
        let prior = self.config.first_layer_prior;
        let weights: Vec<f64> = self.nodes[ROOT]
            .children
            .iter()
            .map(|&(c, _)| match (prior, self.nodes[c].label) {
                (Some((m, _)), NodeLabel::Manifest) => m,
                (Some((_, k)), NodeLabel::Code) => k,
                _ => 0.5,
            })
            .collect();
        self.set_weights(ROOT, &weights);
    }

    fn init_leaf_siblings(&mut self, parent: usize) {
        let children: Vec<usize> = self.nodes[parent].children.iter().map(|&(c, _)| c).collect();
        let weights = if self.under_manifest(parent) {
            let sizes: Vec<usize> = children
                .iter()
                .map(|&c| self.nodes[c].group.as_ref().map_or(1, PerturbationGroup::len))
                .collect();
            normal_fit_weights(&sizes)
        } else {
            vec![1.0; children.len()]
        };
        self.set_weights(parent, &weights);
    }

    fn under_manifest(&self, mut id: usize) -> bool {
        while let Some(p) = self.nodes[id].parent {
            if p == ROOT {
                return self.nodes[id].label == NodeLabel::Manifest;
            }
            id = p;
        }
        false
    }

    /// Re-derives the children of `parent` from their current leaf counts.
    fn reinit_from_leaf_counts(&mut self, parent: usize) {
        let weighting = self.config.internal_weighting;
        let weights: Vec<f64> = self.nodes[parent]
            .children
            .iter()
            .map(|&(c, _)| {
                let n = self.nodes[c].leaves_below.max(1) as f64;
                match weighting {
                    InternalWeighting::Inverse => 1.0 / n,
                    InternalWeighting::Proportional => n,
                }
            })
            .collect();
        self.set_weights(parent, &weights);
    }

    fn set_weights(&mut self, parent: usize, weights: &[f64]) {
        let k = weights.len();
        let probs = normalized(weights).unwrap_or_else(|| vec![1.0 / k as f64; k]);
        for (slot, p) in self.nodes[parent].children.iter_mut().zip(probs) {
            slot.1 = p;
        }
    }

    fn renormalize(&mut self, parent: usize) {
        let weights: Vec<f64> = self.nodes[parent].children.iter().map(|&(_, p)| p).collect();
        self.set_weights(parent, &weights);
    }

    pub fn node(&self, id: usize) -> Result<&Node> {
        self.nodes.get(id).filter(|n| n.alive).ok_or(Error::UnknownNode(id))
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes[ROOT].leaves_below
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_count() == 0
    }

    /// Live leaf ids in tree order.
    pub fn leaves(&self) -> Vec<usize> {
        self.descendant_leaves(ROOT)
    }

    pub fn descendant_leaves(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !node.alive {
                continue;
            }
            if node.is_leaf() {
                out.push(n);
            }
            stack.extend(node.children.iter().rev().map(|&(c, _)| c));
        }
        out
    }

    /// Live nodes at depth 2 (uses_feature, permission, action_category,
    /// service, receiver, provider).
    pub fn second_layer(&self) -> Vec<usize> {
        self.nodes[ROOT]
            .children
            .iter()
            .flat_map(|&(c, _)| self.nodes[c].children.iter().map(|&(g, _)| g))
            .collect()
    }

    /// Probability of reaching `id` from the root.
    pub fn path_probability(&self, id: usize) -> f64 {
        let mut p = 1.0;
        let mut at = id;
        while let Some(parent) = self.nodes[at].parent {
            p *= self.nodes[parent]
                .children
                .iter()
                .find(|&&(c, _)| c == at)
                .map_or(0.0, |&(_, q)| q);
            at = parent;
        }
        p
    }

    pub fn probability_of(&self, id: usize) -> Option<f64> {
        let parent = self.nodes.get(id)?.parent?;
        self.nodes[parent].children.iter().find(|&&(c, _)| c == id).map(|&(_, p)| p)
    }

    pub fn child_probabilities(&self, id: usize) -> &[(usize, f64)] {
        &self.nodes[id].children
    }

    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SamplePath> {
        if self.is_empty() {
            return Err(Error::EmptyTree);
        }
        let mut nodes = vec![ROOT];
        let mut at = ROOT;
        while !self.nodes[at].is_leaf() {
            let children = &self.nodes[at].children;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = children[children.len() - 1].0;
            for &(c, p) in children {
                acc += p;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            nodes.push(chosen);
            at = chosen;
        }
        let group = self.nodes[at].group.clone().expect("leaves carry groups");
        Ok(SamplePath { nodes, group })
    }

    /// Removes `leaf`, cascading through parents left without children. The
    /// removed subtree's probability is split equally among the siblings at
    /// the first level that still has any. Returns that absorbing node, or
    /// `None` when the tree became empty.
    pub fn delete_leaf_and_transfer(&mut self, leaf: usize) -> Result<Option<usize>> {
        let node = self.node(leaf)?;
        if !node.is_leaf() {
            return Err(Error::NotALeaf(leaf));
        }
        let mut up = node.parent;
        while let Some(p) = up {
            self.nodes[p].leaves_below -= 1;
            up = self.nodes[p].parent;
        }
        let mut at = leaf;
        loop {
            self.nodes[at].alive = false;
            self.nodes[at].leaves_below = 0;
            let Some(parent) = self.nodes[at].parent else {
                return Ok(None);
            };
            let pos = self.nodes[parent]
                .children
                .iter()
                .position(|&(c, _)| c == at)
                .expect("live nodes are linked to their parent");
            let (_, p) = self.nodes[parent].children.remove(pos);
            let siblings = self.nodes[parent].children.len();
            if siblings > 0 {
                let share = p / siblings as f64;
                for slot in &mut self.nodes[parent].children {
                    slot.1 += share;
                }
                self.renormalize(parent);
                return Ok(Some(parent));
            }
            if parent == ROOT {
                return Ok(None);
            }
            at = parent;
        }
    }

    /// Feedback update after querying the group at `leaf`.
    pub fn adjust(&mut self, leaf: usize, y_prev: f64, y_new: f64) -> Result<()> {
        let first_layer = self.first_layer_ancestor(leaf)?;
        let absorbing = self.delete_leaf_and_transfer(leaf)?;
        let eps = self.config.epsilon;
        if y_new < y_prev - eps {
            return Ok(());
        }
        let no_effect = (y_new - y_prev).abs() <= eps;
        if let Some(mut p) = absorbing {
            while let Some(pp) = self.nodes[p].parent.filter(|&pp| pp != ROOT) {
                self.reinit_from_leaf_counts(pp);
                if no_effect {
                    let factor = penalty_factor(self.nodes[p].depth, self.config.penalty_constant);
                    if let Some(slot) = self.nodes[pp].children.iter_mut().find(|s| s.0 == p) {
                        slot.1 *= factor;
                    }
                    self.renormalize(pp);
                }
                p = pp;
            }
        }
        if self.nodes[first_layer].alive {
            if let Some(slot) = self.nodes[ROOT].children.iter_mut().find(|s| s.0 == first_layer) {
                slot.1 *= 0.5;
            }
            self.renormalize(ROOT);
        }
        Ok(())
    }

    fn first_layer_ancestor(&self, id: usize) -> Result<usize> {
        let mut at = self.node(id)?.id;
        while let Some(p) = self.nodes[at].parent {
            if p == ROOT {
                return Ok(at);
            }
            at = p;
        }
        Err(Error::UnknownNode(id))
    }

    /// Every sibling set that does not sum to one within `tol` or holds an
    /// entry outside `[0, 1]`, plus structural inconsistencies.
    pub fn integrity_violations(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        for n in self.nodes.iter().filter(|n| n.alive) {
            if !n.children.is_empty() {
                let sum: f64 = n.children.iter().map(|&(_, p)| p).sum();
                if (sum - 1.0).abs() > tol {
                    out.push(format!("node {} children sum to {sum}", n.id));
                }
                for &(c, p) in &n.children {
                    if !(0.0..=1.0).contains(&p) {
                        out.push(format!("node {c} has probability {p}"));
                    }
                    if !self.nodes[c].alive || self.nodes[c].parent != Some(n.id) {
                        out.push(format!("node {c} is dead or misparented"));
                    }
                }
            } else if !n.is_leaf() && n.id != ROOT {
                out.push(format!("internal node {} has no children", n.id));
            }
            let counted = if n.is_leaf() {
                1
            } else {
                n.children.iter().map(|&(c, _)| self.nodes[c].leaves_below).sum()
            };
            if counted != n.leaves_below {
                out.push(format!("node {} leaf count {} != {counted}", n.id, n.leaves_below));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
