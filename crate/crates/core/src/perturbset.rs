//! Perturbation catalog construction, keyword similarity and clustering.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ApkModel, CodeComponent, ComponentKind, DeclaredComponent, FunctionId, Permission, ProtectionLevel};
use crate::error::{Error, Result};

const DEFAULT_CATALOG: &str = include_str!("../data/android_catalog.json");

const HARDWARE_PREFIX: &str = "android.hardware.";
const SOFTWARE_PREFIX: &str = "android.software.";

/// Static Android framework vocabulary the manifest perturbations draw from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AndroidCatalog {
    pub hardware_features: Vec<String>,
    pub software_features: Vec<String>,
    pub permissions: Vec<Permission>,
    pub activity_actions: Vec<String>,
    pub broadcast_actions: Vec<String>,
    pub categories: Vec<String>,
}

impl AndroidCatalog {
    /// The catalog shipped with the crate: 60 hardware and 30 software
    /// features, 40 normal / 36 signature / 30 dangerous permissions, 40
    /// activity actions, 30 broadcast actions and 20 categories.
    pub fn default_catalog() -> Self {
        serde_json::from_str(DEFAULT_CATALOG).expect("bundled catalog is valid JSON")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let catalog: Self = serde_json::from_str(&text)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        let names = self
            .hardware_features
            .iter()
            .chain(&self.software_features)
            .chain(self.permissions.iter().map(|p| &p.name))
            .chain(&self.activity_actions)
            .chain(&self.broadcast_actions)
            .chain(&self.categories);
        for name in names {
            if name.trim().is_empty() {
                return Err(Error::InvalidApk {
                    id: "catalog".into(),
                    reason: "empty catalog entry".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    UsesFeature,
    Permission,
    ActivityAction,
    BroadcastAction,
    Category,
    InjectService,
    InjectReceiver,
    InjectProvider,
}

impl PerturbationKind {
    pub fn is_code(self) -> bool {
        matches!(
            self,
            PerturbationKind::InjectService | PerturbationKind::InjectReceiver | PerturbationKind::InjectProvider
        )
    }

    fn for_component(kind: ComponentKind) -> Option<Self> {
        match kind {
            ComponentKind::Service => Some(PerturbationKind::InjectService),
            ComponentKind::Receiver => Some(PerturbationKind::InjectReceiver),
            ComponentKind::Provider => Some(PerturbationKind::InjectProvider),
            ComponentKind::Activity => None,
        }
    }
}

/// A service, receiver or provider sliced out of a benign application.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorComponent {
    pub donor_id: String,
    pub declared: DeclaredComponent,
    pub code: CodeComponent,
    /// Call edges internal to the component (donor function ids).
    pub edges: Vec<(FunctionId, FunctionId)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Element { name: String },
    Permission(Permission),
    Component(Box<DonorComponent>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub id: usize,
    pub kind: PerturbationKind,
    pub payload: Payload,
    /// Empty for code perturbations.
    pub keywords: Vec<String>,
}

impl Perturbation {
    /// Manifest-element perturbation (feature, action or category) with its
    /// keywords filled in.
    pub fn element(id: usize, kind: PerturbationKind, name: &str) -> Self {
        let mut p = Self {
            id,
            kind,
            payload: Payload::Element { name: name.to_string() },
            keywords: Vec::new(),
        };
        p.keywords = keyword_extract(&p).unwrap_or_default();
        p
    }

    pub fn permission(id: usize, permission: Permission) -> Self {
        let mut p = Self {
            id,
            kind: PerturbationKind::Permission,
            payload: Payload::Permission(permission),
            keywords: Vec::new(),
        };
        p.keywords = keyword_extract(&p).unwrap_or_default();
        p
    }

    pub fn name(&self) -> &str {
        match &self.payload {
            Payload::Element { name } => name,
            Payload::Permission(p) => &p.name,
            Payload::Component(c) => &c.code.name,
        }
    }

    pub fn subtree(&self) -> Subtree {
        match (&self.kind, &self.payload) {
            (PerturbationKind::UsesFeature, _) if self.name().starts_with(SOFTWARE_PREFIX) => Subtree::Software,
            (PerturbationKind::UsesFeature, _) => Subtree::Hardware,
            (PerturbationKind::Permission, Payload::Permission(p)) if p.protection_level == ProtectionLevel::Signature => {
                Subtree::Signature
            }
            (PerturbationKind::Permission, _) => Subtree::Normal,
            (PerturbationKind::ActivityAction, _) => Subtree::ActivityAction,
            (PerturbationKind::BroadcastAction, _) => Subtree::Broadcast,
            (PerturbationKind::Category, _) => Subtree::Category,
            (PerturbationKind::InjectService, _) => Subtree::Service,
            (PerturbationKind::InjectReceiver, _) => Subtree::Receiver,
            (PerturbationKind::InjectProvider, _) => Subtree::Provider,
        }
    }
}

/// Name-level subtree a perturbation is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtree {
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
}

impl Subtree {
    pub const ALL: [Subtree; 10] = [
        Subtree::Hardware,
        Subtree::Software,
        Subtree::Normal,
        Subtree::Signature,
        Subtree::ActivityAction,
        Subtree::Broadcast,
        Subtree::Category,
        Subtree::Service,
        Subtree::Receiver,
        Subtree::Provider,
    ];

    pub fn is_code(self) -> bool {
        matches!(self, Subtree::Service | Subtree::Receiver | Subtree::Provider)
    }
}

/// A leaf of the selection tree: perturbations applied together in one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationGroup {
    pub subtree: Subtree,
    /// Perturbation ids, in merge order.
    pub members: Vec<usize>,
    pub keywords: BTreeSet<String>,
}

impl PerturbationGroup {
    pub fn singleton(p: &Perturbation) -> Self {
        Self {
            subtree: p.subtree(),
            members: vec![p.id],
            keywords: p.keywords.iter().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSet {
    pub perturbations: Vec<Perturbation>,
}

impl PerturbationSet {
    pub fn len(&self) -> usize {
        self.perturbations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perturbations.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Perturbation> {
        self.perturbations.get(id)
    }

    pub fn count_by_subtree(&self, subtree: Subtree) -> usize {
        self.perturbations.iter().filter(|p| p.subtree() == subtree).count()
    }

    /// Groups every perturbation into selection-tree leaves: uses-features by
    /// their first keyword, permissions and intent elements by keyword
    /// similarity, code perturbations as singletons.
    pub fn groups(&self, threshold: f64) -> Result<Vec<PerturbationGroup>> {
        let mut out = Vec::new();
        for subtree in Subtree::ALL {
            let members: Vec<&Perturbation> = self.perturbations.iter().filter(|p| p.subtree() == subtree).collect();
            if members.is_empty() {
                continue;
            }
            match subtree {
                Subtree::Hardware | Subtree::Software => out.extend(cluster_by_first_keyword(&members)),
                s if s.is_code() => out.extend(members.iter().map(|p| PerturbationGroup::singleton(p))),
                _ => out.extend(cluster_perturbations(&members, threshold)?),
            }
        }
        Ok(out)
    }
}

/// A perturbation set together with its clustered groups, as written by
/// `build-pset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteredSet {
    pub threshold: f64,
    pub set: PerturbationSet,
    pub groups: Vec<PerturbationGroup>,
}

impl ClusteredSet {
    pub fn new(set: PerturbationSet, threshold: f64) -> Result<Self> {
        let groups = set.groups(threshold)?;
        Ok(Self { threshold, set, groups })
    }
}

/// Default keyword-similarity threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One perturbation per eligible catalog entry (dangerous permissions are
/// skipped) plus one per service, receiver or provider found in `donors`.
pub fn build_perturbation_set(catalog: &AndroidCatalog, donors: &[ApkModel]) -> Result<PerturbationSet> {
    let mut out: Vec<Perturbation> = Vec::new();
    for name in catalog.hardware_features.iter().chain(&catalog.software_features) {
        out.push(Perturbation::element(out.len(), PerturbationKind::UsesFeature, name));
    }
    for perm in &catalog.permissions {
        if perm.protection_level != ProtectionLevel::Dangerous {
            out.push(Perturbation::permission(out.len(), perm.clone()));
        }
    }
    for (kind, names) in [
        (PerturbationKind::ActivityAction, &catalog.activity_actions),
        (PerturbationKind::BroadcastAction, &catalog.broadcast_actions),
        (PerturbationKind::Category, &catalog.categories),
    ] {
        for name in names {
            out.push(Perturbation::element(out.len(), kind, name));
        }
    }
    for donor in donors {
        for component in &donor.code.components {
            let Some(kind) = PerturbationKind::for_component(component.kind) else {
                continue;
            };
            let ids: std::collections::HashSet<FunctionId> = component.functions.iter().map(|f| f.id).collect();
            let edges = donor
                .code
                .edges
                .iter()
                .copied()
                .filter(|(a, b)| ids.contains(a) && ids.contains(b))
                .collect();
            let declared = donor
                .manifest
                .find_component(component.kind, &component.name)
                .cloned()
                .unwrap_or_else(|| DeclaredComponent {
                    kind: component.kind,
                    name: component.name.clone(),
                    intent_actions: BTreeSet::new(),
                    intent_categories: BTreeSet::new(),
                    exported: false,
                    enabled: true,
                    process: None,
                    data_uri: None,
                });
            let mut code = component.clone();
            code.origin = crate::corpus::Origin::Original;
            out.push(Perturbation {
                id: out.len(),
                kind,
                payload: Payload::Component(Box::new(DonorComponent {
                    donor_id: donor.id.clone(),
                    declared,
                    code,
                    edges,
                })),
                keywords: Vec::new(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyPerturbationSet);
    }
    Ok(PerturbationSet { perturbations: out })
}

/// Keywords of a manifest perturbation.
///
/// Permissions, actions and categories: the last dotted segment split on `_`
/// and uppercased. Uses-features: the dotted tokens after the
/// `android.hardware.` / `android.software.` prefix.
pub fn keyword_extract(p: &Perturbation) -> Result<Vec<String>> {
    if p.kind.is_code() {
        return Err(Error::NoKeywords);
    }
    let name = p.name();
    let keywords = if p.kind == PerturbationKind::UsesFeature {
        let rest = name
            .strip_prefix(HARDWARE_PREFIX)
            .or_else(|| name.strip_prefix(SOFTWARE_PREFIX))
            .unwrap_or(name);
        rest.split('.').filter(|t| !t.is_empty()).map(str::to_string).collect()
    } else {
        let last = name.rsplit('.').next().unwrap_or(name);
        last.split('_')
            .filter(|t| !t.is_empty())
            .map(|t| t.to_uppercase())
            .collect()
    };
    Ok(keywords)
}

/// Shared keywords divided by the size of the smaller keyword set.
pub fn keyword_similarity(a: &PerturbationGroup, b: &PerturbationGroup) -> Result<f64> {
    if a.subtree != b.subtree {
        return Err(Error::SubtreeMismatch);
    }
    if a.keywords.is_empty() || b.keywords.is_empty() {
        return Err(Error::EmptyKeywordSet);
    }
    Ok(overlap(&a.keywords, &b.keywords))
}

fn overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let shared = a.intersection(b).count();
    shared as f64 / a.len().min(b.len()) as f64
}

/// Greedy agglomerative merge: repeatedly merges the first pair `(i, j)`,
/// `i < j` in lexicographic order, whose similarity exceeds `threshold`. The
/// merged group takes slot `i`; slot `j` is removed. Stops at a fixpoint.
pub fn cluster_perturbations(perturbations: &[&Perturbation], threshold: f64) -> Result<Vec<PerturbationGroup>> {
    let mut groups: Vec<PerturbationGroup> = perturbations.iter().map(|p| PerturbationGroup::singleton(p)).collect();
    if groups.iter().any(|g| g.keywords.is_empty()) {
        return Err(Error::EmptyKeywordSet);
    }
    while let Some((i, j)) = first_similar_pair(&groups, threshold) {
        let absorbed = groups.remove(j);
        let target = &mut groups[i];
        target.members.extend(absorbed.members);
        target.keywords.extend(absorbed.keywords);
    }
    Ok(groups)
}

fn first_similar_pair(groups: &[PerturbationGroup], threshold: f64) -> Option<(usize, usize)> {
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            if overlap(&groups[i].keywords, &groups[j].keywords) > threshold {
                return Some((i, j));
            }
        }
    }
    None
}

/// Uses-feature grouping: perturbations sharing their first post-prefix
/// token form one group, in order of first appearance.
pub fn cluster_by_first_keyword(perturbations: &[&Perturbation]) -> Vec<PerturbationGroup> {
    let mut groups: Vec<(String, PerturbationGroup)> = Vec::new();
    for p in perturbations {
        let head = p.keywords.first().cloned().unwrap_or_else(|| p.name().to_string());
        match groups.iter_mut().find(|(h, g)| *h == head && g.subtree == p.subtree()) {
            Some((_, g)) => {
                g.members.push(p.id);
                g.keywords.extend(p.keywords.iter().cloned());
            }
            None => groups.push((head, PerturbationGroup::singleton(p))),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perm(name: &str, level: ProtectionLevel) -> Permission {
        Permission {
            name: name.into(),
            protection_level: level,
        }
    }

    fn group(subtree: Subtree, words: &[&str]) -> PerturbationGroup {
        PerturbationGroup {
            subtree,
            members: vec![0],
            keywords: words.iter().map(|w| w.to_string()).collect(),
        }
    }

    #[test]
    fn dangerous_permissions_are_filtered() {
        let catalog = AndroidCatalog {
            hardware_features: vec![],
            software_features: vec![],
            permissions: vec![
                perm("A", ProtectionLevel::Normal),
                perm("B", ProtectionLevel::Dangerous),
                perm("C", ProtectionLevel::Signature),
            ],
            activity_actions: vec![],
            broadcast_actions: vec![],
            categories: vec![],
        };
        let set = build_perturbation_set(&catalog, &[]).unwrap();
        let names: Vec<_> = set.perturbations.iter().map(Perturbation::name).collect();
        assert_eq!(names, ["A", "C"]);
        assert!(set.perturbations.iter().all(|p| !p.kind.is_code()));
    }

    #[test]
    fn empty_catalog_and_no_donors_is_an_error() {
        let catalog = AndroidCatalog {
            hardware_features: vec![],
            software_features: vec![],
            permissions: vec![perm("B", ProtectionLevel::Dangerous)],
            activity_actions: vec![],
            broadcast_actions: vec![],
            categories: vec![],
        };
        assert!(matches!(build_perturbation_set(&catalog, &[]), Err(Error::EmptyPerturbationSet)));
    }

    #[test]
    fn default_catalog_has_256_eligible_entries() {
        let cat = AndroidCatalog::default_catalog();
        cat.validate().unwrap();
        let set = build_perturbation_set(&cat, &[]).unwrap();
        assert_eq!(set.len(), 256);
        assert_eq!(set.count_by_subtree(Subtree::Normal), 40);
        assert_eq!(set.count_by_subtree(Subtree::Signature), 36);
    }

    #[test]
    fn keywords_follow_the_splitting_rules() {
        let p = Perturbation::permission(0, perm("android.permission.ACCESS_WIFI_STATE", ProtectionLevel::Normal));
        assert_eq!(p.keywords, ["ACCESS", "WIFI", "STATE"]);
        let f = Perturbation::element(0, PerturbationKind::UsesFeature, "android.hardware.audio.output");
        assert_eq!(f.keywords, ["audio", "output"]);
        let g = Perturbation::element(0, PerturbationKind::UsesFeature, "android.hardware.audio.pro");
        assert_eq!(f.keywords[0], g.keywords[0]);
        let c = Perturbation::element(0, PerturbationKind::Category, "android.intent.category.INFO");
        assert_eq!(c.keywords, ["INFO"]);
        let s = Perturbation::element(0, PerturbationKind::UsesFeature, "android.software.managed_users");
        assert_eq!(s.keywords, ["managed_users"]);
    }

    #[test]
    fn code_perturbations_have_no_keywords() {
        let p = Perturbation {
            id: 0,
            kind: PerturbationKind::InjectService,
            payload: Payload::Element { name: "x".into() },
            keywords: vec![],
        };
        assert!(matches!(keyword_extract(&p), Err(Error::NoKeywords)));
    }

    #[test]
    fn similarity_examples() {
        let n = Subtree::Normal;
        let a = group(n, &["ACCESS", "WIFI", "STATE"]);
        let b = group(n, &["ACCESS", "NETWORK", "STATE"]);
        assert_eq!(keyword_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(keyword_similarity(&a, &group(n, &["X"])).unwrap(), 0.0);
        assert!((keyword_similarity(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(keyword_similarity(&a, &group(n, &[])), Err(Error::EmptyKeywordSet)));
        assert!(keyword_similarity(&a, &group(Subtree::Category, &["A"])).is_err());
    }

    #[test]
    fn clustering_edge_cases() {
        let same: Vec<Perturbation> = (0..4)
            .map(|i| Perturbation::element(i, PerturbationKind::Category, "a.b.FOO_BAR"))
            .collect();
        let refs: Vec<&Perturbation> = same.iter().collect();
        let groups = cluster_perturbations(&refs, 0.5).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, [0, 1, 2, 3]);

        let disjoint: Vec<Perturbation> = ["A_B", "C_D", "E"]
            .iter()
            .enumerate()
            .map(|(i, n)| Perturbation::element(i, PerturbationKind::Category, n))
            .collect();
        let refs: Vec<&Perturbation> = disjoint.iter().collect();
        assert_eq!(cluster_perturbations(&refs, 0.5).unwrap().len(), 3);
    }

    #[test]
    fn wifi_permissions_merge() {
        let names = ["ACCESS_WIFI_STATE", "CHANGE_WIFI_STATE", "INTERNET"];
        let ps: Vec<Perturbation> = names
            .iter()
            .enumerate()
            .map(|(i, n)| Perturbation::permission(i, perm(&format!("android.permission.{n}"), ProtectionLevel::Normal)))
            .collect();
        let refs: Vec<&Perturbation> = ps.iter().collect();
        let groups = cluster_perturbations(&refs, 0.5).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, [0, 1]);
        assert_eq!(groups[0].keywords.len(), 4);
    }

    #[test]
    fn uses_features_group_by_first_token() {
        let names = [
            "android.hardware.audio.output",
            "android.hardware.camera",
            "android.hardware.audio.pro",
            "android.hardware.camera.flash",
        ];
        let ps: Vec<Perturbation> = names
            .iter()
            .enumerate()
            .map(|(i, n)| Perturbation::element(i, PerturbationKind::UsesFeature, n))
            .collect();
        let refs: Vec<&Perturbation> = ps.iter().collect();
        let groups = cluster_by_first_keyword(&refs);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, [0, 2]);
        assert_eq!(groups[1].members, [1, 3]);
    }

    #[test]
    fn groups_partition_the_set() {
        let set = build_perturbation_set(&AndroidCatalog::default_catalog(), &[]).unwrap();
        let groups = set.groups(DEFAULT_THRESHOLD).unwrap();
        let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..set.len()).collect::<Vec<_>>());
        for g in &groups {
            assert!(g.members.iter().all(|&m| set.perturbations[m].subtree() == g.subtree));
        }
    }
}
