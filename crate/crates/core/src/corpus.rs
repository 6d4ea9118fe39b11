//! Abstract Android application model and synthetic corpora.
//!
//! An [`ApkModel`] keeps exactly the surfaces that static detectors read and
//! that additive perturbations write: manifest element sets and a
//! component-level function call graph.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::perturbset::{AndroidCatalog, Payload, Perturbation, PerturbationKind};
use crate::rng::{self, random_identifier, StreamRng, IDENTIFIER_LEN};

pub type FunctionId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Benign,
    Malicious,
}

impl GroundTruth {
    pub fn is_malicious(self) -> bool {
        self == GroundTruth::Malicious
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectionLevel {
    Normal,
    Signature,
    Dangerous,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Permission {
    pub name: String,
    pub protection_level: ProtectionLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Activity,
    Service,
    Receiver,
    Provider,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Activity => "activity",
            ComponentKind::Service => "service",
            ComponentKind::Receiver => "receiver",
            ComponentKind::Provider => "provider",
        }
    }

    fn class_suffix(self) -> &'static str {
        match self {
            ComponentKind::Activity => "Activity",
            ComponentKind::Service => "Service",
            ComponentKind::Receiver => "Receiver",
            ComponentKind::Provider => "Provider",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredComponent {
    pub kind: ComponentKind,
    pub name: String,
    pub intent_actions: BTreeSet<String>,
    pub intent_categories: BTreeSet<String>,
    pub exported: bool,
    pub enabled: bool,
    pub process: Option<String>,
    pub data_uri: Option<String>,
}

impl DeclaredComponent {
    fn plain(kind: ComponentKind, name: String) -> Self {
        Self {
            kind,
            name,
            intent_actions: BTreeSet::new(),
            intent_categories: BTreeSet::new(),
            exported: false,
            enabled: true,
            process: None,
            data_uri: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestModel {
    pub uses_features: BTreeSet<String>,
    pub permissions: BTreeSet<Permission>,
    pub declared_components: Vec<DeclaredComponent>,
}

impl ManifestModel {
    pub fn has_permission(&self, name: &str) -> bool {
        self.permissions.iter().any(|p| p.name == name)
    }

    pub fn find_component(&self, kind: ComponentKind, name: &str) -> Option<&DeclaredComponent> {
        self.declared_components
            .iter()
            .find(|c| c.kind == kind && c.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ApiCall {
    pub api_id: u32,
    pub family_id: u16,
    pub package_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionNode {
    pub id: FunctionId,
    /// Package family of the function, the state used by Markov-chain features.
    pub family: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Injected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeComponent {
    pub kind: ComponentKind,
    pub name: String,
    pub classes: u32,
    pub functions: Vec<FunctionNode>,
    pub api_calls: Vec<ApiCall>,
    pub origin: Origin,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGraph {
    pub components: Vec<CodeComponent>,
    pub edges: Vec<(FunctionId, FunctionId)>,
}

impl CodeGraph {
    pub fn function_count(&self) -> usize {
        self.components.iter().map(|c| c.functions.len()).sum()
    }

    pub fn next_function_id(&self) -> FunctionId {
        self.components
            .iter()
            .flat_map(|c| c.functions.iter().map(|f| f.id + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn origin_by_function(&self) -> HashMap<FunctionId, Origin> {
        self.components
            .iter()
            .flat_map(|c| c.functions.iter().map(move |f| (f.id, c.origin)))
            .collect()
    }

    /// Edges that connect injected code with original code. Always empty for
    /// samples produced by [`apply_perturbation`].
    pub fn cross_origin_edges(&self) -> Vec<(FunctionId, FunctionId)> {
        let origin = self.origin_by_function();
        self.edges
            .iter()
            .copied()
            .filter(|(a, b)| origin.get(a) != origin.get(b))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApkModel {
    pub id: String,
    pub manifest: ManifestModel,
    pub code: CodeGraph,
    pub ground_truth: GroundTruth,
}

impl ApkModel {
    pub fn empty(id: impl Into<String>, ground_truth: GroundTruth) -> Self {
        Self {
            id: id.into(),
            manifest: ManifestModel::default(),
            code: CodeGraph::default(),
            ground_truth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidApk {
                id: self.id.clone(),
                reason,
            })
        };
        let m = &self.manifest;
        if m.uses_features.iter().any(String::is_empty) || m.permissions.iter().any(|p| p.name.is_empty()) {
            return fail("empty manifest element name".into());
        }
        let mut seen = HashSet::new();
        for c in &m.declared_components {
            if c.name.is_empty() {
                return fail("empty component name".into());
            }
            if !seen.insert((c.kind, c.name.as_str())) {
                return fail(format!("duplicate {} `{}`", c.kind.as_str(), c.name));
            }
        }
        let mut ids = HashSet::new();
        for f in self.code.components.iter().flat_map(|c| &c.functions) {
            if !ids.insert(f.id) {
                return fail(format!("duplicate function id {}", f.id));
            }
        }
        if let Some((a, b)) = self
            .code
            .edges
            .iter()
            .find(|(a, b)| !ids.contains(a) || !ids.contains(b))
        {
            return fail(format!("edge {a}->{b} references a missing function"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindRichness {
    /// Mean number of components of this kind per application (Poisson).
    pub mean_count: f64,
    pub mean_classes: f64,
    pub mean_functions: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRichness {
    pub service: KindRichness,
    pub receiver: KindRichness,
    pub provider: KindRichness,
    /// Code behind the launcher activity; always one per application.
    pub activity: KindRichness,
}

impl ComponentRichness {
    fn of(&self, kind: ComponentKind) -> &KindRichness {
        match kind {
            ComponentKind::Activity => &self.activity,
            ComponentKind::Service => &self.service,
            ComponentKind::Receiver => &self.receiver,
            ComponentKind::Provider => &self.provider,
        }
    }
}

impl Default for ComponentRichness {
    fn default() -> Self {
        Self {
            service: KindRichness {
                mean_count: 1.08,
                mean_classes: 175.0,
                mean_functions: 873.0,
            },
            receiver: KindRichness {
                mean_count: 1.04,
                mean_classes: 136.0,
                mean_functions: 703.0,
            },
            provider: KindRichness {
                mean_count: 0.24,
                mean_classes: 417.0,
                mean_functions: 2044.0,
            },
            activity: KindRichness {
                mean_count: 1.0,
                mean_classes: 40.0,
                mean_functions: 200.0,
            },
        }
    }
}

/// Class-conditional Bernoulli inclusion parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionSpec {
    /// Mean inclusion probability of a manifest vocabulary item.
    pub base_rate: f64,
    /// Mean inclusion probability of an api within one code component.
    pub api_base_rate: f64,
    /// Fraction of items whose inclusion probability differs by class.
    pub discriminative_fraction: f64,
    /// Extra inclusion probability for the class an item leans towards.
    pub separation: f64,
    /// Log-scale spread between the benign and malicious family mixtures.
    pub family_separation: f64,
    /// Amplitude of the random shift applied to test-split probabilities.
    pub test_drift: f64,
}

impl Default for InclusionSpec {
    fn default() -> Self {
        Self {
            base_rate: 0.08,
            api_base_rate: 0.06,
            discriminative_fraction: 0.35,
            separation: 0.3,
            family_separation: 0.5,
            test_drift: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_benign: usize,
    pub n_malicious: usize,
    pub donor_count: usize,
    /// Trailing fraction of each class reserved for testing.
    pub test_fraction: f64,
    pub richness: ComponentRichness,
    pub edges_per_function: f64,
    pub api_vocab_size: usize,
    pub family_count: usize,
    pub packages_per_family: usize,
    /// App-specific permissions outside the Android catalog.
    pub custom_permission_count: usize,
    pub inclusion: InclusionSpec,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_benign: 300,
            n_malicious: 300,
            donor_count: 100,
            test_fraction: 0.5,
            richness: ComponentRichness::default(),
            edges_per_function: 1.5,
            api_vocab_size: 300,
            family_count: 11,
            packages_per_family: 8,
            custom_permission_count: 40,
            inclusion: InclusionSpec::default(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut prob = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{name} = {v} is not a probability"));
            }
        };
        let inc = &self.inclusion;
        prob("test_fraction", self.test_fraction);
        prob("inclusion.base_rate", inc.base_rate);
        prob("inclusion.api_base_rate", inc.api_base_rate);
        prob("inclusion.discriminative_fraction", inc.discriminative_fraction);
        prob("inclusion.separation", inc.separation);
        prob("inclusion.test_drift", inc.test_drift);
        let mut nonneg = |name: &str, v: f64| {
            if !v.is_finite() || v < 0.0 {
                bad.push(format!("{name} = {v} must be finite and >= 0"));
            }
        };
        nonneg("edges_per_function", self.edges_per_function);
        nonneg("inclusion.family_separation", inc.family_separation);
        for (kind, r) in [
            ("service", &self.richness.service),
            ("receiver", &self.richness.receiver),
            ("provider", &self.richness.provider),
            ("activity", &self.richness.activity),
        ] {
            nonneg(&format!("richness.{kind}.mean_count"), r.mean_count);
            nonneg(&format!("richness.{kind}.mean_classes"), r.mean_classes);
            nonneg(&format!("richness.{kind}.mean_functions"), r.mean_functions);
        }
        if self.family_count == 0 || self.family_count > u16::MAX as usize {
            bad.push(format!("family_count = {} must be in 1..=65535", self.family_count));
        }
        if self.packages_per_family == 0 {
            bad.push("packages_per_family must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(bad))
        }
    }

    pub fn test_count(n: usize, test_fraction: f64) -> usize {
        ((n as f64) * test_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub benign: Vec<ApkModel>,
    pub malicious: Vec<ApkModel>,
    pub donors: Vec<ApkModel>,
}

/// Train/test view over a corpus. The trailing `test_fraction` of each class
/// is the test split and was generated from drifted inclusion probabilities.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub train_benign: &'a [ApkModel],
    pub train_malicious: &'a [ApkModel],
    pub test_benign: &'a [ApkModel],
    pub test_malicious: &'a [ApkModel],
}

impl<'a> Split<'a> {
    pub fn train(&self) -> Vec<&'a ApkModel> {
        self.train_benign.iter().chain(self.train_malicious).collect()
    }

    pub fn test(&self) -> Vec<&'a ApkModel> {
        self.test_benign.iter().chain(self.test_malicious).collect()
    }
}

impl Corpus {
    pub fn split(&self) -> Split<'_> {
        let tb = CorpusSpec::test_count(self.benign.len(), self.spec.test_fraction);
        let tm = CorpusSpec::test_count(self.malicious.len(), self.spec.test_fraction);
        let (train_benign, test_benign) = self.benign.split_at(self.benign.len() - tb);
        let (train_malicious, test_malicious) = self.malicious.split_at(self.malicious.len() - tm);
        Split {
            train_benign,
            train_malicious,
            test_benign,
            test_malicious,
        }
    }

    pub fn all_apps(&self) -> impl Iterator<Item = &ApkModel> {
        self.benign.iter().chain(&self.malicious).chain(&self.donors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassProbs {
    train: [f64; 2],
    test: [f64; 2],
}

impl ClassProbs {
    fn get(&self, class: GroundTruth, test: bool) -> f64 {
        let i = class as usize;
        if test {
            self.test[i]
        } else {
            self.train[i]
        }
    }
}

struct VocabItem<T> {
    value: T,
    probs: ClassProbs,
}

/// Seed-derived generative tables shared by every app in a corpus.
struct World {
    features: Vec<VocabItem<String>>,
    permissions: Vec<VocabItem<Permission>>,
    activity_actions: Vec<VocabItem<String>>,
    broadcast_actions: Vec<VocabItem<String>>,
    categories: Vec<VocabItem<String>>,
    apis: Vec<VocabItem<ApiCall>>,
    /// Cumulative family mixture per class.
    family_cdf: [Vec<f64>; 2],
}

impl World {
    fn new(spec: &CorpusSpec, catalog: &AndroidCatalog) -> Self {
        let mut rng = rng::derived_stream(spec.seed, &["world"]);
        let inc = spec.inclusion;
        let draw = |rng: &mut StreamRng, base: f64, malicious_bias: f64| {
            let base = (base * rng.random_range(0.25..1.75)).min(1.0);
            let mut train = [base, base];
            if rng.random_bool(inc.discriminative_fraction) {
                let lean = if rng.random_bool(malicious_bias) { 1 } else { 0 };
                train[lean] = (base + inc.separation * rng.random_range(0.5..1.5)).min(0.95);
            }
            let mut test = train;
            for p in &mut test {
                *p = (*p + inc.test_drift * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0);
            }
            ClassProbs { train, test }
        };
        let items = |rng: &mut StreamRng, names: &[String]| -> Vec<VocabItem<String>> {
            names
                .iter()
                .map(|n| VocabItem {
                    value: n.clone(),
                    probs: draw(rng, inc.base_rate, 0.5),
                })
                .collect()
        };
        let features = items(
            &mut rng,
            &catalog
                .hardware_features
                .iter()
                .chain(&catalog.software_features)
                .cloned()
                .collect::<Vec<_>>(),
        );
        let activity_actions = items(&mut rng, &catalog.activity_actions);
        let broadcast_actions = items(&mut rng, &catalog.broadcast_actions);
        let categories = items(&mut rng, &catalog.categories);

        let custom = (0..spec.custom_permission_count).map(|k| Permission {
            name: format!("com.vendor{}.permission.CUSTOM_{k}", k % 7),
            protection_level: ProtectionLevel::Signature,
        });
        let permissions = catalog
            .permissions
            .iter()
            .cloned()
            .chain(custom)
            .map(|p| {
                let bias = if p.protection_level == ProtectionLevel::Dangerous {
                    0.8
                } else {
                    0.5
                };
                VocabItem {
                    probs: draw(&mut rng, inc.base_rate, bias),
                    value: p,
                }
            })
            .collect();

        let apis = (0..spec.api_vocab_size as u32)
            .map(|api_id| {
                let family_id = rng.random_range(0..spec.family_count) as u16;
                let package_id =
                    family_id as u32 * spec.packages_per_family as u32
                        + rng.random_range(0..spec.packages_per_family) as u32;
                VocabItem {
                    value: ApiCall {
                        api_id,
                        family_id,
                        package_id,
                    },
                    probs: draw(&mut rng, inc.api_base_rate, 0.5),
                }
            })
            .collect();

        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let benign: Vec<f64> = (0..spec.family_count)
            .map(|_| rng.random_range(0.5..1.5))
            .collect();
        let malicious: Vec<f64> = benign
            .iter()
            .map(|w| w * (inc.family_separation * normal.sample(&mut rng)).exp())
            .collect();
        Self {
            features,
            permissions,
            activity_actions,
            broadcast_actions,
            categories,
            apis,
            family_cdf: [cumulative(&benign), cumulative(&malicious)],
        }
    }

    fn family(&self, rng: &mut StreamRng, class: GroundTruth) -> u16 {
        let cdf = &self.family_cdf[class as usize];
        let u: f64 = rng.random();
        cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1) as u16
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn poisson(rng: &mut StreamRng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u32).unwrap_or(0)
}

struct AppPlan<'a> {
    id: String,
    package: String,
    class: GroundTruth,
    test: bool,
    spec: &'a CorpusSpec,
}

fn generate_app(world: &World, plan: &AppPlan<'_>, rng: &mut StreamRng) -> ApkModel {
    let (class, test) = (plan.class, plan.test);
    let mut pick = |p: &ClassProbs| rng.random_bool(p.get(class, test));
    let uses_features = world
        .features
        .iter()
        .filter(|i| pick(&i.probs))
        .map(|i| i.value.clone())
        .collect();
    let permissions = world
        .permissions
        .iter()
        .filter(|i| pick(&i.probs))
        .map(|i| i.value.clone())
        .collect();
    let activity_actions: Vec<String> = world
        .activity_actions
        .iter()
        .filter(|i| pick(&i.probs))
        .map(|i| i.value.clone())
        .collect();
    let broadcast_actions: Vec<String> = world
        .broadcast_actions
        .iter()
        .filter(|i| pick(&i.probs))
        .map(|i| i.value.clone())
        .collect();
    let categories: Vec<String> = world
        .categories
        .iter()
        .filter(|i| pick(&i.probs))
        .map(|i| i.value.clone())
        .collect();

    let mut code = CodeGraph::default();
    let mut next_id: FunctionId = 0;
    let mut kinds = vec![ComponentKind::Activity];
    for kind in [ComponentKind::Service, ComponentKind::Receiver, ComponentKind::Provider] {
        let n = poisson(rng, plan.spec.richness.of(kind).mean_count);
        kinds.extend(std::iter::repeat_n(kind, n as usize));
    }
    let mut per_kind = HashMap::new();
    for kind in kinds {
        let k = per_kind.entry(kind).or_insert(0u32);
        let name = if kind == ComponentKind::Activity {
            format!("{}.MainActivity", plan.package)
        } else {
            format!("{}.{}{}", plan.package, kind.class_suffix(), k)
        };
        *k += 1;
        let richness = plan.spec.richness.of(kind);
        let n_fn = poisson(rng, richness.mean_functions).max(1);
        let first = next_id;
        next_id += n_fn;
        let functions: Vec<FunctionNode> = (first..next_id)
            .map(|id| FunctionNode {
                id,
                family: world.family(rng, class),
            })
            .collect();
        for f in first..next_id {
            for _ in 0..poisson(rng, plan.spec.edges_per_function) {
                code.edges.push((f, rng.random_range(first..next_id)));
            }
        }
        let api_calls = world
            .apis
            .iter()
            .filter(|a| rng.random_bool(a.probs.get(class, test)))
            .map(|a| a.value)
            .collect();
        code.components.push(CodeComponent {
            kind,
            name,
            classes: poisson(rng, richness.mean_classes).max(1),
            functions,
            api_calls,
            origin: Origin::Original,
        });
    }
    // The launcher activity starts each background component once.
    let entry = code.components[0].functions[0].id;
    for c in &code.components[1..] {
        code.edges.push((entry, c.functions[0].id));
    }

    let mut declared: Vec<DeclaredComponent> = code
        .components
        .iter()
        .map(|c| DeclaredComponent::plain(c.kind, c.name.clone()))
        .collect();
    let main = &mut declared[0];
    main.exported = true;
    main.intent_actions.insert("android.intent.action.MAIN".into());
    main.intent_categories.insert("android.intent.category.LAUNCHER".into());
    main.intent_actions.extend(activity_actions);
    main.intent_categories.extend(categories);
    if !broadcast_actions.is_empty() {
        let idx = match declared.iter().position(|c| c.kind == ComponentKind::Receiver) {
            Some(i) => i,
            None => {
                declared.push(DeclaredComponent::plain(
                    ComponentKind::Receiver,
                    format!("{}.EventReceiver", plan.package),
                ));
                declared.len() - 1
            }
        };
        declared[idx].exported = true;
        declared[idx].intent_actions.extend(broadcast_actions);
    }

    ApkModel {
        id: plan.id.clone(),
        manifest: ManifestModel {
            uses_features,
            permissions,
            declared_components: declared,
        },
        code,
        ground_truth: class,
    }
}

/// Generates benign, malicious and donor applications from `spec`.
///
/// Every application is drawn from its own RNG stream derived from
/// `(spec.seed, role, index)`, so the result is independent of `workers`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    generate_corpus_with(spec, &AndroidCatalog::default_catalog(), parallel::ALL_CORES)
}

pub fn generate_corpus_with(
    spec: &CorpusSpec,
    catalog: &AndroidCatalog,
    workers: usize,
) -> Result<Corpus> {
    spec.validate()?;
    let world = World::new(spec, catalog);
    let role = |tag: &'static str, prefix: &'static str, class: GroundTruth, n: usize, n_test: usize| {
        parallel::map_range(n, workers, |i| {
            let plan = AppPlan {
                id: format!("{tag}-{i:05}"),
                package: format!("com.{prefix}{i}"),
                class,
                test: i >= n - n_test,
                spec,
            };
            let mut rng = rng::derived_stream(spec.seed, &[tag, &i.to_string()]);
            generate_app(&world, &plan, &mut rng)
        })
    };
    let tb = CorpusSpec::test_count(spec.n_benign, spec.test_fraction);
    let tm = CorpusSpec::test_count(spec.n_malicious, spec.test_fraction);
    Ok(Corpus {
        spec: spec.clone(),
        benign: role("benign", "app", GroundTruth::Benign, spec.n_benign, tb),
        malicious: role("malware", "mal", GroundTruth::Malicious, spec.n_malicious, tm),
        donors: role("donor", "donor", GroundTruth::Benign, spec.donor_count, 0),
    })
}

// ---------------------------------------------------------------------------
// Perturbation application
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Applied {
    pub apk: ApkModel,
    /// The perturbation was already reflected in the input; `apk` is unchanged.
    pub already_present: bool,
}

/// Applies one additive perturbation. Randomly named components and process
/// strings are drawn from `rng`.
pub fn apply_perturbation<R: Rng + ?Sized>(apk: &ApkModel, p: &Perturbation, rng: &mut R) -> Applied {
    let mut out = apk.clone();
    let added = apply_in_place(&mut out, p, rng);
    Applied {
        apk: out,
        already_present: !added,
    }
}

/// In-place variant of [`apply_perturbation`]; returns `false` when the
/// perturbation was already present.
pub fn apply_in_place<R: Rng + ?Sized>(apk: &mut ApkModel, p: &Perturbation, rng: &mut R) -> bool {
    let manifest = &mut apk.manifest;
    match (&p.kind, &p.payload) {
        (PerturbationKind::UsesFeature, Payload::Element { name }) => manifest.uses_features.insert(name.clone()),
        (PerturbationKind::Permission, Payload::Permission(perm)) => {
            if manifest.has_permission(&perm.name) {
                false
            } else {
                manifest.permissions.insert(perm.clone())
            }
        }
        (
            kind @ (PerturbationKind::ActivityAction | PerturbationKind::BroadcastAction | PerturbationKind::Category),
            Payload::Element { name },
        ) => {
            let is_category = *kind == PerturbationKind::Category;
            let present = manifest.declared_components.iter().any(|c| {
                if is_category {
                    c.intent_categories.contains(name)
                } else {
                    c.intent_actions.contains(name)
                }
            });
            if present {
                return false;
            }
            let component_kind = if *kind == PerturbationKind::BroadcastAction {
                ComponentKind::Receiver
            } else {
                ComponentKind::Activity
            };
            let mut c = DeclaredComponent::plain(component_kind, random_identifier(rng, IDENTIFIER_LEN));
            if is_category {
                // A category alone never matches; pair it with a private action.
                c.intent_actions.insert(random_identifier(rng, IDENTIFIER_LEN));
                c.intent_categories.insert(name.clone());
            } else {
                c.intent_actions.insert(name.clone());
            }
            c.exported = true;
            c.enabled = true;
            c.process = Some(format!(":{}", random_identifier(rng, IDENTIFIER_LEN)));
            c.data_uri = Some(format!("scheme://{}", random_identifier(rng, 16)));
            manifest.declared_components.push(c);
            true
        }
        (
            PerturbationKind::InjectService | PerturbationKind::InjectReceiver | PerturbationKind::InjectProvider,
            Payload::Component(donor),
        ) => {
            let kind = donor.code.kind;
            let name = &donor.code.name;
            if manifest.find_component(kind, name).is_some()
                || apk.code.components.iter().any(|c| c.kind == kind && &c.name == name)
            {
                return false;
            }
            let mut declared = donor.declared.clone();
            declared.exported = true;
            declared.enabled = true;
            declared.process = Some(format!(":{}", random_identifier(rng, IDENTIFIER_LEN)));
            manifest.declared_components.push(declared);

            let base = apk.code.next_function_id();
            let remap: HashMap<FunctionId, FunctionId> = donor
                .code
                .functions
                .iter()
                .enumerate()
                .map(|(i, f)| (f.id, base + i as FunctionId))
                .collect();
            let mut code = donor.code.clone();
            for f in &mut code.functions {
                f.id = remap[&f.id];
            }
            code.origin = Origin::Injected;
            apk.code.components.push(code);
            apk.code.edges.extend(
                donor
                    .edges
                    .iter()
                    .filter_map(|(a, b)| Some((*remap.get(a)?, *remap.get(b)?))),
            );
            true
        }
        _ => false,
    }
}

/// True iff every manifest element, component, function, api call and edge of
/// `original` is also present in `perturbed`.
pub fn contains(original: &ApkModel, perturbed: &ApkModel) -> bool {
    let (om, pm) = (&original.manifest, &perturbed.manifest);
    if !om.uses_features.is_subset(&pm.uses_features) || !om.permissions.is_subset(&pm.permissions) {
        return false;
    }
    let declared_ok = om
        .declared_components
        .iter()
        .all(|c| pm.find_component(c.kind, &c.name) == Some(c));
    if !declared_ok {
        return false;
    }
    let components_ok = original.code.components.iter().all(|oc| {
        perturbed
            .code
            .components
            .iter()
            .find(|pc| pc.kind == oc.kind && pc.name == oc.name)
            .is_some_and(|pc| {
                let fns: HashSet<_> = pc.functions.iter().collect();
                let apis: HashSet<_> = pc.api_calls.iter().collect();
                oc.functions.iter().all(|f| fns.contains(f)) && oc.api_calls.iter().all(|a| apis.contains(a))
            })
    });
    if !components_ok {
        return false;
    }
    let edges: HashSet<_> = perturbed.code.edges.iter().collect();
    original.code.edges.iter().all(|e| edges.contains(e))
}

/// Functional-consistency check used by the harness: containment plus isolation
/// of injected code and the registration attributes of injected components.
pub fn is_consistent_perturbation(original: &ApkModel, perturbed: &ApkModel) -> bool {
    if !contains(original, perturbed) || !perturbed.code.cross_origin_edges().is_empty() {
        return false;
    }
    let original_names: HashSet<_> = original
        .manifest
        .declared_components
        .iter()
        .map(|c| (c.kind, c.name.as_str()))
        .collect();
    perturbed
        .manifest
        .declared_components
        .iter()
        .filter(|c| !original_names.contains(&(c.kind, c.name.as_str())))
        .all(|c| c.exported && c.enabled && c.process.as_deref().is_some_and(|p| !p.is_empty()))
}
