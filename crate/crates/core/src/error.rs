use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid corpus spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("invalid apk model `{id}`: {reason}")]
    InvalidApk { id: String, reason: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("api {0} is missing from the cluster map")]
    UnmappedApi(u32),

    #[error("dataset contains a single class; need both benign and malicious samples")]
    SingleClass,

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("feature dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("perturbation set would be empty: no eligible catalog entries and no donors")]
    EmptyPerturbationSet,

    #[error("code perturbations carry no keywords")]
    NoKeywords,

    #[error("keyword set is empty")]
    EmptyKeywordSet,

    #[error("groups belong to different subtrees")]
    SubtreeMismatch,

    #[error("perturbation selection tree has no groups")]
    NoGroups,

    #[error("perturbation selection tree is empty")]
    EmptyTree,

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("no applicable reports (N_t = 0)")]
    NoApplicableReports,

    #[error("cannot compute a CDF of an empty sample")]
    EmptySample,

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
