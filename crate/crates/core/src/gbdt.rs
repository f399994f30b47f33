//! Histogram gradient-boosted regression trees with squared-error loss.
//!
//! Two layouts are supported. In single-output mode a [`Booster`] holds one
//! scalar-leaf tree sequence per target, all trained against the same binned
//! matrix. In multi-output mode it holds one sequence of vector-leaf trees
//! whose split gain is summed over every target.

mod bins;
mod io;
mod split;
mod train;
mod tree;

pub use bins::{build_bins, BinMapper, BinStore, BinnedMatrix};
pub use io::{load_booster, read_booster, save_booster, write_booster, FileSink, MemorySink, TreeSink, MAGIC, VERSION};
pub use split::{find_best_split, SplitInfo};
pub use train::{train_booster, train_booster_into, TrainSummary};
pub use tree::{Booster, Node, Tree};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no targets to fit")]
    EmptyTargets,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("corrupt booster file: {0}")]
    CorruptFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GbdtError>;

/// Single-output (one scalar sequence per target) or multi-output trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TreeMode {
    #[default]
    So,
    Mo,
}

impl TreeMode {
    pub(crate) fn code(self) -> u32 {
        match self {
            TreeMode::So => 0,
            TreeMode::Mo => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(TreeMode::So),
            1 => Some(TreeMode::Mo),
            _ => None,
        }
    }

    /// With a single output both layouts describe the same model; it is
    /// always stored as single-output.
    pub fn canonical(self, m: usize) -> Self {
        if m == 1 {
            TreeMode::So
        } else {
            self
        }
    }
}

impl std::str::FromStr for TreeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "so" => Ok(TreeMode::So),
            "mo" => Ok(TreeMode::Mo),
            other => Err(format!("unknown tree mode {other:?} (expected so or mo)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_tree: usize,
    pub max_depth: usize,
    pub eta: f32,
    pub lambda: f64,
    /// Minimum split gain.
    pub gamma: f64,
    pub max_bins: usize,
    /// Early-stopping patience in rounds; 0 disables early stopping.
    pub n_es: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_tree: 100,
            max_depth: 7,
            eta: 0.3,
            lambda: 0.0,
            gamma: 0.0,
            max_bins: 256,
            n_es: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GbdtError::InvalidParams(msg));
        if self.n_tree < 1 {
            return bad("n_tree must be at least 1".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(2..=65536).contains(&self.max_bins) {
            return bad(format!("max_bins must be in [2, 65536], got {}", self.max_bins));
        }
        if self.max_depth > 30 {
            return bad(format!("max_depth {} is too large", self.max_depth));
        }
        Ok(())
    }
}
