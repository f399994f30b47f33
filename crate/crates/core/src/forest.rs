//! Training of per-timestep, per-class tree ensembles for flow matching and
//! score-based diffusion.
//!
//! The data is sorted by class, scaled, duplicated `k` times and paired with
//! one draw of Gaussian noise. These buffers are built once and shared
//! read-only. Every `(t, y)` job then forms its noisy inputs for one class at
//! one time, trains a single booster over all `p` targets, streams it to the
//! store and frees everything it allocated.

mod buffers;
mod schedule;
mod store;
mod train;

pub use buffers::{job_rng, TrainingBuffers};
pub(crate) use buffers::{TAG_GEN_NOISE, TAG_LABELS};
pub use schedule::{make_targets, make_xt, time_grid, VpSchedule};
pub use store::{booster_file_name, JobRecord, Manifest, ModelStore, FINGERPRINT_FILE, MANIFEST_FILE, MANIFEST_VERSION};
pub use train::{train_all, TrainStats, Trained};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbdt::{GbdtError, GbdtParams, TreeMode};
use crate::tabular::{ScalerMode, TabularError};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("invalid hyperparameter: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("diffusion target undefined at t = {0}")]
    DegenerateTime(f32),
    #[error("training failed for t_index {t_index}, y_index {y_index}: {reason}")]
    TrainingFailed { t_index: usize, y_index: usize, reason: String },
    #[error("store {0} was written with different data or hyperparameters")]
    StoreMismatch(String),
    #[error("store incomplete, missing: {}", .0.join(", "))]
    StoreIncomplete(Vec<String>),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Flow,
    Diffusion,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flow" => Ok(Method::Flow),
            "diffusion" => Ok(Method::Diffusion),
            other => Err(format!("unknown method {other:?} (expected flow or diffusion)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Multinomial,
    Empirical,
}

impl std::str::FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "multinomial" => Ok(LabelMode::Multinomial),
            "empirical" => Ok(LabelMode::Empirical),
            other => Err(format!("unknown label mode {other:?} (expected multinomial or empirical)")),
        }
    }
}

/// Model hyperparameters. The runtime fields at the end are not serialized,
/// so they never affect the store contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub method: Method,
    pub tree_mode: TreeMode,
    pub n_t: usize,
    pub k: usize,
    /// Smallest training time.
    pub eps: f64,
    pub schedule: VpSchedule,
    pub gbdt: GbdtParams,
    pub scaler_mode: ScalerMode,
    pub label_mode: LabelMode,
    pub seed: u64,
    /// Worker threads; 0 uses every available CPU.
    #[serde(skip)]
    pub n_jobs: usize,
    /// Materialize every timestep up front and keep all boosters in memory.
    #[serde(skip)]
    pub naive_mode: bool,
    /// Keep the shared buffers in memory-mapped temporary files.
    #[serde(skip)]
    pub file_backed: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::new(Method::Flow)
    }
}

impl HyperParams {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            tree_mode: TreeMode::So,
            n_t: 50,
            k: 100,
            eps: match method {
                Method::Flow => 0.0,
                Method::Diffusion => 0.001,
            },
            schedule: VpSchedule::default(),
            gbdt: GbdtParams::default(),
            scaler_mode: ScalerMode::PerClass,
            label_mode: LabelMode::Multinomial,
            seed: 0,
            n_jobs: 0,
            naive_mode: false,
            file_backed: false,
        }
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        let bad = |m: String| Err(ForestError::InvalidParams(m));
        if self.n_t < 2 {
            return bad(format!("n_t must be at least 2, got {}", self.n_t));
        }
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.eps) {
            return bad(format!("eps must be in [0, 1), got {}", self.eps));
        }
        if self.method == Method::Diffusion && self.eps <= 0.0 {
            return bad("diffusion needs eps > 0".into());
        }
        let s = &self.schedule;
        if !(s.beta_min >= 0.0 && s.beta_max > s.beta_min && s.beta_max.is_finite()) {
            return bad(format!("bad beta schedule {} .. {}", s.beta_min, s.beta_max));
        }
        self.gbdt.validate()?;
        Ok(())
    }

    pub fn time_grid(&self) -> Vec<f32> {
        time_grid(self.n_t, self.eps)
    }

    pub(crate) fn workers(&self) -> usize {
        match self.n_jobs {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let hp = HyperParams::new(Method::Diffusion);
        assert_eq!(hp.eps, 0.001);
        hp.validate().unwrap();
        let flow = HyperParams::default();
        assert_eq!((flow.eps, flow.n_t, flow.k), (0.0, 50, 100));
        for bad in [
            HyperParams { n_t: 1, ..flow.clone() },
            HyperParams { k: 0, ..flow.clone() },
            HyperParams { eps: 1.0, ..flow.clone() },
            HyperParams { eps: 0.0, ..hp.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn runtime_fields_not_serialized() {
        let a = HyperParams::default();
        let b = HyperParams {
            n_jobs: 8,
            naive_mode: true,
            file_backed: true,
            ..a.clone()
        };
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
