use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ForestError, HyperParams};
use crate::gbdt::{load_booster, Booster};
use crate::tabular::PerClassScaler;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINGERPRINT_FILE: &str = "fingerprint.json";

pub fn booster_file_name(t_index: usize, y_index: usize) -> String {
    format!("model_t{t_index:04}_y{y_index:04}.fgb")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub t_index: usize,
    pub y_index: usize,
    pub file: String,
    pub best_iterations: Vec<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub hyperparams: HyperParams,
    pub p: usize,
    pub time_grid: Vec<f32>,
    pub class_ids: Vec<String>,
    pub class_counts: Vec<usize>,
    pub scaler: PerClassScaler,
    pub feature_names: Vec<String>,
    pub label_name: Option<String>,
    /// Ordered by `t_index`, then `y_index`.
    pub jobs: Vec<JobRecord>,
}

impl Manifest {
    pub fn n_t(&self) -> usize {
        self.time_grid.len()
    }

    pub fn n_y(&self) -> usize {
        self.class_counts.len()
    }

    pub fn job(&self, t_index: usize, y_index: usize) -> &JobRecord {
        &self.jobs[t_index * self.n_y() + y_index]
    }

    pub(crate) fn write(&self, dir: &Path) -> Result<(), ForestError> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    fn check(&self) -> Result<(), ForestError> {
        let bad = |m: String| Err(ForestError::BadManifest(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.n_t() != self.hyperparams.n_t {
            return bad("time grid length differs from n_t".into());
        }
        if self.class_ids.len() != self.n_y() || self.n_y() == 0 {
            return bad("class ids and counts disagree".into());
        }
        if self.jobs.len() != self.n_t() * self.n_y() {
            return bad(format!("{} jobs listed, expected {}", self.jobs.len(), self.n_t() * self.n_y()));
        }
        for (i, j) in self.jobs.iter().enumerate() {
            if (j.t_index, j.y_index) != (i / self.n_y(), i % self.n_y()) {
                return bad(format!("job {i} out of order"));
            }
            if j.file.contains(['/', '\\']) {
                return bad(format!("job file {:?} is not a plain name", j.file));
            }
        }
        if self.scaler.n_features() != self.p || self.feature_names.len() != self.p {
            return bad("feature count mismatch".into());
        }
        Ok(())
    }
}

/// A trained model directory: manifest plus one booster file per job.
#[derive(Debug, Clone)]
pub struct ModelStore {
    dir: PathBuf,
    manifest: Manifest,
}

impl ModelStore {
    /// Opens a store, checking that the manifest is consistent and that
    /// every booster file it lists exists.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ForestError> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ForestError::StoreIncomplete(vec![path.display().to_string()]))
            }
            Err(e) => return Err(e.into()),
        };
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        manifest.check()?;
        let missing: Vec<String> = manifest
            .jobs
            .iter()
            .filter(|j| !dir.join(&j.file).is_file())
            .map(|j| j.file.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ForestError::StoreIncomplete(missing));
        }
        Ok(Self { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn booster_path(&self, t_index: usize, y_index: usize) -> PathBuf {
        self.dir.join(&self.manifest.job(t_index, y_index).file)
    }

    pub fn load_booster(&self, t_index: usize, y_index: usize) -> Result<Booster, ForestError> {
        let b = load_booster(self.booster_path(t_index, y_index))?;
        let p = self.manifest.p;
        if b.n_features() != p || b.n_outputs() != p {
            return Err(ForestError::BadManifest(format!(
                "booster ({t_index}, {y_index}) has shape {}x{}, expected {p}x{p}",
                b.n_features(),
                b.n_outputs()
            )));
        }
        Ok(b)
    }
}
