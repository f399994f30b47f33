//! Sample generation from a trained store.
//!
//! Labels are drawn first and sorted. Each class block starts from Gaussian
//! noise and is integrated from `t = 1` towards the smallest trained time
//! with explicit Euler steps, one booster call per step, then mapped back to
//! data units by the class scaler.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{job_rng, ForestError, LabelMode, Method, ModelStore, TAG_GEN_NOISE, TAG_LABELS};
use crate::gbdt::{Booster, GbdtError};
use crate::tabular::{Dataset, TabularError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("store was trained with n_t = {trained}, generation asked for {requested}")]
    NTGridMismatch { trained: usize, requested: usize },
    #[error("store incomplete, missing: {}", .0.join(", "))]
    StoreIncomplete(Vec<String>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] ForestError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_samples: usize,
    /// Must equal the trained `n_t` when given.
    pub n_t_gen: Option<usize>,
    pub label_mode: LabelMode,
    pub seed: u64,
    /// Take `n_t - 1` steps so the integrated time is exactly the trained
    /// span, instead of `n_t` steps.
    pub strict_time: bool,
    /// Expected feature count, checked against the store when given.
    pub p: Option<usize>,
    /// Worker threads for class blocks; 0 uses every available CPU.
    pub n_jobs: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_t_gen: None,
            label_mode: LabelMode::Multinomial,
            seed: 0,
            strict_time: false,
            p: None,
            n_jobs: 1,
        }
    }
}

/// Class labels for `n` samples, sorted ascending.
///
/// `Empirical` gives each class its share of `n` by largest-remainder
/// apportionment, ties to the lower class. `Multinomial` draws `n`
/// independent labels with probabilities proportional to `class_counts`.
pub fn sample_labels<R: Rng + ?Sized>(class_counts: &[usize], n: usize, mode: LabelMode, rng: &mut R) -> Vec<u32> {
    let total: u128 = class_counts.iter().map(|&c| c as u128).sum();
    if total == 0 || n == 0 {
        return vec![0; n];
    }
    let per_class: Vec<usize> = match mode {
        LabelMode::Empirical => {
            let mut alloc: Vec<usize> = Vec::with_capacity(class_counts.len());
            let mut rem: Vec<(u128, usize)> = Vec::with_capacity(class_counts.len());
            for (c, &count) in class_counts.iter().enumerate() {
                let q = n as u128 * count as u128;
                alloc.push((q / total) as usize);
                rem.push((q % total, c));
            }
            let left = n - alloc.iter().sum::<usize>();
            rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, c) in rem.iter().take(left) {
                alloc[c] += 1;
            }
            alloc
        }
        LabelMode::Multinomial => {
            let dist = WeightedIndex::new(class_counts).expect("positive total weight");
            let mut counts = vec![0; class_counts.len()];
            for _ in 0..n {
                counts[dist.sample(rng)] += 1;
            }
            counts
        }
    };
    per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c as u32, k))
        .collect()
}

/// Timing and call counts of a generation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    /// Booster predict calls per class.
    pub predict_calls: Vec<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub stats: GenStats,
}

struct Plan {
    /// Grid indices visited, from `t = 1` down.
    steps: Vec<usize>,
    h: f32,
    method: Method,
}

fn plan(store: &ModelStore, cfg: &GenConfig) -> Result<Plan> {
    let m = store.manifest();
    if cfg.n_samples == 0 {
        return Err(SamplerError::InvalidConfig("n_samples must be at least 1".into()));
    }
    if let Some(req) = cfg.n_t_gen {
        if req != m.n_t() {
            return Err(SamplerError::NTGridMismatch {
                trained: m.n_t(),
                requested: req,
            });
        }
    }
    if let Some(p) = cfg.p {
        if p != m.p {
            return Err(SamplerError::ShapeMismatch(format!("store has p = {}, requested {p}", m.p)));
        }
    }
    let n_t = m.n_t();
    let lo = if cfg.strict_time { 1 } else { 0 };
    let hp = &m.hyperparams;
    Ok(Plan {
        steps: (lo..n_t).rev().collect(),
        h: ((1.0 - hp.eps) / (n_t - 1) as f64) as f32,
        method: hp.method,
    })
}

fn load(store: &ModelStore, ti: usize, c: usize) -> Result<Booster> {
    let path = store.booster_path(ti, c);
    match store.load_booster(ti, c) {
        Err(ForestError::Gbdt(GbdtError::Io(e))) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(SamplerError::StoreIncomplete(vec![path.display().to_string()]))
        }
        other => Ok(other?),
    }
}

/// Integrates one block of class `c` in place; returns the predict-call count.
fn integrate(store: &ModelStore, plan: &Plan, c: usize, x: &mut [f32]) -> Result<usize> {
    let hp = &store.manifest().hyperparams;
    let grid = &store.manifest().time_grid;
    let mut v = Vec::with_capacity(x.len());
    for &ti in &plan.steps {
        let booster = load(store, ti, c)?;
        booster.predict_into(x, &mut v)?;
        match plan.method {
            Method::Flow => {
                for (a, &d) in x.iter_mut().zip(&v) {
                    *a -= plan.h * d;
                }
            }
            Method::Diffusion => {
                let k = (0.5 * plan.h as f64 * hp.schedule.beta(grid[ti] as f64)) as f32;
                for (a, &s) in x.iter_mut().zip(&v) {
                    *a += k * (*a + s);
                }
            }
        }
    }
    store.manifest().scaler.invert_block(c as u32, x);
    Ok(plan.steps.len())
}

/// Streams generated rows in blocks of at most `batch_size`. Blocks are
/// consecutive ranges of the label-sorted output; within a block each class
/// segment is integrated with that class's boosters.
pub struct BatchIter<'a> {
    store: &'a ModelStore,
    plan: Plan,
    labels: Vec<u32>,
    class_ranges: Vec<Range<usize>>,
    rngs: Vec<ChaCha8Rng>,
    pos: usize,
    batch: usize,
    workers: usize,
    calls: Vec<usize>,
}

impl BatchIter<'_> {
    /// Call counts accumulated so far.
    pub fn predict_calls(&self) -> &[usize] {
        &self.calls
    }

    fn next_block(&mut self) -> Result<Dataset> {
        let m = self.store.manifest();
        let p = m.p;
        let end = (self.pos + self.batch).min(self.labels.len());
        let range = self.pos..end;
        self.pos = end;

        let mut segments = Vec::new();
        for (c, cr) in self.class_ranges.iter().enumerate() {
            let lo = cr.start.max(range.start);
            let hi = cr.end.min(range.end);
            if lo < hi {
                let rng = &mut self.rngs[c];
                let x: Vec<f32> = (0..(hi - lo) * p).map(|_| rng.sample(StandardNormal)).collect();
                segments.push((c, lo - range.start, x));
            }
        }

        let next = AtomicUsize::new(0);
        let done = Mutex::new(Vec::with_capacity(segments.len()));
        let first_err = Mutex::new(None);
        let segs = Mutex::new(segments.into_iter().map(Some).collect::<Vec<_>>());
        let n_seg = segs.lock().unwrap().len();
        std::thread::scope(|s| {
            for _ in 0..self.workers.clamp(1, n_seg.max(1)) {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    if k >= n_seg {
                        break;
                    }
                    let (c, off, mut x) = segs.lock().unwrap()[k].take().expect("segment taken once");
                    match integrate(self.store, &self.plan, c, &mut x) {
                        Ok(calls) => done.lock().unwrap().push((k, c, off, x, calls)),
                        Err(e) => {
                            let mut fe = first_err.lock().unwrap();
                            if fe.as_ref().is_none_or(|(k0, _)| k < *k0) {
                                *fe = Some((k, e));
                            }
                        }
                    }
                });
            }
        });
        if let Some((_, e)) = first_err.into_inner().unwrap() {
            return Err(e);
        }
        let mut done = done.into_inner().unwrap();
        done.sort_by_key(|d| d.0);
        let mut features = vec![0f32; range.len() * p];
        for (_, c, off, x, calls) in done {
            features[off * p..off * p + x.len()].copy_from_slice(&x);
            self.calls[c] += calls;
        }
        let mut ds = Dataset::new_allow_missing(features, p, self.labels[range].to_vec(), m.n_y())?;
        ds.feature_names = m.feature_names.clone();
        ds.label_name = m.label_name.clone();
        ds.class_names = m.class_ids.clone();
        Ok(ds)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Dataset>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.labels.len() {
            return None;
        }
        Some(self.next_block())
    }
}

/// Generation in blocks of at most `batch_size` rows. Concatenating the
/// blocks gives the same rows as [`generate`] with the same config.
pub fn generate_batched<'a>(store: &'a ModelStore, cfg: &GenConfig, batch_size: usize) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(SamplerError::InvalidConfig("batch size must be at least 1".into()));
    }
    let plan = plan(store, cfg)?;
    let m = store.manifest();
    let mut rng = job_rng(cfg.seed, 0, 0, TAG_LABELS);
    let labels = sample_labels(&m.class_counts, cfg.n_samples, cfg.label_mode, &mut rng);
    let mut class_ranges = Vec::with_capacity(m.n_y());
    let mut start = 0;
    for c in 0..m.n_y() {
        let end = start + labels[start..].partition_point(|&l| l as usize == c);
        class_ranges.push(start..end);
        start = end;
    }
    let workers = match cfg.n_jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    Ok(BatchIter {
        store,
        plan,
        labels,
        class_ranges,
        rngs: (0..m.n_y()).map(|c| job_rng(cfg.seed, 0, c as u32, TAG_GEN_NOISE)).collect(),
        pos: 0,
        batch: batch_size,
        workers,
        calls: vec![0; m.n_y()],
    })
}

/// Generates `cfg.n_samples` rows with sorted labels in data units.
pub fn generate(store: &ModelStore, cfg: &GenConfig) -> Result<Generated> {
    let start = Instant::now();
    let mut it = generate_batched(store, cfg, cfg.n_samples.max(1))?;
    let dataset = it.next().expect("at least one row requested")?;
    Ok(Generated {
        dataset,
        stats: GenStats {
            predict_calls: it.calls,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn empirical_examples() {
        assert_eq!(sample_labels(&[50, 50], 10, LabelMode::Empirical, &mut rng()), vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(sample_labels(&[2, 1], 4, LabelMode::Empirical, &mut rng()), vec![0, 0, 0, 1]);
        // equal remainders go to the lower class
        assert_eq!(sample_labels(&[1, 1, 1], 2, LabelMode::Empirical, &mut rng()), vec![0, 1]);
    }

    #[test]
    fn single_class() {
        for mode in [LabelMode::Empirical, LabelMode::Multinomial] {
            assert_eq!(sample_labels(&[1], 7, mode, &mut rng()), vec![0; 7]);
        }
    }

    #[test]
    fn multinomial_varies_with_seed() {
        let a = sample_labels(&[5, 5, 5], 90, LabelMode::Multinomial, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_labels(&[5, 5, 5], 90, LabelMode::Multinomial, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(a, b);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }

    proptest! {
        #[test]
        fn empirical_apportionment(counts in prop::collection::vec(1usize..50, 1..8), n in 0usize..500) {
            let labels = sample_labels(&counts, n, LabelMode::Empirical, &mut rng());
            prop_assert_eq!(labels.len(), n);
            prop_assert!(labels.windows(2).all(|w| w[0] <= w[1]));
            let total: usize = counts.iter().sum();
            for (c, &k) in counts.iter().enumerate() {
                let got = labels.iter().filter(|&&l| l as usize == c).count() as f64;
                let quota = n as f64 * k as f64 / total as f64;
                prop_assert!((got - quota).abs() < 1.0, "class {} got {} quota {}", c, got, quota);
            }
        }
    }
}
