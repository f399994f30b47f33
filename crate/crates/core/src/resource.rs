//! Memory estimators, run monitoring, allocation accounting and synthetic
//! benchmark data.

pub mod alloc;
mod monitor;

pub use monitor::{monitor_run, monitor_run_with, MonitorConfig, ResourceReport, Sample};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::Dataset;

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("bad parameter: {0}")]
    BadParam(String),
}

/// Bytes per node assumed by the model-store estimate.
pub const MODEL_NODE_BYTES: u64 = 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Every timestep's noisy inputs materialized at once.
    NaiveXt,
    /// Each worker holding its own copy of the main buffer.
    NaiveShared,
    /// All trained trees resident at once.
    ModelStore,
    /// Duplicated data, noise and targets.
    MainBuffers,
    /// One boolean class mask per class over the duplicated rows.
    BoolMasks,
    /// Saving from building one class slice at a time per job.
    IteratorSaving,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::NaiveXt,
        Scenario::NaiveShared,
        Scenario::ModelStore,
        Scenario::MainBuffers,
        Scenario::BoolMasks,
        Scenario::IteratorSaving,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::NaiveXt => "naive_xt",
            Scenario::NaiveShared => "naive_shared",
            Scenario::ModelStore => "model_store",
            Scenario::MainBuffers => "main_buffers",
            Scenario::BoolMasks => "bool_masks",
            Scenario::IteratorSaving => "iterator_saving",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateParams {
    pub n: u64,
    pub p: u64,
    pub n_y: u64,
    pub n_t: u64,
    pub k: u64,
    pub n_jobs: u64,
    pub n_tree: u64,
    pub depth: u32,
    /// Bytes per element, 4 or 8.
    pub w: u64,
}

impl EstimateParams {
    /// Parameters of the 120 800-row, 533-feature, 15-class physics dataset
    /// with fp64 storage.
    pub fn pions() -> Self {
        Self {
            n: 120_800,
            p: 533,
            n_y: 15,
            n_t: 50,
            k: 100,
            n_jobs: 40,
            n_tree: 100,
            depth: 7,
            w: 8,
        }
    }

    fn check(&self) -> Result<(), ResourceError> {
        let fields = [
            ("n", self.n),
            ("p", self.p),
            ("n_y", self.n_y),
            ("n_t", self.n_t),
            ("k", self.k),
            ("n_jobs", self.n_jobs),
            ("n_tree", self.n_tree),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ResourceError::BadParam(format!("{name} must be positive")));
        }
        if self.w != 4 && self.w != 8 {
            return Err(ResourceError::BadParam(format!("w must be 4 or 8, got {}", self.w)));
        }
        if self.depth > 40 {
            return Err(ResourceError::BadParam(format!("depth {} too large", self.depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemEstimate {
    pub scenario: Scenario,
    pub params: EstimateParams,
    pub bytes: u128,
    pub human: String,
}

/// Closed-form byte count of a scenario.
pub fn estimate(scenario: Scenario, params: &EstimateParams) -> Result<MemEstimate, ResourceError> {
    params.check()?;
    let EstimateParams {
        n,
        p,
        n_y,
        n_t,
        k,
        n_jobs,
        n_tree,
        depth,
        w,
    } = *params;
    let (n, p, n_y, n_t, k, n_jobs, n_tree, w) = (
        n as u128,
        p as u128,
        n_y as u128,
        n_t as u128,
        k as u128,
        n_jobs as u128,
        n_tree as u128,
        w as u128,
    );
    let bytes = match scenario {
        Scenario::NaiveXt => n_t * n * k * p * w,
        Scenario::NaiveShared => n_t * p * (n * k * p * w),
        Scenario::ModelStore => n_t * n_y * p * n_tree * ((1u128 << (depth + 1)) - 1) * MODEL_NODE_BYTES as u128,
        Scenario::MainBuffers => 3 * n * k * p * w,
        Scenario::BoolMasks => n * k * n_y,
        Scenario::IteratorSaving => n_jobs * (n / n_y) * k * p * w,
    };
    Ok(MemEstimate {
        scenario,
        params: *params,
        bytes,
        human: format_iec(bytes),
    })
}

pub fn estimate_all(params: &EstimateParams) -> Result<Vec<MemEstimate>, ResourceError> {
    Scenario::ALL.iter().map(|&s| estimate(s, params)).collect()
}

const UNITS: [&str; 7] = ["B", "KiB", "MiB", "GiB", "TiB", "PiB", "EiB"];

/// Formats a byte count with two decimals in the largest base-1024 unit that
/// keeps the value at least 1.
pub fn format_iec(bytes: u128) -> String {
    let mut v = bytes as f64;
    let mut u = 0;
    while v >= 1024.0 && u < UNITS.len() - 1 {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 {
        format!("{bytes} B")
    } else {
        format!("{v:.2} {}", UNITS[u])
    }
}

/// Parses strings like `2.34 TiB` or `512 B` back to bytes.
pub fn parse_iec(s: &str) -> Option<f64> {
    let mut parts = s.split_whitespace();
    let v: f64 = parts.next()?.parse().ok()?;
    let unit = parts.next().unwrap_or("B");
    let pow = UNITS.iter().position(|u| u.eq_ignore_ascii_case(unit))?;
    Some(v * 1024f64.powi(pow as i32))
}

/// Standard-normal fp32 features with uniformly drawn labels. Every class
/// occurs at least once, so `n >= n_y` is required.
pub fn synth_dataset(n: usize, p: usize, n_y: usize, seed: u64) -> Result<Dataset, ResourceError> {
    if n == 0 || p == 0 || n_y == 0 {
        return Err(ResourceError::BadParam("sizes must be positive".into()));
    }
    if n < n_y {
        return Err(ResourceError::BadParam(format!("n = {n} is smaller than n_y = {n_y}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f32> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let mut labels: Vec<u32> = (0..n)
        .map(|i| if i < n_y { i as u32 } else { rng.random_range(0..n_y as u32) })
        .collect();
    labels.shuffle(&mut rng);
    let mut ds = Dataset::new(features, p, labels, n_y).map_err(|e| ResourceError::BadParam(e.to_string()))?;
    if n_y > 1 {
        ds.label_name = Some("y".into());
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pions_with(w: u64) -> EstimateParams {
        EstimateParams { w, ..EstimateParams::pions() }
    }

    fn within(bytes: u128, quoted: f64, unit: u32) -> bool {
        let q = quoted * 1024f64.powi(unit as i32);
        ((bytes as f64) - q).abs() / q <= 0.005
    }

    #[test]
    fn paper_figures() {
        let p8 = pions_with(8);
        let e = |s| estimate(s, &p8).unwrap();
        assert_eq!(e(Scenario::NaiveXt).human, "2.34 TiB");
        assert!(within(e(Scenario::NaiveXt).bytes, 2.34, 4));
        assert!(within(e(Scenario::NaiveShared).bytes, 1.22, 5));
        assert!(within(e(Scenario::ModelStore).bytes, 503.0, 3));
        assert!(within(e(Scenario::MainBuffers).bytes, 144.0, 3));
        assert!(within(e(Scenario::BoolMasks).bytes, 173.0, 2));
        assert!(within(e(Scenario::IteratorSaving).bytes, 128.0, 3));
        let e4 = estimate(Scenario::IteratorSaving, &pions_with(4)).unwrap();
        assert!(within(e4.bytes, 64.0, 3));
    }

    #[test]
    fn exact_counts() {
        let p = pions_with(8);
        // n_t n K p w
        assert_eq!(estimate(Scenario::NaiveXt, &p).unwrap().bytes, 50 * 120_800 * 100 * 533 * 8);
        assert_eq!(estimate(Scenario::BoolMasks, &p).unwrap().bytes, 120_800 * 100 * 15);
        // 120800 / 15 floors to 8053 rows per class
        assert_eq!(estimate(Scenario::IteratorSaving, &p).unwrap().bytes, 40 * 8053 * 100 * 533 * 8);
        assert_eq!(estimate(Scenario::ModelStore, &p).unwrap().bytes, 50 * 15 * 533 * 100 * 255 * 53);
    }

    #[test]
    fn bad_params() {
        let mut p = pions_with(8);
        p.w = 2;
        assert!(estimate(Scenario::NaiveXt, &p).is_err());
        let mut p = pions_with(8);
        p.n = 0;
        assert!(estimate(Scenario::NaiveXt, &p).is_err());
    }

    #[test]
    fn doubling_p_quadruples_shared() {
        let p = pions_with(4);
        let p2 = EstimateParams { p: p.p * 2, ..p };
        let a = estimate(Scenario::NaiveShared, &p).unwrap().bytes;
        let b = estimate(Scenario::NaiveShared, &p2).unwrap().bytes;
        assert_eq!(b, 4 * a);
        let a = estimate(Scenario::MainBuffers, &p).unwrap().bytes;
        let b = estimate(Scenario::MainBuffers, &p2).unwrap().bytes;
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn iec_formatting() {
        assert_eq!(format_iec(512), "512 B");
        assert_eq!(format_iec(1536), "1.50 KiB");
        assert_eq!(format_iec(1 << 30), "1.00 GiB");
    }

    #[test]
    fn synth_defaults_and_stats() {
        let ds = synth_dataset(1000, 10, 10, 1).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.n_y()), (1000, 10, 10));
        for j in 0..10 {
            let mean: f64 = (0..1000).map(|i| ds.row(i)[j] as f64).sum::<f64>() / 1000.0;
            assert!(mean.abs() < 4.0 / (1000f64).sqrt(), "column {j} mean {mean}");
        }
        assert_eq!(ds, synth_dataset(1000, 10, 10, 1).unwrap());
        assert_ne!(ds, synth_dataset(1000, 10, 10, 2).unwrap());
        let u = synth_dataset(50, 3, 1, 0).unwrap();
        assert!(!u.is_conditional());
        assert!(u.labels().iter().all(|&l| l == 0));
    }

    proptest! {
        #[test]
        fn iec_round_trip(bytes in 1u128..(1u128 << 62)) {
            let s = format_iec(bytes);
            let back = parse_iec(&s).unwrap();
            prop_assert!((back - bytes as f64).abs() <= 0.005 * bytes as f64, "{} -> {}", bytes, s);
        }

        #[test]
        fn linear_in_n(n in 1u64..1_000_000, k in 1u64..200) {
            let p = EstimateParams { n, k, ..pions_with(4) };
            let p2 = EstimateParams { n: 2 * n, ..p };
            for s in [Scenario::NaiveXt, Scenario::MainBuffers, Scenario::BoolMasks] {
                prop_assert_eq!(estimate(s, &p2).unwrap().bytes, 2 * estimate(s, &p).unwrap().bytes);
            }
        }
    }
}
