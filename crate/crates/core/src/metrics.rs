//! Distribution distances between sample sets: Wasserstein-1, Coverage and
//! the chi-square histogram separation. Inputs are row-major `f32` matrices;
//! all arithmetic is done in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty sample")]
    EmptySample,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("exact W1 limited to {max} points, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("k = {k} needs more than k reference points, got {m}")]
    KTooLarge { k: usize, m: usize },
    #[error("histogram not normalized: {0}")]
    NotNormalized(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Largest sample size accepted by [`w1_exact`].
pub const W1_EXACT_MAX: usize = 512;

fn rows(x: &[f32], p: usize) -> Result<usize> {
    if p == 0 || x.len() % p != 0 {
        return Err(MetricsError::ShapeMismatch(format!("{} values do not form rows of width {p}", x.len())));
    }
    if x.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    Ok(x.len() / p)
}

fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum()
}

/// Exact one-dimensional W1 between two empirical distributions, from the
/// sorted quantile coupling.
pub fn w1_1d(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let sorted = |x: &[f32]| {
        let mut v: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as u128, b.len() as u128);
    // walk the merged quantile breakpoints i/na and j/nb as integers over na*nb
    let (mut i, mut j) = (0usize, 0usize);
    let mut u: u128 = 0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let ea = (i as u128 + 1) * nb;
        let eb = (j as u128 + 1) * na;
        let next = ea.min(eb);
        total += (next - u) as f64 * (a[i] - b[j]).abs();
        u = next;
        if ea == next {
            i += 1;
        }
        if eb == next {
            j += 1;
        }
    }
    Ok(total / (na * nb) as f64)
}

/// Minimum-cost perfect matching on a square cost matrix; returns the
/// column assigned to each row.
fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Exact W1 between two equal-size uniform point sets under the L1 ground
/// cost: the mean cost of the optimal one-to-one matching.
pub fn w1_exact(a: &[f32], b: &[f32], p: usize) -> Result<f64> {
    let n = rows(a, p)?;
    let nb = rows(b, p)?;
    if n != nb {
        return Err(MetricsError::ShapeMismatch(format!("{n} rows vs {nb} rows")));
    }
    if n > W1_EXACT_MAX {
        return Err(MetricsError::TooLarge { n, max: W1_EXACT_MAX });
    }
    let mut cost = Vec::with_capacity(n * n);
    for ra in a.chunks_exact(p) {
        for rb in b.chunks_exact(p) {
            cost.push(l1(ra, rb));
        }
    }
    let m = assignment(&cost, n);
    let total: f64 = m.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Mean over features of the one-dimensional W1.
pub fn w1_sliced_axis(a: &[f32], b: &[f32], p: usize) -> Result<f64> {
    rows(a, p)?;
    rows(b, p)?;
    let mut s = 0.0;
    for j in 0..p {
        let ca: Vec<f32> = a.iter().skip(j).step_by(p).copied().collect();
        let cb: Vec<f32> = b.iter().skip(j).step_by(p).copied().collect();
        s += w1_1d(&ca, &cb)?;
    }
    Ok(s / p as f64)
}

/// For each reference point, its sorted L1 distances to the other reference
/// points and its distance to the nearest generated point.
fn neighbour_table(gen: &[f32], reference: &[f32], p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let refs: Vec<&[f32]> = reference.chunks_exact(p).collect();
    let mut sorted = Vec::with_capacity(refs.len());
    let mut nearest = Vec::with_capacity(refs.len());
    for (j, r) in refs.iter().enumerate() {
        let mut d: Vec<f64> = refs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .map(|(_, o)| l1(r, o))
            .collect();
        d.sort_by(f64::total_cmp);
        sorted.push(d);
        nearest.push(gen.chunks_exact(p).map(|g| l1(r, g)).fold(f64::INFINITY, f64::min));
    }
    (sorted, nearest)
}

/// Fraction of reference points whose closed L1 ball of radius equal to the
/// distance to their `k`-th nearest other reference point contains at least
/// one generated point.
pub fn coverage(gen: &[f32], reference: &[f32], p: usize, k: usize) -> Result<f64> {
    rows(gen, p)?;
    let m = rows(reference, p)?;
    if k == 0 || k >= m {
        return Err(MetricsError::KTooLarge { k, m });
    }
    let refs: Vec<&[f32]> = reference.chunks_exact(p).collect();
    let mut covered = 0usize;
    let mut d = Vec::with_capacity(m - 1);
    for (j, r) in refs.iter().enumerate() {
        d.clear();
        d.extend(refs.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, o)| l1(r, o)));
        let (_, &mut radius, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        if gen.chunks_exact(p).any(|g| l1(r, g) <= radius) {
            covered += 1;
        }
    }
    Ok(covered as f64 / m as f64)
}

/// Smallest `k` at which `train` covers at least 95% of `test`, capped at
/// `m - 1` for `m` test points.
pub fn choose_k(train: &[f32], test: &[f32], p: usize) -> Result<usize> {
    rows(train, p)?;
    let m = rows(test, p)?;
    if m < 2 {
        return Err(MetricsError::KTooLarge { k: 1, m });
    }
    let (sorted, nearest) = neighbour_table(train, test, p);
    // point j is covered for every k >= 1 + #(neighbour distances < nearest)
    let mut need: Vec<usize> = sorted
        .iter()
        .zip(&nearest)
        .map(|(d, &g)| 1 + d.partition_point(|&x| x < g))
        .collect();
    need.sort_unstable();
    let want = (0.95 * m as f64).ceil() as usize;
    let k = need[want.clamp(1, m) - 1];
    if k > m - 1 {
        log::warn!("95% coverage not reachable; using k = {}", m - 1);
        return Ok(m - 1);
    }
    Ok(k)
}

/// Two normalized histograms over shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub edges: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

impl HistogramPair {
    pub fn new(edges: Vec<f64>, h1: Vec<f64>, h2: Vec<f64>) -> Result<Self> {
        if h1.len() != h2.len() {
            return Err(MetricsError::ShapeMismatch(format!("{} vs {} bins", h1.len(), h2.len())));
        }
        for (name, h) in [("h1", &h1), ("h2", &h2)] {
            if h.iter().any(|&v| !(v >= 0.0)) {
                return Err(MetricsError::NotNormalized(format!("{name} has a negative or NaN mass")));
            }
            let s: f64 = h.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(MetricsError::NotNormalized(format!("{name} sums to {s}")));
            }
        }
        Ok(Self { edges, h1, h2 })
    }

    /// Equal-width bins over the pooled range of both samples.
    pub fn from_samples(a: &[f32], b: &[f32], bins: usize) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(MetricsError::EmptySample);
        }
        if bins == 0 {
            return Err(MetricsError::ShapeMismatch("zero bins".into()));
        }
        let (lo, hi) = a
            .iter()
            .chain(b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let hist = |x: &[f32]| {
            let mut h = vec![0.0; bins];
            for &v in x {
                let i = (((v as f64 - lo) / width) as usize).min(bins - 1);
                h[i] += 1.0;
            }
            let n = x.len() as f64;
            h.iter_mut().for_each(|c| *c /= n);
            h
        };
        Self::new(edges, hist(a), hist(b))
    }
}

/// Chi-square separation power: 0 for identical histograms, 1 for disjoint
/// supports.
pub fn chi2_sep(h: &HistogramPair) -> f64 {
    0.5 * h
        .h1
        .iter()
        .zip(&h.h2)
        .filter(|(a, b)| *a + *b > 0.0)
        .map(|(a, b)| (a - b) * (a - b) / (a + b))
        .sum::<f64>()
}

/// Per-feature chi-square separation with `bins` equal-width bins.
pub fn chi2_per_feature(a: &[f32], b: &[f32], p: usize, bins: usize) -> Result<Vec<f64>> {
    rows(a, p)?;
    rows(b, p)?;
    (0..p)
        .map(|j| {
            let ca: Vec<f32> = a.iter().skip(j).step_by(p).copied().collect();
            let cb: Vec<f32> = b.iter().skip(j).step_by(p).copied().collect();
            Ok(chi2_sep(&HistogramPair::from_samples(&ca, &cb, bins)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chi2Report {
    pub per_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub w1_train: f64,
    pub w1_test: f64,
    /// `"exact"` or `"sliced-axis"`.
    pub w1_kind: String,
    pub cov_train: f64,
    pub cov_test: f64,
    pub k: usize,
    pub chi2: Chi2Report,
}

fn w1_auto(a: &[f32], b: &[f32], p: usize) -> Result<(f64, &'static str)> {
    let (na, nb) = (rows(a, p)?, rows(b, p)?);
    if na == nb && na <= W1_EXACT_MAX {
        Ok((w1_exact(a, b, p)?, "exact"))
    } else {
        Ok((w1_sliced_axis(a, b, p)?, "sliced-axis"))
    }
}

/// Full metric suite of generated data against train and test sets.
pub fn evaluate(gen: &[f32], train: &[f32], test: &[f32], p: usize, bins: usize) -> Result<MetricsReport> {
    let (w1_train, kind_train) = w1_auto(gen, train, p)?;
    let (w1_test, kind_test) = w1_auto(gen, test, p)?;
    let kind = if kind_train == kind_test { kind_train } else { "mixed" };
    let k = choose_k(train, test, p)?;
    let m_train = rows(train, p)?;
    Ok(MetricsReport {
        w1_train,
        w1_test,
        w1_kind: kind.into(),
        cov_train: coverage(gen, train, p, k.min(m_train.saturating_sub(1)).max(1))?,
        cov_test: coverage(gen, test, p, k)?,
        k,
        chi2: Chi2Report {
            per_feature: chi2_per_feature(gen, test, p, bins)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn w1_1d_examples() {
        assert_eq!(w1_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(w1_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!((w1_1d(&[0.0, 0.0, 1.0], &[0.0, 1.0, 1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // unequal sizes: {0, 1} vs {0.5} moves each half by 0.5
        assert!((w1_1d(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(w1_1d(&[], &[1.0]), Err(MetricsError::EmptySample));
    }

    #[test]
    fn w1_exact_errors() {
        assert_eq!(w1_exact(&[0.0; 4], &[0.0; 4], 2), Ok(0.0));
        assert!(matches!(w1_exact(&[0.0; 4], &[0.0; 6], 2), Err(MetricsError::ShapeMismatch(_))));
        let big = vec![0.0f32; 513];
        assert_eq!(w1_exact(&big, &big, 1), Err(MetricsError::TooLarge { n: 513, max: 512 }));
    }

    #[test]
    fn coverage_examples() {
        let r = [0.0f32, 1.0, 10.0];
        assert!((coverage(&[0.4], &r, 1, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(coverage(&r, &r, 1, 1).unwrap(), 1.0);
        assert_eq!(coverage(&[1000.0], &r, 1, 1).unwrap(), 0.0);
        assert_eq!(coverage(&[0.0], &r, 1, 3), Err(MetricsError::KTooLarge { k: 3, m: 3 }));
    }

    #[test]
    fn choose_k_cases() {
        let t: Vec<f32> = (0..20).map(|i| i as f32).collect();
        assert_eq!(choose_k(&t, &t, 1).unwrap(), 1);
        let far: Vec<f32> = t.iter().map(|v| v + 1e6).collect();
        assert_eq!(choose_k(&far, &t, 1).unwrap(), 19);
    }

    #[test]
    fn chi2_examples() {
        let h = |a: Vec<f64>, b: Vec<f64>| HistogramPair::new(vec![], a, b).unwrap();
        assert_eq!(chi2_sep(&h(vec![0.2, 0.8], vec![0.2, 0.8])), 0.0);
        assert!((chi2_sep(&h(vec![1.0, 0.0], vec![0.0, 1.0])) - 1.0).abs() < 1e-9);
        assert!((chi2_sep(&h(vec![0.5, 0.5], vec![1.0, 0.0])) - 1.0 / 3.0).abs() < 1e-9);
        assert!(matches!(
            HistogramPair::new(vec![], vec![0.5, 0.4], vec![1.0, 0.0]),
            Err(MetricsError::NotNormalized(_))
        ));
    }

    fn points(p: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1usize..12).prop_flat_map(move |n| {
            (
                prop::collection::vec(-10.0f32..10.0, n * p),
                prop::collection::vec(-10.0f32..10.0, n * p),
            )
        })
    }

    proptest! {
        #[test]
        fn w1_exact_matches_1d((a, b) in points(1)) {
            let e = w1_exact(&a, &b, 1).unwrap();
            let d = w1_1d(&a, &b).unwrap();
            prop_assert!((e - d).abs() < 1e-6, "{} vs {}", e, d);
        }

        #[test]
        fn w1_symmetric((a, b) in points(3)) {
            let ab = w1_exact(&a, &b, 3).unwrap();
            let ba = w1_exact(&b, &a, 3).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((w1_1d(&a, &b).unwrap() - w1_1d(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn w1_triangle(n in 1usize..16, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pts = || (0..n * 2).map(|_| rng.random_range(-5.0f32..5.0)).collect::<Vec<_>>();
            let (a, b, c) = (pts(), pts(), pts());
            let ab = w1_exact(&a, &b, 2).unwrap();
            let bc = w1_exact(&b, &c, 2).unwrap();
            let ac = w1_exact(&a, &c, 2).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn coverage_bounded_and_monotone(gen in prop::collection::vec(-5.0f32..5.0, 1..30),
                                         reference in prop::collection::vec(-5.0f32..5.0, 3..30)) {
            let m = reference.len();
            let mut last = 0.0;
            for k in 1..m {
                let c = coverage(&gen, &reference, 1, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&c));
                prop_assert!(c >= last);
                last = c;
            }
        }

        #[test]
        fn chi2_bounded(a in prop::collection::vec(-5.0f32..5.0, 1..50), b in prop::collection::vec(-5.0f32..5.0, 1..50)) {
            let h = HistogramPair::from_samples(&a, &b, 10).unwrap();
            let v = chi2_sep(&h);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            let swapped = HistogramPair::new(h.edges.clone(), h.h2.clone(), h.h1.clone()).unwrap();
            prop_assert!((chi2_sep(&swapped) - v).abs() < 1e-12);
            let same = HistogramPair::from_samples(&a, &a, 10).unwrap();
            prop_assert_eq!(chi2_sep(&same), 0.0);
        }
    }
}
