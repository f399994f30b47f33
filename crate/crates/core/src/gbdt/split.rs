use super::bins::{BinStore, BinnedMatrix};

/// Gradient sum and row count of one histogram bin.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct HBin {
    pub g: f64,
    pub c: u32,
}

/// `1 / (c + lambda)` for every possible child row count. The hessian of the
/// squared loss is 1 per row, so this replaces a division per candidate.
pub(crate) fn reciprocal_table(n: usize, lambda: f64) -> Vec<f64> {
    (0..=n)
        .map(|c| {
            let h = c as f64 + lambda;
            if h > 0.0 {
                1.0 / h
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) trait BinIdx: Copy {
    fn idx(self) -> usize;
}

impl BinIdx for u8 {
    #[inline(always)]
    fn idx(self) -> usize {
        self as usize
    }
}

impl BinIdx for u16 {
    #[inline(always)]
    fn idx(self) -> usize {
        self as usize
    }
}

/// Accumulates single-output gradients of `rows` into `hist`.
pub(crate) fn build_hist(binned: &BinnedMatrix, offsets: &[usize], rows: &[u32], grads: &[f64], hist: &mut [HBin]) {
    fn go<B: BinIdx>(bins: &[B], p: usize, offsets: &[usize], rows: &[u32], grads: &[f64], hist: &mut [HBin]) {
        let offsets = &offsets[..p];
        for &r in rows {
            let r = r as usize;
            let g = grads[r];
            let row = &bins[r * p..r * p + p];
            for (&b, &off) in row.iter().zip(offsets) {
                let h = &mut hist[off + b.idx()];
                h.g += g;
                h.c += 1;
            }
        }
    }
    let p = binned.p();
    match binned.store() {
        BinStore::U8(b) => go(b, p, offsets, rows, grads, hist),
        BinStore::U16(b) => go(b, p, offsets, rows, grads, hist),
    }
}

pub(crate) fn subtract_hist(parent: &mut [HBin], child: &[HBin]) {
    for (a, b) in parent.iter_mut().zip(child) {
        a.g -= b.g;
        a.c -= b.c;
    }
}

/// Best candidate found by a scan, before the gain threshold is applied.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Candidate {
    pub feature: usize,
    pub bin: usize,
    /// Sum of the two child scores `sum_k G_k^2 / (H + lambda)`.
    pub score: f64,
    pub left_count: u32,
    pub left_g: Vec<f64>,
}

/// Best split of one feature: `(bin, score, left_count, left_g)`.
type FeatureBest = Option<(usize, f64, u32, f64)>;

/// Score of a split leaving `cl` of `total_c` rows on the left; `recip`
/// must cover `0..=total_c`.
#[inline(always)]
fn split_score(gl: f64, cl: u32, total_g: f64, total_c: u32, recip: &[f64]) -> f64 {
    let cr = total_c - cl;
    let gr = total_g - gl;
    gl * gl * recip[cl as usize] + gr * gr * recip[cr as usize]
}

/// Best split of one feature, visiting only the non-empty bins in order.
fn scan_feature(h: &[HBin], total_g: f64, total_c: u32, recip: &[f64], words: &mut Vec<u64>) -> FeatureBest {
    let len = h.len() - 1;
    words.clear();
    words.extend(h[..len].chunks(64).map(|chunk| {
        chunk
            .iter()
            .enumerate()
            .fold(0u64, |m, (i, hb)| m | (((hb.c != 0) as u64) << i))
    }));
    let recip = &recip[..=total_c as usize];
    let mut best: FeatureBest = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut gl = 0.0f64;
    let mut cl = 0u32;
    'outer: for (wi, &w) in words.iter().enumerate() {
        let mut w = w;
        while w != 0 {
            let b = wi * 64 + w.trailing_zeros() as usize;
            w &= w - 1;
            gl += h[b].g;
            cl += h[b].c;
            if cl == total_c {
                break 'outer;
            }
            let s = split_score(gl, cl, total_g, total_c, recip);
            if s > best_score {
                best_score = s;
                best = Some((b, s, cl, gl));
            }
        }
    }
    best
}

/// Scans a full single-output histogram for the best split. Ties go to the
/// lowest feature, then the lowest bin.
pub(crate) fn scan_hist(offsets: &[usize], hist: &[HBin], total_g: f64, total_c: u32, recip: &[f64]) -> Option<Candidate> {
    let p = offsets.len() - 1;
    let feat = |j: usize| &hist[offsets[j]..offsets[j + 1]];
    let mut per_feature: Vec<FeatureBest> = Vec::with_capacity(p);
    let mut words = Vec::new();
    for j in 0..p {
        per_feature.push(scan_feature(feat(j), total_g, total_c, recip, &mut words));
    }
    let mut best: Option<Candidate> = None;
    for (feature, fb) in per_feature.into_iter().enumerate() {
        if let Some((bin, score, left_count, gl)) = fb {
            if best.as_ref().is_none_or(|c| score > c.score) {
                best = Some(Candidate {
                    feature,
                    bin,
                    score,
                    left_count,
                    left_g: vec![gl],
                });
            }
        }
    }
    best
}

/// Multi-output split search that builds and scans one feature histogram at
/// a time, so memory stays at `bins * m` regardless of the feature count.
pub(crate) struct StreamingSearch {
    g: Vec<f64>,
    c: Vec<u32>,
    gl: Vec<f64>,
}

impl StreamingSearch {
    pub fn new() -> Self {
        Self {
            g: Vec::new(),
            c: Vec::new(),
            gl: Vec::new(),
        }
    }

    pub fn search(
        &mut self,
        binned: &BinnedMatrix,
        rows: &[u32],
        grads: &[f64],
        m: usize,
        total_g: &[f64],
        recip: &[f64],
    ) -> Option<Candidate> {
        let p = binned.p();
        let mapper = binned.mapper();
        let total_c = rows.len() as u32;
        let mut best: Option<Candidate> = None;
        let mut best_score = f64::NEG_INFINITY;
        self.gl.resize(m, 0.0);
        for j in 0..p {
            let nb = mapper.n_bins(j);
            if nb < 2 {
                continue;
            }
            self.g.clear();
            self.g.resize(nb * m, 0.0);
            self.c.clear();
            self.c.resize(nb, 0);
            match binned.store() {
                BinStore::U8(b) => accumulate(b, p, j, m, rows, grads, &mut self.g, &mut self.c),
                BinStore::U16(b) => accumulate(b, p, j, m, rows, grads, &mut self.g, &mut self.c),
            }
            self.gl.iter_mut().for_each(|v| *v = 0.0);
            let mut cl = 0u32;
            for b in 0..nb - 1 {
                if self.c[b] == 0 {
                    continue;
                }
                cl += self.c[b];
                if cl == total_c {
                    break;
                }
                let mut sl = 0.0;
                let mut sr = 0.0;
                for k in 0..m {
                    let gl = self.gl[k] + self.g[b * m + k];
                    self.gl[k] = gl;
                    let gr = total_g[k] - gl;
                    sl += gl * gl;
                    sr += gr * gr;
                }
                let score = sl * recip[cl as usize] + sr * recip[(total_c - cl) as usize];
                if score > best_score {
                    best_score = score;
                    best = Some(Candidate {
                        feature: j,
                        bin: b,
                        score,
                        left_count: cl,
                        left_g: self.gl.clone(),
                    });
                }
            }
        }
        best
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate<B: BinIdx>(bins: &[B], p: usize, j: usize, m: usize, rows: &[u32], grads: &[f64], g: &mut [f64], c: &mut [u32]) {
    for &r in rows {
        let r = r as usize;
        let b = bins[r * p + j].idx();
        c[b] += 1;
        let src = &grads[r * m..r * m + m];
        let dst = &mut g[b * m..b * m + m];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
}

/// Applies the gain threshold to a candidate. Returns the gain when the split
/// is worth taking.
pub(crate) fn accept(cand: &Candidate, parent_score: f64, gamma: f64) -> Option<f64> {
    let gain = 0.5 * (cand.score - parent_score) - gamma;
    // Splits whose improvement is within rounding of zero are treated as
    // zero-gain and rejected.
    let tol = 1e-12 * cand.score.abs().max(parent_score.abs());
    (gain > tol).then_some(gain)
}

pub(crate) fn parent_score(total_g: &[f64], count: u32, recip: &[f64]) -> f64 {
    total_g.iter().map(|g| g * g).sum::<f64>() * recip[count as usize]
}

/// Result of a split search over one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitInfo {
    pub feature: usize,
    pub bin: usize,
    /// Raw-value threshold; rows with `x <= threshold` go left.
    pub threshold: f32,
    pub gain: f64,
    pub left_count: usize,
}

/// Histogram split search over `rows` of `binned`, with `m` gradients per row
/// in `grads` (row-major, indexed by row id). Returns `None` when no split
/// has positive gain.
pub fn find_best_split(binned: &BinnedMatrix, rows: &[u32], grads: &[f64], m: usize, lambda: f64, gamma: f64) -> Option<SplitInfo> {
    if rows.len() < 2 || m == 0 {
        return None;
    }
    let mut total_g = vec![0.0; m];
    for &r in rows {
        for (k, t) in total_g.iter_mut().enumerate() {
            *t += grads[r as usize * m + k];
        }
    }
    let recip = reciprocal_table(rows.len(), lambda);
    let cand = if m == 1 {
        let offsets = binned.mapper().offsets();
        let mut hist = vec![HBin::default(); binned.mapper().total_bins()];
        build_hist(binned, offsets, rows, grads, &mut hist);
        scan_hist(offsets, &hist, total_g[0], rows.len() as u32, &recip)
    } else {
        StreamingSearch::new().search(binned, rows, grads, m, &total_g, &recip)
    }?;
    let ps = parent_score(&total_g, rows.len() as u32, &recip);
    let gain = accept(&cand, ps, gamma)?;
    Some(SplitInfo {
        feature: cand.feature,
        bin: cand.bin,
        threshold: binned.mapper().edges(cand.feature)[cand.bin],
        gain,
        left_count: cand.left_count as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::super::build_bins;
    use super::*;
    use proptest::prelude::*;

    /// Empty bins count as exactly zero, discarding residue left by
    /// histogram subtraction.
    fn bin_g(h: &HBin) -> f64 {
        if h.c != 0 {
            h.g
        } else {
            0.0
        }
    }

    /// Left sums over `h[..=bin]`, accumulated in scan order.
    fn left_sums(h: &[HBin], bin: usize) -> (u32, f64) {
        let mut g = 0.0f64;
        let mut c = 0u32;
        for hb in &h[..=bin] {
            g += bin_g(hb);
            c += hb.c;
        }
        (c, g)
    }

    /// Reference scan over every bin, including empty ones.
    fn scan_dense(h: &[HBin], total_g: f64, total_c: u32, recip: &[f64]) -> FeatureBest {
        let mut best_bin = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        let mut gl = 0.0f64;
        let mut cl = 0u32;
        for (b, hb) in h[..h.len() - 1].iter().enumerate() {
            gl += bin_g(hb);
            cl += hb.c;
            if cl == 0 || cl == total_c {
                continue;
            }
            let s = split_score(gl, cl, total_g, total_c, recip);
            if s > best_score {
                best_score = s;
                best_bin = b;
            }
        }
        (best_bin != usize::MAX).then(|| {
            let (c, g) = left_sums(h, best_bin);
            (best_bin, best_score, c, g)
        })
    }

    proptest! {
        #[test]
        fn sparse_scan_matches_dense(
            bins in proptest::collection::vec((0u32..4, -3.0f64..3.0), 2..80),
            lambda in 0.0f64..2.0,
        ) {
            let h: Vec<HBin> = bins.iter().map(|&(c, g)| HBin { g: if c == 0 { g * 1e-12 } else { g }, c }).collect();
            let total_c: u32 = h.iter().map(|b| b.c).sum();
            let total_g: f64 = h.iter().map(bin_g).sum();
            let recip = reciprocal_table(total_c as usize, lambda);
            let mut words = Vec::new();
            prop_assert_eq!(scan_feature(&h, total_g, total_c, &recip, &mut words), scan_dense(&h, total_g, total_c, &recip));
        }
    }

    #[test]
    fn obvious_split() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let b = build_bins(&x, 1, 256).unwrap();
        let grads = [-1.0, -1.0, 1.0, 1.0];
        let s = find_best_split(&b, &[0, 1, 2, 3], &grads, 1, 0.0, 0.0).unwrap();
        assert_eq!((s.feature, s.bin, s.left_count), (0, 1, 2));
        assert_eq!(s.threshold, 1.5);
        // 0.5 * (4/2 + 4/2 - 0/4)
        assert_eq!(s.gain, 2.0);
    }

    #[test]
    fn tie_goes_to_lowest_feature() {
        let x = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let b = build_bins(&x, 2, 256).unwrap();
        let grads = [-1.0, -1.0, 1.0, 1.0];
        let s = find_best_split(&b, &[0, 1, 2, 3], &grads, 1, 0.0, 0.0).unwrap();
        assert_eq!(s.feature, 0);
    }

    #[test]
    fn zero_gain_rejected() {
        let x = [0.0, 1.0, 0.0, 1.0];
        let b = build_bins(&x, 1, 256).unwrap();
        let grads = [1.0, 1.0, -1.0, -1.0];
        assert!(find_best_split(&b, &[0, 1, 2, 3], &grads, 1, 0.0, 0.0).is_none());
    }

    #[test]
    fn gamma_blocks_small_gain() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let b = build_bins(&x, 1, 256).unwrap();
        let grads = [-1.0, -1.0, 1.0, 1.0];
        assert!(find_best_split(&b, &[0, 1, 2, 3], &grads, 1, 0.0, 2.0).is_none());
        assert!(find_best_split(&b, &[0, 1, 2, 3], &grads, 1, 0.0, 1.9).is_some());
    }

    #[test]
    fn multi_output_sums_gain() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let b = build_bins(&x, 1, 256).unwrap();
        // Two identical outputs double the single-output gain.
        let grads = [-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0];
        let s = find_best_split(&b, &[0, 1, 2, 3], &grads, 2, 0.0, 0.0).unwrap();
        assert_eq!(s.gain, 4.0);
        assert_eq!(s.bin, 1);
    }

    #[test]
    fn subtraction_matches_direct() {
        let x = [0.0, 5.0, 1.0, 4.0, 2.0, 3.0];
        let b = build_bins(&x, 2, 256).unwrap();
        let offs = b.mapper().offsets();
        let grads = [0.5, -0.25, 1.0];
        let n = b.mapper().total_bins();
        let mut all = vec![HBin::default(); n];
        build_hist(&b, offs, &[0, 1, 2], &grads, &mut all);
        let mut left = vec![HBin::default(); n];
        build_hist(&b, offs, &[1], &grads, &mut left);
        let mut right = vec![HBin::default(); n];
        build_hist(&b, offs, &[0, 2], &grads, &mut right);
        subtract_hist(&mut all, &left);
        assert_eq!(all, right);
    }
}
