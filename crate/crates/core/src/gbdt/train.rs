use super::bins::{BinStore, BinnedMatrix};
use super::io::{MemorySink, TreeSink};
use super::split::{accept, build_hist, parent_score, reciprocal_table, scan_hist, subtract_hist, BinIdx, Candidate, HBin, StreamingSearch};
use super::tree::{Booster, Node, Tree, LEAF};
use super::{GbdtError, GbdtParams, Result, TreeMode};

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSummary {
    /// Trees retained per sequence.
    pub best_iterations: Vec<usize>,
    /// Trees grown per sequence, including any later discarded by early stopping.
    pub grown: Vec<usize>,
    /// Best validation RMSE per sequence, when validating.
    pub valid_rmse: Option<Vec<f64>>,
}

struct Task {
    node: u32,
    lo: usize,
    hi: usize,
    depth: usize,
    hist: Option<Vec<HBin>>,
    g: Vec<f64>,
}

struct Grower<'a> {
    binned: &'a BinnedMatrix,
    params: &'a GbdtParams,
    recip: Vec<f64>,
    rows: Vec<u32>,
    scratch: Vec<u32>,
    pool: Vec<Vec<HBin>>,
    streaming: StreamingSearch,
    /// Bin threshold of each node of the last grown tree.
    node_bins: Vec<u32>,
    /// `(node, lo, hi)` row ranges of the leaves of the last grown tree.
    leaves: Vec<(u32, usize, usize)>,
}

impl<'a> Grower<'a> {
    fn new(binned: &'a BinnedMatrix, params: &'a GbdtParams) -> Self {
        let n = binned.n_rows();
        Self {
            binned,
            params,
            recip: reciprocal_table(n, params.lambda),
            rows: Vec::with_capacity(n),
            scratch: Vec::with_capacity(n),
            pool: Vec::new(),
            streaming: StreamingSearch::new(),
            node_bins: Vec::new(),
            leaves: Vec::new(),
        }
    }

    fn take_hist(&mut self) -> Vec<HBin> {
        let n = self.binned.mapper().total_bins();
        match self.pool.pop() {
            Some(mut h) => {
                h.iter_mut().for_each(|b| *b = HBin::default());
                h
            }
            None => vec![HBin::default(); n],
        }
    }

    fn hist_of(&mut self, lo: usize, hi: usize, grads: &[f64]) -> Vec<HBin> {
        let mut h = self.take_hist();
        build_hist(self.binned, self.binned.mapper().offsets(), &self.rows[lo..hi], grads, &mut h);
        h
    }

    fn needs_split(&self, depth: usize, count: usize) -> bool {
        depth < self.params.max_depth && count >= 2
    }

    /// Stable partition of `rows[lo..hi]` by `bin <= threshold` on `feature`.
    fn partition(&mut self, lo: usize, hi: usize, feature: usize, threshold: usize) -> usize {
        fn go<B: BinIdx>(bins: &[B], p: usize, feature: usize, threshold: usize, rows: &mut [u32], scratch: &mut Vec<u32>) -> usize {
            scratch.clear();
            let mut w = 0;
            for i in 0..rows.len() {
                let r = rows[i];
                if bins[r as usize * p + feature].idx() <= threshold {
                    rows[w] = r;
                    w += 1;
                } else {
                    scratch.push(r);
                }
            }
            rows[w..].copy_from_slice(scratch);
            w
        }
        let p = self.binned.p();
        let rows = &mut self.rows[lo..hi];
        let n_left = match self.binned.store() {
            BinStore::U8(b) => go(b, p, feature, threshold, rows, &mut self.scratch),
            BinStore::U16(b) => go(b, p, feature, threshold, rows, &mut self.scratch),
        };
        lo + n_left
    }

    fn leaf_values(&self, g: &[f64], count: usize) -> Vec<f32> {
        let r = self.recip[count];
        let eta = self.params.eta as f64;
        g.iter().map(|&g| (-g * r * eta) as f32).collect()
    }

    /// Grows one tree on gradients with `m` values per row.
    fn grow(&mut self, grads: &[f64], m: usize) -> Tree {
        let n = self.binned.n_rows();
        self.rows.clear();
        self.rows.extend(0..n as u32);
        self.node_bins.clear();
        self.leaves.clear();

        let mut tree = Tree::new(m);
        let mut root_g = vec![0.0; m];
        for r in 0..n {
            for k in 0..m {
                root_g[k] += grads[r * m + k];
            }
        }
        let placeholder = Node {
            feature: LEAF,
            split: 0.0,
            left: 0,
            right: 0,
        };
        tree.nodes.push(placeholder);
        self.node_bins.push(0);
        let root_hist = (m == 1 && self.needs_split(0, n)).then(|| self.hist_of(0, n, grads));
        let mut stack = vec![Task {
            node: 0,
            lo: 0,
            hi: n,
            depth: 0,
            hist: root_hist,
            g: root_g,
        }];
        let mut leaf_vals: Vec<(u32, Vec<f32>)> = Vec::new();

        while let Some(task) = stack.pop() {
            let count = task.hi - task.lo;
            let split = if self.needs_split(task.depth, count) {
                self.find_split(&task, grads, m)
            } else {
                None
            };
            let Some(cand) = split else {
                if let Some(h) = task.hist {
                    self.pool.push(h);
                }
                leaf_vals.push((task.node, self.leaf_values(&task.g, count)));
                self.leaves.push((task.node, task.lo, task.hi));
                continue;
            };

            let mid = self.partition(task.lo, task.hi, cand.feature, cand.bin);
            debug_assert_eq!(mid - task.lo, cand.left_count as usize);
            let left = tree.nodes.len() as u32;
            let right = left + 1;
            tree.nodes.push(placeholder);
            tree.nodes.push(placeholder);
            self.node_bins.extend([0, 0]);
            tree.nodes[task.node as usize] = Node {
                feature: cand.feature as u32,
                split: self.binned.mapper().edges(cand.feature)[cand.bin],
                left,
                right,
            };
            self.node_bins[task.node as usize] = cand.bin as u32;

            let right_g: Vec<f64> = task.g.iter().zip(&cand.left_g).map(|(t, l)| t - l).collect();
            let depth = task.depth + 1;
            let (nl, nr) = (mid - task.lo, task.hi - mid);
            let (need_l, need_r) = (self.needs_split(depth, nl), self.needs_split(depth, nr));
            let (hist_l, hist_r) = match task.hist {
                Some(parent) => self.child_hists(parent, (task.lo, mid, need_l), (mid, task.hi, need_r), grads),
                None => (None, None),
            };
            stack.push(Task {
                node: right,
                lo: mid,
                hi: task.hi,
                depth,
                hist: hist_r,
                g: right_g,
            });
            stack.push(Task {
                node: left,
                lo: task.lo,
                hi: mid,
                depth,
                hist: hist_l,
                g: cand.left_g,
            });
        }

        // Leaf values are stored in node order.
        leaf_vals.sort_unstable_by_key(|(node, _)| *node);
        for (node, vals) in leaf_vals {
            tree.nodes[node as usize].left = tree.leaf_values.len() as u32;
            tree.leaf_values.extend_from_slice(&vals);
        }
        tree
    }

    /// Histograms for the children that will be split further, building the
    /// smaller side directly and deriving the other by subtraction.
    fn child_hists(
        &mut self,
        mut parent: Vec<HBin>,
        (l_lo, l_hi, need_l): (usize, usize, bool),
        (r_lo, r_hi, need_r): (usize, usize, bool),
        grads: &[f64],
    ) -> (Option<Vec<HBin>>, Option<Vec<HBin>>) {
        let left_smaller = l_hi - l_lo <= r_hi - r_lo;
        match (need_l, need_r) {
            (false, false) => {
                self.pool.push(parent);
                (None, None)
            }
            (true, true) => {
                if left_smaller {
                    let small = self.hist_of(l_lo, l_hi, grads);
                    subtract_hist(&mut parent, &small);
                    (Some(small), Some(parent))
                } else {
                    let small = self.hist_of(r_lo, r_hi, grads);
                    subtract_hist(&mut parent, &small);
                    (Some(parent), Some(small))
                }
            }
            (true, false) => {
                if left_smaller {
                    self.pool.push(parent);
                    (Some(self.hist_of(l_lo, l_hi, grads)), None)
                } else {
                    let other = self.hist_of(r_lo, r_hi, grads);
                    subtract_hist(&mut parent, &other);
                    self.pool.push(other);
                    (Some(parent), None)
                }
            }
            (false, true) => {
                if !left_smaller {
                    self.pool.push(parent);
                    (None, Some(self.hist_of(r_lo, r_hi, grads)))
                } else {
                    let other = self.hist_of(l_lo, l_hi, grads);
                    subtract_hist(&mut parent, &other);
                    self.pool.push(other);
                    (None, Some(parent))
                }
            }
        }
    }

    fn find_split(&mut self, task: &Task, grads: &[f64], m: usize) -> Option<Candidate> {
        let count = (task.hi - task.lo) as u32;
        let cand = match &task.hist {
            Some(h) => scan_hist(self.binned.mapper().offsets(), h, task.g[0], count, &self.recip),
            None => self
                .streaming
                .search(self.binned, &self.rows[task.lo..task.hi], grads, m, &task.g, &self.recip),
        }?;
        let ps = parent_score(&task.g, count, &self.recip);
        accept(&cand, ps, self.params.gamma).map(|_| cand)
    }

    /// Leaf reached by validation row `r` in `tree`, routed on bins.
    fn route_binned(&self, tree: &Tree, valid: &BinnedMatrix, r: usize) -> usize {
        let mut i = 0;
        loop {
            let n = tree.nodes[i];
            if n.feature == LEAF {
                return i;
            }
            i = if valid.get(r, n.feature as usize) <= self.node_bins[i] as usize {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

fn check_shapes(binned: &BinnedMatrix, targets: &[f32], m: usize) -> Result<()> {
    if m == 0 || binned.n_rows() == 0 {
        return Err(GbdtError::EmptyTargets);
    }
    if targets.len() != binned.n_rows() * m {
        return Err(GbdtError::ShapeMismatch(format!(
            "{} target values for {} rows and {m} outputs",
            targets.len(),
            binned.n_rows()
        )));
    }
    if let Some(bad) = targets.iter().position(|t| !t.is_finite()) {
        return Err(GbdtError::ShapeMismatch(format!("non-finite target at index {bad}")));
    }
    Ok(())
}

fn column(targets: &[f32], m: usize, j: usize) -> Vec<f32> {
    targets.iter().skip(j).step_by(m).copied().collect()
}

/// Tracks the best validation score and decides when to stop.
struct EarlyStop {
    patience: usize,
    best: f64,
    best_iter: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_iter: 0,
        }
    }

    /// Records the score after `iter` trees; returns true when training
    /// should stop.
    fn update(&mut self, iter: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_iter = iter;
            false
        } else {
            iter - self.best_iter >= self.patience
        }
    }
}

fn rmse(pred: &[f32], target: &[f32]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    (s / pred.len().max(1) as f64).sqrt()
}

/// Trains a booster on `targets` (row-major `[n_rows, m]`), streaming trees
/// into `sink`. With `valid` given and `n_es > 0`, each sequence is cut back
/// to its best validation iteration once `n_es` rounds pass without
/// improvement.
pub fn train_booster_into<S: TreeSink + ?Sized>(
    binned: &BinnedMatrix,
    targets: &[f32],
    m: usize,
    params: &GbdtParams,
    mode: TreeMode,
    valid: Option<(&BinnedMatrix, &[f32])>,
    sink: &mut S,
) -> Result<TrainSummary> {
    params.validate()?;
    check_shapes(binned, targets, m)?;
    let valid = if params.n_es > 0 { valid } else { None };
    if let Some((vb, vt)) = valid {
        check_shapes(vb, vt, m)?;
        if vb.p() != binned.p() {
            return Err(GbdtError::ShapeMismatch("validation feature count differs".into()));
        }
    }
    let mode = mode.canonical(m);
    let n = binned.n_rows();
    let base: Vec<f32> = (0..m)
        .map(|j| {
            let s: f64 = targets.iter().skip(j).step_by(m).map(|&t| t as f64).sum();
            (s / n as f64) as f32
        })
        .collect();
    sink.begin(mode, m, binned.p(), params.eta, &base)?;

    let mut grower = Grower::new(binned, params);
    let mut summary = TrainSummary::default();
    let mut valid_best = Vec::new();

    match mode {
        TreeMode::So => {
            let mut grads = vec![0.0f64; n];
            for (j, &base_j) in base.iter().enumerate() {
                let target = if m == 1 { targets.to_vec() } else { column(targets, m, j) };
                let mut pred = vec![base_j; n];
                let mut vstate = valid.map(|(vb, vt)| {
                    let vt = if m == 1 { vt.to_vec() } else { column(vt, m, j) };
                    (vb, vec![base_j; vb.n_rows()], vt)
                });
                let mut es = EarlyStop::new(params.n_es);
                sink.begin_sequence()?;
                let mut grown = 0;
                for it in 1..=params.n_tree {
                    for ((g, &p), &t) in grads.iter_mut().zip(&pred).zip(&target) {
                        *g = p as f64 - t as f64;
                    }
                    let tree = grower.grow(&grads, 1);
                    for &(node, lo, hi) in &grower.leaves {
                        let v = tree.leaf(node as usize)[0];
                        for &r in &grower.rows[lo..hi] {
                            pred[r as usize] += v;
                        }
                    }
                    let stop = match &mut vstate {
                        Some((vb, vpred, vt)) => {
                            for (r, vp) in vpred.iter_mut().enumerate() {
                                *vp += tree.leaf(grower.route_binned(&tree, vb, r))[0];
                            }
                            es.update(it, rmse(vpred, vt))
                        }
                        None => false,
                    };
                    sink.push_tree(tree)?;
                    grown = it;
                    if stop {
                        break;
                    }
                }
                let keep = if vstate.is_some() { es.best_iter } else { grown };
                sink.end_sequence(keep)?;
                summary.best_iterations.push(keep);
                summary.grown.push(grown);
                if vstate.is_some() {
                    valid_best.push(es.best);
                }
            }
        }
        TreeMode::Mo => {
            let mut pred: Vec<f32> = base.iter().copied().cycle().take(n * m).collect();
            let mut grads = vec![0.0f64; n * m];
            let mut vstate = valid.map(|(vb, vt)| {
                let vpred: Vec<f32> = base.iter().copied().cycle().take(vb.n_rows() * m).collect();
                (vb, vpred, vt)
            });
            let mut es = EarlyStop::new(params.n_es);
            sink.begin_sequence()?;
            let mut grown = 0;
            for it in 1..=params.n_tree {
                for ((g, &p), &t) in grads.iter_mut().zip(&pred).zip(targets) {
                    *g = p as f64 - t as f64;
                }
                let tree = grower.grow(&grads, m);
                for &(node, lo, hi) in &grower.leaves {
                    let v = tree.leaf(node as usize);
                    for &r in &grower.rows[lo..hi] {
                        let r = r as usize;
                        for (a, b) in pred[r * m..r * m + m].iter_mut().zip(v) {
                            *a += *b;
                        }
                    }
                }
                let stop = match &mut vstate {
                    Some((vb, vpred, vt)) => {
                        for r in 0..vb.n_rows() {
                            let v = tree.leaf(grower.route_binned(&tree, vb, r));
                            for (a, b) in vpred[r * m..r * m + m].iter_mut().zip(v) {
                                *a += *b;
                            }
                        }
                        let score = (0..m)
                            .map(|k| rmse(&column(vpred, m, k), &column(vt, m, k)))
                            .sum::<f64>()
                            / m as f64;
                        es.update(it, score)
                    }
                    None => false,
                };
                sink.push_tree(tree)?;
                grown = it;
                if stop {
                    break;
                }
            }
            let keep = if vstate.is_some() { es.best_iter } else { grown };
            sink.end_sequence(keep)?;
            summary.best_iterations.push(keep);
            summary.grown.push(grown);
            if vstate.is_some() {
                valid_best.push(es.best);
            }
        }
    }
    if valid.is_some() {
        summary.valid_rmse = Some(valid_best);
    }
    Ok(summary)
}

/// Trains a booster in memory. See [`train_booster_into`].
pub fn train_booster(
    binned: &BinnedMatrix,
    targets: &[f32],
    m: usize,
    params: &GbdtParams,
    mode: TreeMode,
    valid: Option<(&BinnedMatrix, &[f32])>,
) -> Result<Booster> {
    let mut sink = MemorySink::new();
    train_booster_into(binned, targets, m, params, mode, valid, &mut sink)?;
    sink.into_booster()
}

#[cfg(test)]
mod tests {
    use super::super::{build_bins, save_booster, write_booster};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(n_tree: usize, depth: usize, eta: f32) -> GbdtParams {
        GbdtParams {
            n_tree,
            max_depth: depth,
            eta,
            ..GbdtParams::default()
        }
    }

    fn random_problem(seed: u64, n: usize, p: usize, m: usize) -> (Vec<f32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..n * m)
            .map(|i| x[(i / m) * p] * (1 + i % m) as f32 + rng.random_range(-0.1..0.1))
            .collect();
        (x, y)
    }

    #[test]
    fn depth_zero_predicts_mean() {
        let b = build_bins(&[0.0, 1.0], 1, 256).unwrap();
        let booster = train_booster(&b, &[1.0, 3.0], 1, &params(1, 0, 1.0), TreeMode::So, None).unwrap();
        assert_eq!(booster.predict(&[-5.0, 0.5, 9.0]).unwrap(), vec![2.0; 3]);
        assert_eq!(booster.sequences()[0][0].n_nodes(), 1);
    }

    #[test]
    fn xor_has_no_positive_gain_root_split() {
        // A balanced XOR gives every root split zero gain, so greedy growth
        // stops at the root and predicts the mean.
        let x = [0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let y = [0.0, 1.0, 1.0, 0.0];
        let b = build_bins(&x, 2, 256).unwrap();
        let booster = train_booster(&b, &y, 1, &params(1, 2, 1.0), TreeMode::So, None).unwrap();
        assert_eq!(booster.predict(&x).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn xor_with_forced_root_is_exact() {
        // Oracle: once the root is split on feature 0, each child has a
        // positive-gain split on feature 1 and the tree fits XOR exactly.
        let y = [0.0f32, 1.0, 1.0, 0.0];
        let x1 = [0.0f32, 1.0, 0.0, 1.0];
        for half in [[0usize, 1], [2, 3]] {
            let xs: Vec<f32> = half.iter().map(|&i| x1[i]).collect();
            let ys: Vec<f32> = half.iter().map(|&i| y[i]).collect();
            let b = build_bins(&xs, 1, 256).unwrap();
            let booster = train_booster(&b, &ys, 1, &params(1, 1, 1.0), TreeMode::So, None).unwrap();
            assert_eq!(booster.predict(&xs).unwrap(), ys);
        }
    }

    #[test]
    fn fits_step_function_exactly() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [0.0, 0.0, 4.0, 4.0];
        let b = build_bins(&x, 1, 256).unwrap();
        let booster = train_booster(&b, &y, 1, &params(1, 1, 1.0), TreeMode::So, None).unwrap();
        assert_eq!(booster.predict(&x).unwrap(), y.to_vec());
        assert_eq!(booster.predict(&[1.4, 1.6]).unwrap(), vec![0.0, 4.0]);
    }

    #[test]
    fn lambda_shrinks_leaves() {
        let x = [0.0, 1.0];
        let y = [0.0, 4.0];
        let b = build_bins(&x, 1, 256).unwrap();
        let mut prm = params(1, 1, 1.0);
        prm.lambda = 1.0;
        let booster = train_booster(&b, &y, 1, &prm, TreeMode::So, None).unwrap();
        // base 2, gradients -2 / +2, leaves -(+-2)/(1+1)
        assert_eq!(booster.predict(&x).unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn so_mo_identical_when_single_output() {
        let (x, y) = random_problem(11, 200, 3, 1);
        let b = build_bins(&x, 3, 256).unwrap();
        let prm = params(10, 3, 0.3);
        let so = train_booster(&b, &y, 1, &prm, TreeMode::So, None).unwrap();
        let mo = train_booster(&b, &y, 1, &prm, TreeMode::Mo, None).unwrap();
        let (mut a, mut c) = (Vec::new(), Vec::new());
        write_booster(&mut a, &so).unwrap();
        write_booster(&mut c, &mo).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn mo_shape_and_fit() {
        let (x, y) = random_problem(5, 300, 2, 3);
        let b = build_bins(&x, 2, 64).unwrap();
        let booster = train_booster(&b, &y, 3, &params(30, 4, 0.3), TreeMode::Mo, None).unwrap();
        assert_eq!(booster.sequences().len(), 1);
        let pred = booster.predict(&x).unwrap();
        assert_eq!(pred.len(), 900);
        assert!(rmse(&pred, &y) < 0.3);
    }

    #[test]
    fn early_stopping_truncates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        // Pure noise targets: validation error cannot improve for long.
        let x: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        let y: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vy: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = build_bins(&x, 1, 256).unwrap();
        let vb = b.mapper().transform(&x).unwrap();
        let mut prm = params(200, 6, 0.3);
        prm.n_es = 5;
        let mut sink = MemorySink::new();
        let s = train_booster_into(&b, &y, 1, &prm, TreeMode::So, Some((&vb, &vy)), &mut sink).unwrap();
        let booster = sink.into_booster().unwrap();
        assert!(s.grown[0] < 200);
        assert_eq!(s.grown[0], s.best_iterations[0] + 5);
        assert_eq!(booster.best_iterations(), s.best_iterations);
        assert!(s.valid_rmse.is_some());
    }

    #[test]
    fn no_early_stopping_keeps_all() {
        let (x, y) = random_problem(1, 100, 2, 2);
        let b = build_bins(&x, 2, 256).unwrap();
        let booster = train_booster(&b, &y, 2, &params(7, 2, 0.3), TreeMode::So, Some((&b, &y))).unwrap();
        assert_eq!(booster.best_iterations(), vec![7, 7]);
    }

    #[test]
    fn file_sink_matches_save() {
        let (x, y) = random_problem(4, 200, 2, 3);
        let b = build_bins(&x, 2, 256).unwrap();
        let vb = b.mapper().transform(&x).unwrap();
        let (_, vy) = random_problem(40, 200, 2, 3);
        let mut prm = params(60, 5, 0.5);
        prm.n_es = 3;
        for mode in [TreeMode::So, TreeMode::Mo] {
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.fgb");
            let c = dir.path().join("c.fgb");
            let booster = train_booster(&b, &y, 3, &prm, mode, Some((&vb, &vy))).unwrap();
            save_booster(&booster, &a).unwrap();
            let mut sink = super::super::FileSink::create(&c).unwrap();
            train_booster_into(&b, &y, 3, &prm, mode, Some((&vb, &vy)), &mut sink).unwrap();
            sink.finish().unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
        }
    }

    #[test]
    fn shape_errors() {
        let b = build_bins(&[0.0, 1.0], 1, 256).unwrap();
        assert!(matches!(
            train_booster(&b, &[1.0], 1, &params(1, 1, 1.0), TreeMode::So, None),
            Err(GbdtError::ShapeMismatch(_))
        ));
        assert!(matches!(
            train_booster(&b, &[], 0, &params(1, 1, 1.0), TreeMode::So, None),
            Err(GbdtError::EmptyTargets)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn training_loss_non_increasing(seed in any::<u64>(), depth in 1usize..5, eta in 0.05f32..1.0, mo in any::<bool>()) {
            let (x, y) = random_problem(seed, 120, 3, 2);
            let b = build_bins(&x, 3, 32).unwrap();
            let mode = if mo { TreeMode::Mo } else { TreeMode::So };
            let booster = train_booster(&b, &y, 2, &params(15, depth, eta), mode, None).unwrap();
            let mut prev = vec![f64::INFINITY; 2];
            let mut prev_total = f64::INFINITY;
            for iters in 0..=15 {
                let mut truncated = booster.clone();
                for s in truncated.seqs.iter_mut() {
                    s.truncate(iters);
                }
                let pred = truncated.predict(&x).unwrap();
                let per: Vec<f64> = (0..2).map(|k| rmse(&column(&pred, 2, k), &column(&y, 2, k))).collect();
                let total: f64 = per.iter().map(|l| l * l).sum();
                if mode == TreeMode::So {
                    for k in 0..2 {
                        prop_assert!(per[k] <= prev[k] * (1.0 + 1e-6), "round {} output {}: {} > {}", iters, k, per[k], prev[k]);
                    }
                } else {
                    prop_assert!(total <= prev_total * (1.0 + 1e-6), "round {}: {} > {}", iters, total, prev_total);
                }
                prev = per;
                prev_total = total;
            }
        }

        #[test]
        fn node_count_bound(seed in any::<u64>(), depth in 0usize..6) {
            let (x, y) = random_problem(seed, 100, 2, 1);
            let b = build_bins(&x, 2, 256).unwrap();
            let booster = train_booster(&b, &y, 1, &params(3, depth, 0.5), TreeMode::So, None).unwrap();
            for t in booster.sequences().iter().flatten() {
                prop_assert!(t.n_nodes() <= (1 << (depth + 1)) - 1);
                prop_assert!(t.depth() <= depth);
            }
        }

        #[test]
        fn deterministic(seed in any::<u64>()) {
            let (x, y) = random_problem(seed, 80, 2, 2);
            let b = build_bins(&x, 2, 256).unwrap();
            let prm = params(4, 3, 0.3);
            let a = train_booster(&b, &y, 2, &prm, TreeMode::Mo, None).unwrap();
            let c = train_booster(&b, &y, 2, &prm, TreeMode::Mo, None).unwrap();
            let (mut ba, mut bc) = (Vec::new(), Vec::new());
            write_booster(&mut ba, &a).unwrap();
            write_booster(&mut bc, &c).unwrap();
            prop_assert_eq!(ba, bc);
        }
    }
}
