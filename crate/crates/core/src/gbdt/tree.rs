use super::{GbdtError, Result, TreeMode};

pub(crate) const LEAF: u32 = u32::MAX;

/// Internal node or leaf. For a leaf, `feature == u32::MAX` and `left` is the
/// offset of its values in [`Tree::leaf_values`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub feature: u32,
    pub split: f32,
    pub left: u32,
    pub right: u32,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.feature == LEAF
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    pub(crate) nodes: Vec<Node>,
    pub(crate) leaf_values: Vec<f32>,
    pub(crate) m_leaf: usize,
}

impl Tree {
    pub fn new(m_leaf: usize) -> Self {
        Self {
            nodes: Vec::new(),
            leaf_values: Vec::new(),
            m_leaf,
        }
    }

    /// A single leaf.
    pub fn constant(values: &[f32]) -> Self {
        let mut t = Self::new(values.len());
        t.push_leaf(values);
        t
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn m_leaf(&self) -> usize {
        self.m_leaf
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            let n = t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + go(t, n.left as usize).max(go(t, n.right as usize))
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            go(self, 0)
        }
    }

    pub fn push_leaf(&mut self, values: &[f32]) -> u32 {
        debug_assert_eq!(values.len(), self.m_leaf);
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            feature: LEAF,
            split: 0.0,
            left: self.leaf_values.len() as u32,
            right: 0,
        });
        self.leaf_values.extend_from_slice(values);
        id
    }

    pub fn leaf(&self, node: usize) -> &[f32] {
        let off = self.nodes[node].left as usize;
        &self.leaf_values[off..off + self.m_leaf]
    }

    /// Index of the leaf reached by `row`.
    #[inline]
    pub fn route(&self, row: &[f32]) -> usize {
        let mut i = 0usize;
        loop {
            let n = self.nodes[i];
            if n.feature == LEAF {
                return i;
            }
            i = if row[n.feature as usize] <= n.split {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    pub fn predict_row(&self, row: &[f32]) -> &[f32] {
        self.leaf(self.route(row))
    }

    /// Checks structure: children point forward and in range, features are
    /// below `p`, and every leaf has values.
    pub(crate) fn validate(&self, p: usize) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(GbdtError::CorruptFile("empty tree".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_leaf() {
                if node.left as usize + self.m_leaf > self.leaf_values.len() {
                    return Err(GbdtError::CorruptFile(format!("leaf {i} values out of range")));
                }
                continue;
            }
            let (l, r) = (node.left as usize, node.right as usize);
            if node.feature as usize >= p {
                return Err(GbdtError::CorruptFile(format!("node {i} uses feature {}", node.feature)));
            }
            if l <= i || r <= i || l >= n || r >= n || l == r {
                return Err(GbdtError::CorruptFile(format!("node {i} has invalid children")));
            }
        }
        Ok(())
    }
}

const MO_BLOCK_FLOATS: usize = 4096;

fn add_scalar(o: &mut [f32], v: &[f32]) {
    for (a, b) in o.iter_mut().zip(v) {
        *a += *b;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn add_avx2(o: &mut [f32], v: &[f32]) {
    add_scalar(o, v)
}

/// Element-wise `o += v`, widened to AVX2 when the CPU has it. Lane width
/// does not change any result.
fn add_kernel() -> fn(&mut [f32], &[f32]) {
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") {
        return |o, v| unsafe { add_avx2(o, v) };
    }
    add_scalar
}

/// A trained model for one `(t, y)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Booster {
    pub(crate) mode: TreeMode,
    pub(crate) m: usize,
    pub(crate) p: usize,
    pub(crate) eta: f32,
    pub(crate) base: Vec<f32>,
    pub(crate) seqs: Vec<Vec<Tree>>,
}

impl Booster {
    pub fn new(mode: TreeMode, m: usize, p: usize, eta: f32, base: Vec<f32>) -> Self {
        let mode = mode.canonical(m);
        let n_seq = match mode {
            TreeMode::So => m,
            TreeMode::Mo => 1,
        };
        Self {
            mode,
            m,
            p,
            eta,
            base,
            seqs: vec![Vec::new(); n_seq],
        }
    }

    pub fn mode(&self) -> TreeMode {
        self.mode
    }

    pub fn n_outputs(&self) -> usize {
        self.m
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn eta(&self) -> f32 {
        self.eta
    }

    pub fn base(&self) -> &[f32] {
        &self.base
    }

    pub fn sequences(&self) -> &[Vec<Tree>] {
        &self.seqs
    }

    pub fn m_leaf(&self) -> usize {
        match self.mode {
            TreeMode::So => 1,
            TreeMode::Mo => self.m,
        }
    }

    pub fn push_tree(&mut self, seq: usize, tree: Tree) {
        self.seqs[seq].push(tree);
    }

    /// Retained trees per sequence.
    pub fn best_iterations(&self) -> Vec<usize> {
        self.seqs.iter().map(Vec::len).collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.seqs.iter().flatten().map(Tree::n_nodes).sum()
    }

    /// Approximate heap footprint.
    pub fn heap_bytes(&self) -> usize {
        self.seqs
            .iter()
            .flatten()
            .map(|t| t.nodes.capacity() * std::mem::size_of::<Node>() + t.leaf_values.capacity() * 4)
            .sum()
    }

    /// Predicts a row-major `[n, p]` matrix into `[n, m]`.
    pub fn predict(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        self.predict_into(x, &mut out)?;
        Ok(out)
    }

    /// As [`Booster::predict`], reusing `out`.
    pub fn predict_into(&self, x: &[f32], out: &mut Vec<f32>) -> Result<()> {
        let (p, m) = (self.p, self.m);
        if p == 0 || x.len() % p != 0 {
            return Err(GbdtError::ShapeMismatch(format!(
                "{} values do not form rows of width {p}",
                x.len()
            )));
        }
        let n = x.len() / p;
        out.clear();
        out.reserve(n * m);
        for _ in 0..n {
            out.extend_from_slice(&self.base);
        }
        match self.mode {
            TreeMode::So => {
                for (i, row) in x.chunks_exact(p).enumerate() {
                    let o = &mut out[i * m..(i + 1) * m];
                    for (j, seq) in self.seqs.iter().enumerate() {
                        let mut acc = o[j];
                        for t in seq {
                            acc += t.predict_row(row)[0];
                        }
                        o[j] = acc;
                    }
                }
            }
            TreeMode::Mo => {
                // Tree-major over row blocks whose outputs stay in cache. Each
                // output still sums its trees in sequence order.
                let add = add_kernel();
                let block = (MO_BLOCK_FLOATS / m.max(1)).clamp(1, 1024);
                for (xb, ob) in x.chunks(block * p).zip(out.chunks_mut(block * m)) {
                    for t in &self.seqs[0] {
                        for (row, o) in xb.chunks_exact(p).zip(ob.chunks_exact_mut(m)) {
                            add(o, t.predict_row(row));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
