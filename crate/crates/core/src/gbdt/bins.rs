use std::sync::Arc;

use super::{GbdtError, Result};

/// Per-feature bin upper edges. A value `x` falls in the first bin `i` with
/// `x <= edges[i]`, or in the last bin if it exceeds every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct BinMapper {
    edges: Vec<Vec<f32>>,
    offsets: Vec<usize>,
}

fn midpoint(a: f32, b: f32) -> f32 {
    let mid = ((a as f64 + b as f64) * 0.5) as f32;
    if mid >= b {
        a
    } else {
        mid
    }
}

fn feature_edges(col: &mut [f32], max_bins: usize) -> Vec<f32> {
    col.sort_unstable_by(f32::total_cmp);
    let mut distinct: Vec<f32> = Vec::new();
    for &v in col.iter() {
        if distinct.last() != Some(&v) {
            distinct.push(v);
            if distinct.len() > max_bins {
                break;
            }
        }
    }
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| midpoint(w[0], w[1])).collect();
    }
    let n = col.len();
    let mut edges: Vec<f32> = Vec::with_capacity(max_bins - 1);
    for i in 1..max_bins {
        let k = i * n / max_bins;
        if k == 0 || k >= n {
            continue;
        }
        let (a, b) = (col[k - 1], col[k]);
        if a == b {
            continue;
        }
        let e = midpoint(a, b);
        if edges.last().is_none_or(|&last| e > last) {
            edges.push(e);
        }
    }
    edges
}

impl BinMapper {
    /// Fits edges on a row-major `[n, p]` matrix.
    pub fn fit(x: &[f32], p: usize, max_bins: usize) -> Self {
        let n = if p == 0 { 0 } else { x.len() / p };
        let max_bins = max_bins.clamp(2, 65536);
        let mut col = vec![0f32; n];
        let edges: Vec<Vec<f32>> = (0..p)
            .map(|j| {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = x[i * p + j];
                }
                feature_edges(&mut col, max_bins)
            })
            .collect();
        Self::from_edges(edges)
    }

    pub fn from_edges(edges: Vec<Vec<f32>>) -> Self {
        let mut offsets = Vec::with_capacity(edges.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for e in &edges {
            acc += e.len() + 1;
            offsets.push(acc);
        }
        Self { edges, offsets }
    }

    pub fn n_features(&self) -> usize {
        self.edges.len()
    }

    pub fn n_bins(&self, j: usize) -> usize {
        self.edges[j].len() + 1
    }

    pub fn max_n_bins(&self) -> usize {
        self.edges.iter().map(|e| e.len() + 1).max().unwrap_or(1)
    }

    pub fn edges(&self, j: usize) -> &[f32] {
        &self.edges[j]
    }

    /// Start of feature `j` in a histogram laid out feature after feature.
    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total_bins(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn bin(&self, j: usize, x: f32) -> usize {
        self.edges[j].partition_point(|&e| e < x)
    }

    /// Bins a row-major matrix with the fitted edges.
    pub fn transform(self: &Arc<Self>, x: &[f32]) -> Result<BinnedMatrix> {
        let p = self.n_features();
        if p == 0 || x.len() % p != 0 {
            return Err(GbdtError::ShapeMismatch(format!(
                "{} values do not form rows of width {p}",
                x.len()
            )));
        }
        let n_rows = x.len() / p;
        let bins = if self.max_n_bins() <= 256 {
            BinStore::U8(x.iter().enumerate().map(|(i, &v)| self.bin(i % p, v) as u8).collect())
        } else {
            BinStore::U16(x.iter().enumerate().map(|(i, &v)| self.bin(i % p, v) as u16).collect())
        };
        Ok(BinnedMatrix {
            mapper: Arc::clone(self),
            bins,
            n_rows,
            p,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BinStore {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

/// Row-major bin indices together with the mapper that produced them.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    mapper: Arc<BinMapper>,
    bins: BinStore,
    n_rows: usize,
    p: usize,
}

impl BinnedMatrix {
    pub fn mapper(&self) -> &Arc<BinMapper> {
        &self.mapper
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn store(&self) -> &BinStore {
        &self.bins
    }

    pub fn get(&self, row: usize, j: usize) -> usize {
        match &self.bins {
            BinStore::U8(b) => b[row * self.p + j] as usize,
            BinStore::U16(b) => b[row * self.p + j] as usize,
        }
    }

    pub fn heap_bytes(&self) -> usize {
        match &self.bins {
            BinStore::U8(b) => b.len(),
            BinStore::U16(b) => b.len() * 2,
        }
    }
}

/// Fits a mapper on `x` and bins it.
pub fn build_bins(x: &[f32], p: usize, max_bins: usize) -> Result<BinnedMatrix> {
    let mapper = Arc::new(BinMapper::fit(x, p, max_bins));
    mapper.transform(x)
}
