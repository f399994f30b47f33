//! Tabular data ingestion, class ordering, and min-max scaling.
//!
//! A [`Dataset`] is an fp32 row-major feature matrix with dense integer class
//! labels. Unlabelled data is modelled as a single class (`n_y == 1`), so the
//! training and generation code only ever deals with the conditional case.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("missing value at data row {row}, column {col}")]
    MissingValue { row: usize, col: usize },
    #[error("non-numeric value {value:?} at data row {row}, column {col}")]
    NonNumeric { row: usize, col: usize, value: String },
    #[error("file contains no data rows")]
    EmptyFile,
    #[error("label column {0:?} not found")]
    LabelColumnNotFound(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid label {label} (n_y = {n_y})")]
    InvalidLabel { label: u32, n_y: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TabularError>;

/// Feature matrix plus dense class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    n: usize,
    p: usize,
    n_y: usize,
    /// Column names of the features, in order.
    pub feature_names: Vec<String>,
    /// Name of the label column, `None` for unconditional data.
    pub label_name: Option<String>,
    /// Original label text for each dense class index.
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from row-major features and dense labels.
    ///
    /// Every class in `0..n_y` must occur at least once and all features must
    /// be finite.
    pub fn new(features: Vec<f32>, p: usize, labels: Vec<u32>, n_y: usize) -> Result<Self> {
        Self::build(features, p, labels, n_y, true)
    }

    /// As [`Dataset::new`], but classes may be absent, as in generated data.
    pub fn new_allow_missing(features: Vec<f32>, p: usize, labels: Vec<u32>, n_y: usize) -> Result<Self> {
        Self::build(features, p, labels, n_y, false)
    }

    fn build(features: Vec<f32>, p: usize, labels: Vec<u32>, n_y: usize, require_all: bool) -> Result<Self> {
        if p == 0 || features.len() % p != 0 {
            return Err(TabularError::ShapeMismatch(format!(
                "{} values do not form rows of width {p}",
                features.len()
            )));
        }
        let n = features.len() / p;
        if n == 0 {
            return Err(TabularError::EmptyFile);
        }
        if labels.len() != n {
            return Err(TabularError::ShapeMismatch(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(TabularError::NonNumeric {
                row: i / p,
                col: i % p,
                value: features[i].to_string(),
            });
        }
        let mut seen = vec![false; n_y];
        for &l in &labels {
            match seen.get_mut(l as usize) {
                Some(s) => *s = true,
                None => return Err(TabularError::InvalidLabel { label: l, n_y }),
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s).filter(|_| require_all) {
            return Err(TabularError::InvalidLabel {
                label: missing as u32,
                n_y,
            });
        }
        Ok(Self {
            features,
            labels,
            n,
            p,
            n_y,
            feature_names: (0..p).map(|j| format!("x{j}")).collect(),
            label_name: None,
            class_names: (0..n_y).map(|c| c.to_string()).collect(),
        })
    }

    /// Unconditional dataset: every row belongs to class 0.
    pub fn unlabeled(features: Vec<f32>, p: usize) -> Result<Self> {
        let n = if p == 0 { 0 } else { features.len() / p };
        Self::new(features, p, vec![0; n], 1)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    pub fn is_conditional(&self) -> bool {
        self.label_name.is_some()
    }

    /// Number of rows in each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_y];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn into_parts(self) -> (Vec<f32>, Vec<u32>) {
        (self.features, self.labels)
    }

    /// Replaces the feature matrix, keeping labels and metadata.
    pub fn with_features(mut self, features: Vec<f32>) -> Result<Self> {
        if features.len() != self.n * self.p {
            return Err(TabularError::ShapeMismatch(format!(
                "expected {} values, got {}",
                self.n * self.p,
                features.len()
            )));
        }
        self.features = features;
        Ok(self)
    }

    /// Copies the metadata (names) of `other` onto this dataset.
    pub fn with_names_from(mut self, other: &Dataset) -> Self {
        if other.p == self.p {
            self.feature_names = other.feature_names.clone();
        }
        self.label_name = other.label_name.clone();
        if other.n_y == self.n_y {
            self.class_names = other.class_names.clone();
        }
        self
    }

    /// Rows selected by `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(idx.len() * self.p);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        // A subset may not contain every class; keep the class space as-is
        // only when it does.
        let n = idx.len();
        if n == 0 {
            return Err(TabularError::EmptyFile);
        }
        let mut out = Self {
            features,
            labels,
            n,
            p: self.p,
            n_y: self.n_y,
            feature_names: self.feature_names.clone(),
            label_name: self.label_name.clone(),
            class_names: self.class_names.clone(),
        };
        let counts = out.class_counts();
        if counts.iter().any(|&c| c == 0) {
            // Re-index densely over the classes present.
            let remap: Vec<Option<u32>> = {
                let mut next = 0u32;
                counts
                    .iter()
                    .map(|&c| {
                        (c > 0).then(|| {
                            next += 1;
                            next - 1
                        })
                    })
                    .collect()
            };
            for l in out.labels.iter_mut() {
                *l = remap[*l as usize].unwrap();
            }
            out.class_names = self
                .class_names
                .iter()
                .zip(&counts)
                .filter(|(_, &c)| c > 0)
                .map(|(s, _)| s.clone())
                .collect();
            out.n_y = out.class_names.len();
        }
        Ok(out)
    }

    /// Writes the dataset as CSV with a header row; the label column comes
    /// last when the dataset is conditional.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.write_csv_with(w, true)
    }

    /// As [`Dataset::write_csv`], optionally without the header row, for
    /// appending blocks to one file.
    pub fn write_csv_with<W: std::io::Write>(&self, w: W, header_row: bool) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        if let Some(name) = &self.label_name {
            header.push(name);
        }
        if header_row {
            wtr.write_record(&header)?;
        }
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n {
            record.clear();
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            if self.label_name.is_some() {
                record.push(self.class_names[self.labels[i] as usize].clone());
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty()
        || c.eq_ignore_ascii_case("nan")
        || c.eq_ignore_ascii_case("na")
        || c.eq_ignore_ascii_case("null")
        || c == "?"
}

/// Loads a CSV file. Without a header, columns are named `c0, c1, ...` and
/// `label_col` may be given either as such a name or as a 0-based index.
pub fn load_csv(path: impl AsRef<Path>, label_col: Option<&str>, has_header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, label_col, has_header)
}

/// Same as [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, label_col: Option<&str>, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header: Option<Vec<String>> = if has_header {
        Some(rdr.headers()?.iter().map(str::to_owned).collect())
    } else {
        None
    };

    let mut records = Vec::new();
    for rec in rdr.records() {
        records.push(rec?);
    }
    if records.is_empty() {
        return Err(TabularError::EmptyFile);
    }
    let width = records[0].len();
    let names: Vec<String> = header.unwrap_or_else(|| (0..width).map(|j| format!("c{j}")).collect());

    let label_idx = match label_col {
        None => None,
        Some(name) => {
            let by_name = names.iter().position(|h| h == name);
            let by_index = if has_header {
                None
            } else {
                name.parse::<usize>().ok().filter(|&i| i < width)
            };
            match by_name.or(by_index) {
                Some(i) => Some(i),
                None => return Err(TabularError::LabelColumnNotFound(name.to_owned())),
            }
        }
    };

    let p = width - usize::from(label_idx.is_some());
    if p == 0 {
        return Err(TabularError::ShapeMismatch("no feature columns".into()));
    }
    let mut features = Vec::with_capacity(records.len() * p);
    let mut raw_labels = Vec::with_capacity(records.len());
    for (row, rec) in records.iter().enumerate() {
        for (col, cell) in rec.iter().enumerate() {
            if Some(col) == label_idx {
                if is_missing(cell) {
                    return Err(TabularError::MissingValue { row, col });
                }
                raw_labels.push(cell.trim().to_owned());
                continue;
            }
            if is_missing(cell) {
                return Err(TabularError::MissingValue { row, col });
            }
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() && (v as f32).is_finite() => features.push(v as f32),
                _ => {
                    return Err(TabularError::NonNumeric {
                        row,
                        col,
                        value: cell.to_owned(),
                    })
                }
            }
        }
    }

    let (labels, class_names) = match label_idx {
        Some(_) => factorize_labels(&raw_labels),
        None => (vec![0; records.len()], vec!["0".to_owned()]),
    };
    let n_y = class_names.len();
    let mut ds = Dataset::new(features, p, labels, n_y)?;
    ds.feature_names = names
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_idx)
        .map(|(_, s)| s.clone())
        .collect();
    ds.label_name = label_idx.map(|i| names[i].clone());
    ds.class_names = class_names;
    Ok(ds)
}

/// Maps raw label strings to dense indices in sorted order: numerically when
/// every label is an integer, lexicographically otherwise.
fn factorize_labels(raw: &[String]) -> (Vec<u32>, Vec<String>) {
    let ints: Option<Vec<i64>> = raw.iter().map(|s| s.parse::<i64>().ok()).collect();
    match ints {
        Some(ints) => {
            let uniq: Vec<i64> = ints.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            let labels = ints
                .iter()
                .map(|v| uniq.binary_search(v).unwrap() as u32)
                .collect();
            (labels, uniq.iter().map(|v| v.to_string()).collect())
        }
        None => {
            let uniq: Vec<&str> = raw
                .iter()
                .map(String::as_str)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let labels = raw
                .iter()
                .map(|v| uniq.binary_search(&v.as_str()).unwrap() as u32)
                .collect();
            (labels, uniq.iter().map(|s| (*s).to_owned()).collect())
        }
    }
}

/// Row permutation and per-class row ranges of a class-sorted dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    /// `order[i]` is the input row placed at sorted position `i`.
    pub order: Vec<usize>,
    /// Half-open row range of each class in the sorted dataset.
    pub slices: Vec<Range<usize>>,
}

impl ClassIndex {
    /// Class ranges over data duplicated `k` times with `repeat` layout.
    pub fn dup_slices(&self, k: usize) -> Vec<Range<usize>> {
        self.slices.iter().map(|r| r.start * k..r.end * k).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.slices.iter().map(|r| r.len()).collect()
    }

    pub fn largest_class(&self) -> usize {
        self.slices.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    /// Class of the sorted row `i`.
    pub fn class_of(&self, i: usize) -> usize {
        self.slices.partition_point(|r| r.end <= i)
    }
}

/// Stable sort of rows by label.
pub fn sort_by_class(ds: &Dataset) -> (Dataset, ClassIndex) {
    let mut order: Vec<usize> = (0..ds.n).collect();
    order.sort_by_key(|&i| ds.labels[i]);
    let mut features = Vec::with_capacity(ds.features.len());
    for &i in &order {
        features.extend_from_slice(ds.row(i));
    }
    let labels: Vec<u32> = order.iter().map(|&i| ds.labels[i]).collect();
    let mut slices = Vec::with_capacity(ds.n_y);
    let mut start = 0;
    for count in ds.class_counts() {
        slices.push(start..start + count);
        start += count;
    }
    let sorted = Dataset {
        features,
        labels,
        ..ds.clone()
    };
    (sorted, ClassIndex { order, slices })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalerMode {
    Global,
    #[default]
    PerClass,
}

/// Min-max scaler to `[-1, 1]`, either one fit for all rows or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassScaler {
    pub mode: ScalerMode,
    /// `min[c][j]`; a single row in global mode.
    pub min: Vec<Vec<f32>>,
    pub max: Vec<Vec<f32>>,
}

impl PerClassScaler {
    /// Fits the scaler. In per-class mode `ds` must be sorted by class so that
    /// `idx` describes its rows.
    pub fn fit(ds: &Dataset, idx: &ClassIndex, mode: ScalerMode) -> Self {
        let p = ds.p;
        let ranges: Vec<Range<usize>> = match mode {
            ScalerMode::Global => vec![0..ds.n],
            ScalerMode::PerClass => idx.slices.clone(),
        };
        let mut min = Vec::with_capacity(ranges.len());
        let mut max = Vec::with_capacity(ranges.len());
        for r in ranges {
            let mut lo = vec![f32::INFINITY; p];
            let mut hi = vec![f32::NEG_INFINITY; p];
            for i in r {
                for (j, &v) in ds.row(i).iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
            min.push(lo);
            max.push(hi);
        }
        Self { mode, min, max }
    }

    fn group(&self, class: u32) -> usize {
        match self.mode {
            ScalerMode::Global => 0,
            ScalerMode::PerClass => class as usize,
        }
    }

    pub fn n_features(&self) -> usize {
        self.min.first().map_or(0, Vec::len)
    }

    /// Scales one value of feature `j` in class `class`.
    pub fn transform_value(&self, class: u32, j: usize, x: f32) -> f32 {
        let g = self.group(class);
        let (lo, hi) = (self.min[g][j] as f64, self.max[g][j] as f64);
        if hi <= lo {
            return 0.0;
        }
        let y = 2.0 * (x as f64 - lo) / (hi - lo) - 1.0;
        y as f32
    }

    pub fn inverse_value(&self, class: u32, j: usize, y: f32) -> f32 {
        let g = self.group(class);
        let (lo, hi) = (self.min[g][j] as f64, self.max[g][j] as f64);
        if hi <= lo {
            return self.min[g][j];
        }
        ((y as f64 + 1.0) * 0.5 * (hi - lo) + lo) as f32
    }

    fn map(&self, ds: &Dataset, f: impl Fn(u32, usize, f32) -> f32) -> Dataset {
        let p = ds.p;
        let features = ds
            .features
            .iter()
            .enumerate()
            .map(|(i, &x)| f(ds.labels[i / p], i % p, x))
            .collect();
        Dataset {
            features,
            ..ds.clone()
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        self.map(ds, |c, j, x| self.transform_value(c, j, x))
    }

    pub fn invert(&self, ds: &Dataset) -> Dataset {
        self.map(ds, |c, j, x| self.inverse_value(c, j, x))
    }

    /// In-place inverse over a block of rows that all belong to `class`.
    pub fn invert_block(&self, class: u32, block: &mut [f32]) {
        let p = self.n_features();
        for (i, v) in block.iter_mut().enumerate() {
            *v = self.inverse_value(class, i % p, *v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv(s: &str, label: Option<&str>, header: bool) -> Result<Dataset> {
        read_csv(s.as_bytes(), label, header)
    }

    #[test]
    fn load_with_label() {
        let ds = csv("a,b,y\n0,1,0\n2,3,1\n4,5,0", Some("y"), true).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.n_y()), (3, 2, 2));
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.features(), &[0., 1., 2., 3., 4., 5.]);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn load_without_label_is_single_class() {
        let ds = csv("a,b,y\n0,1,0\n2,3,1\n4,5,0", None, true).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.n_y()), (3, 3, 1));
        assert!(ds.labels().iter().all(|&l| l == 0));
        assert!(!ds.is_conditional());
    }

    #[test]
    fn nan_cell_is_missing() {
        let err = csv("a,b\n0,NaN\n", None, true).unwrap_err();
        assert!(matches!(err, TabularError::MissingValue { row: 0, col: 1 }));
        let err = csv("a,b\n0,\n", None, true).unwrap_err();
        assert!(matches!(err, TabularError::MissingValue { row: 0, col: 1 }));
    }

    #[test]
    fn other_errors() {
        assert!(matches!(
            csv("a,b\n0,x\n", None, true).unwrap_err(),
            TabularError::NonNumeric { row: 0, col: 1, .. }
        ));
        assert!(matches!(csv("a,b\n", None, true).unwrap_err(), TabularError::EmptyFile));
        assert!(matches!(csv("", None, false).unwrap_err(), TabularError::EmptyFile));
        assert!(matches!(
            csv("a,b\n1,2\n", Some("z"), true).unwrap_err(),
            TabularError::LabelColumnNotFound(_)
        ));
        assert!(matches!(
            csv("a,b\n1,inf\n", None, true).unwrap_err(),
            TabularError::NonNumeric { .. }
        ));
    }

    #[test]
    fn headerless_label_by_index() {
        let ds = csv("1,2,cat\n3,4,dog\n5,6,cat\n", Some("2"), false).unwrap();
        assert_eq!(ds.n_y(), 2);
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
    }

    #[test]
    fn string_labels_sorted_lexicographically() {
        let ds = csv("x,y\n1,zeta\n2,alpha\n3,mid\n", Some("y"), true).unwrap();
        assert_eq!(ds.class_names, vec!["alpha", "mid", "zeta"]);
        assert_eq!(ds.labels(), &[2, 0, 1]);
    }

    #[test]
    fn integer_labels_sorted_numerically() {
        let ds = csv("x,y\n1,10\n2,-3\n3,2\n", Some("y"), true).unwrap();
        assert_eq!(ds.class_names, vec!["-3", "2", "10"]);
        assert_eq!(ds.labels(), &[2, 0, 1]);
    }

    fn labelled(labels: &[u32], n_y: usize) -> Dataset {
        let features: Vec<f32> = (0..labels.len()).map(|i| i as f32).collect();
        Dataset::new(features, 1, labels.to_vec(), n_y).unwrap()
    }

    #[test]
    fn sort_two_classes() {
        let (sorted, idx) = sort_by_class(&labelled(&[1, 0, 1, 0], 2));
        assert_eq!(idx.order, vec![1, 3, 0, 2]);
        assert_eq!(idx.slices, vec![0..2, 2..4]);
        assert_eq!(sorted.labels(), &[0, 0, 1, 1]);
        assert_eq!(sorted.features(), &[1., 3., 0., 2.]);
    }

    #[test]
    fn sort_identity() {
        let (_, idx) = sort_by_class(&labelled(&[0, 0, 1], 2));
        assert_eq!(idx.order, vec![0, 1, 2]);
        assert_eq!(idx.slices, vec![0..2, 2..3]);
    }

    #[test]
    fn dup_slices_balanced() {
        let (_, idx) = sort_by_class(&labelled(&[0, 1, 2, 0, 1, 2], 3));
        assert_eq!(idx.dup_slices(4), vec![0..8, 8..16, 16..24]);
        assert_eq!(idx.class_of(0), 0);
        assert_eq!(idx.class_of(3), 1);
        assert_eq!(idx.class_of(5), 2);
    }

    #[test]
    fn single_class_slice() {
        let ds = Dataset::unlabeled(vec![1., 2., 3.], 1).unwrap();
        let (_, idx) = sort_by_class(&ds);
        assert_eq!(idx.slices, vec![0..3]);
    }

    #[test]
    fn scaler_midpoint_and_endpoints() {
        let ds = Dataset::unlabeled(vec![0., 5., 10.], 1).unwrap();
        let (ds, idx) = sort_by_class(&ds);
        let s = PerClassScaler::fit(&ds, &idx, ScalerMode::Global);
        assert_eq!(s.apply(&ds).features(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn scaler_per_class_vs_global() {
        let ds = Dataset::new(vec![0., 1., 100., 200., 150.], 1, vec![0, 0, 1, 1, 1], 2).unwrap();
        let (ds, idx) = sort_by_class(&ds);
        let per = PerClassScaler::fit(&ds, &idx, ScalerMode::PerClass);
        let global = PerClassScaler::fit(&ds, &idx, ScalerMode::Global);
        assert_eq!(per.transform_value(1, 0, 150.0), 0.0);
        assert_eq!(global.transform_value(1, 0, 150.0), 0.5);
    }

    #[test]
    fn degenerate_feature() {
        let ds = Dataset::unlabeled(vec![3., 3., 3.], 1).unwrap();
        let (ds, idx) = sort_by_class(&ds);
        let s = PerClassScaler::fit(&ds, &idx, ScalerMode::PerClass);
        let scaled = s.apply(&ds);
        assert_eq!(scaled.features(), &[0., 0., 0.]);
        assert_eq!(s.invert(&scaled).features(), &[3., 3., 3.]);
    }

    #[test]
    fn csv_round_trip_keeps_label_last() {
        let ds = csv("y,a,b\nu,0,1\nv,2,3\n", Some("y"), true).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a,b,y\n0,1,u\n2,3,v\n");
        let back = read_csv(buf.as_slice(), Some("y"), true).unwrap();
        assert_eq!(back, ds);
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..4, 1usize..5, 2usize..40).prop_flat_map(|(p, n_y, n)| {
            let n = n.max(n_y);
            (
                proptest::collection::vec(-1e4f32..1e4, n * p),
                proptest::collection::vec(0..n_y as u32, n),
            )
                .prop_map(move |(f, mut l)| {
                    for c in 0..n_y {
                        l[c] = c as u32;
                    }
                    Dataset::new(f, p, l, n_y).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn partition_and_stability(ds in arb_dataset()) {
            let (sorted, idx) = sort_by_class(&ds);
            // slices partition [0, n) in order
            let mut next = 0;
            for (c, r) in idx.slices.iter().enumerate() {
                prop_assert_eq!(r.start, next);
                next = r.end;
                prop_assert!(sorted.labels()[r.clone()].iter().all(|&l| l as usize == c));
                prop_assert!(idx.order[r.clone()].windows(2).all(|w| w[0] < w[1]));
            }
            prop_assert_eq!(next, ds.n());
            let k = 3;
            let dup = idx.dup_slices(k);
            prop_assert_eq!(dup.last().unwrap().end, ds.n() * k);
            for (i, &src) in idx.order.iter().enumerate() {
                prop_assert_eq!(sorted.row(i), ds.row(src));
            }
        }

        #[test]
        fn scaler_round_trip(ds in arb_dataset(), global in any::<bool>()) {
            let (ds, idx) = sort_by_class(&ds);
            let mode = if global { ScalerMode::Global } else { ScalerMode::PerClass };
            let s = PerClassScaler::fit(&ds, &idx, mode);
            let scaled = s.apply(&ds);
            let back = s.invert(&scaled);
            for i in 0..ds.n() {
                let c = ds.labels()[i] as usize;
                let g = if global { 0 } else { c };
                for j in 0..ds.p() {
                    let y = scaled.row(i)[j];
                    prop_assert!((-1.0..=1.0).contains(&y));
                    let scale = s.min[g][j].abs().max(s.max[g][j].abs()).max(f32::MIN_POSITIVE);
                    let err = (back.row(i)[j] - ds.row(i)[j]).abs();
                    prop_assert!(err <= 1e-5 * scale, "err {} scale {}", err, scale);
                }
            }
        }
    }
}
