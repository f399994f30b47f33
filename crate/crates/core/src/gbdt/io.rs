//! Little-endian booster file format and the sinks trees are streamed into.
//!
//! ```text
//! "FGB1" | u32 version | u32 mode | u32 m | u32 p | f32 eta | f32 base[m]
//! u32 n_seq
//!   per sequence: u32 n_trees
//!     per tree: u32 n_nodes
//!       per node: u8 is_leaf | u32 feature | f32 split | u32 left | u32 right | f32 leaf[m_leaf]
//! ```

use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use super::tree::{Booster, Node, Tree, LEAF};
use super::{GbdtError, Result, TreeMode};

pub const MAGIC: &[u8; 4] = b"FGB1";
pub const VERSION: u32 = 1;

fn header_bytes(mode: TreeMode, m: usize, p: usize, eta: f32, base: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(28 + 4 * m);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&mode.code().to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&eta.to_le_bytes());
    for b in base {
        buf.extend_from_slice(&b.to_le_bytes());
    }
    let n_seq = match mode {
        TreeMode::So => m,
        TreeMode::Mo => 1,
    };
    buf.extend_from_slice(&(n_seq as u32).to_le_bytes());
    buf
}

fn encode_tree(tree: &Tree, buf: &mut Vec<u8>) {
    let m_leaf = tree.m_leaf();
    buf.extend_from_slice(&(tree.n_nodes() as u32).to_le_bytes());
    for (i, n) in tree.nodes().iter().enumerate() {
        if n.is_leaf() {
            buf.push(1);
            buf.extend_from_slice(&[0u8; 16]);
            for v in tree.leaf(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        } else {
            buf.push(0);
            buf.extend_from_slice(&n.feature.to_le_bytes());
            buf.extend_from_slice(&n.split.to_le_bytes());
            buf.extend_from_slice(&n.left.to_le_bytes());
            buf.extend_from_slice(&n.right.to_le_bytes());
            buf.extend(std::iter::repeat_n(0u8, 4 * m_leaf));
        }
    }
}

/// Size in bytes of one node record.
pub fn node_record_size(m_leaf: usize) -> usize {
    17 + 4 * m_leaf
}

/// Writes `b` and returns the number of bytes written.
pub fn write_booster<W: Write>(w: &mut W, b: &Booster) -> Result<u64> {
    let mut buf = header_bytes(b.mode, b.m, b.p, b.eta, &b.base);
    for seq in &b.seqs {
        buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for t in seq {
            encode_tree(t, &mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(buf.len() as u64)
}

pub fn save_booster(b: &Booster, path: impl AsRef<Path>) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_booster(&mut w, b)?;
    w.flush()?;
    Ok(n)
}

pub fn load_booster(path: impl AsRef<Path>) -> Result<Booster> {
    read_booster(&std::fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GbdtError::CorruptFile(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(GbdtError::CorruptFile(msg.into()))
}

/// Parses a booster from bytes, validating every structural field.
pub fn read_booster(bytes: &[u8]) -> Result<Booster> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return corrupt("bad magic");
    }
    let version = c.u32()?;
    if version != VERSION {
        return corrupt(format!("unsupported version {version}"));
    }
    let Some(mode) = TreeMode::from_code(c.u32()?) else {
        return corrupt("bad mode");
    };
    let m = c.u32()? as usize;
    let p = c.u32()? as usize;
    if m == 0 || p == 0 {
        return corrupt("zero outputs or features");
    }
    if mode.canonical(m) != mode {
        return corrupt("multi-output booster with one output");
    }
    let eta = c.f32()?;
    if c.remaining() < 4 * m {
        return corrupt("truncated base");
    }
    let base: Vec<f32> = (0..m).map(|_| c.f32()).collect::<Result<_>>()?;
    if !eta.is_finite() || base.iter().any(|b| !b.is_finite()) {
        return corrupt("non-finite header value");
    }
    let mut booster = Booster::new(mode, m, p, eta, base);
    let n_seq = c.u32()? as usize;
    if n_seq != booster.seqs.len() {
        return corrupt(format!("expected {} sequences, found {n_seq}", booster.seqs.len()));
    }
    let m_leaf = booster.m_leaf();
    let rec = node_record_size(m_leaf);
    for s in 0..n_seq {
        let n_trees = c.u32()? as usize;
        if n_trees.saturating_mul(4 + rec) > c.remaining() {
            return corrupt("tree count exceeds file size");
        }
        for _ in 0..n_trees {
            let n_nodes = c.u32()? as usize;
            if n_nodes == 0 || n_nodes.saturating_mul(rec) > c.remaining() {
                return corrupt("bad node count");
            }
            let mut tree = Tree::new(m_leaf);
            tree.nodes.reserve_exact(n_nodes);
            for _ in 0..n_nodes {
                let rec_bytes = c.take(rec)?;
                let field = |o: usize| u32::from_le_bytes(rec_bytes[o..o + 4].try_into().unwrap());
                match rec_bytes[0] {
                    1 => {
                        let vals: Vec<f32> = rec_bytes[17..]
                            .chunks_exact(4)
                            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                            .collect();
                        tree.push_leaf(&vals);
                    }
                    0 => {
                        let feature = field(1);
                        if feature == LEAF {
                            return corrupt("internal node with leaf marker");
                        }
                        tree.nodes.push(Node {
                            feature,
                            split: f32::from_bits(field(5)),
                            left: field(9),
                            right: field(13),
                        });
                    }
                    other => return corrupt(format!("bad leaf flag {other}")),
                }
            }
            tree.validate(p)?;
            booster.seqs[s].push(tree);
        }
    }
    if c.remaining() != 0 {
        return corrupt("trailing bytes");
    }
    Ok(booster)
}

/// Receives a booster as it is trained: the header, then each sequence's
/// trees, then how many trees of that sequence to keep.
pub trait TreeSink {
    fn begin(&mut self, mode: TreeMode, m: usize, p: usize, eta: f32, base: &[f32]) -> Result<()>;
    fn begin_sequence(&mut self) -> Result<()>;
    fn push_tree(&mut self, tree: Tree) -> Result<()>;
    /// Keeps the first `keep` trees of the current sequence.
    fn end_sequence(&mut self, keep: usize) -> Result<()>;
}

/// Collects the booster in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    booster: Option<Booster>,
    seq: usize,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_booster(self) -> Result<Booster> {
        self.booster
            .ok_or_else(|| GbdtError::ShapeMismatch("no booster was trained".into()))
    }
}

impl TreeSink for MemorySink {
    fn begin(&mut self, mode: TreeMode, m: usize, p: usize, eta: f32, base: &[f32]) -> Result<()> {
        self.booster = Some(Booster::new(mode, m, p, eta, base.to_vec()));
        self.seq = 0;
        Ok(())
    }

    fn begin_sequence(&mut self) -> Result<()> {
        Ok(())
    }

    fn push_tree(&mut self, tree: Tree) -> Result<()> {
        let b = self.booster.as_mut().expect("begin not called");
        b.seqs[self.seq].push(tree);
        Ok(())
    }

    fn end_sequence(&mut self, keep: usize) -> Result<()> {
        let b = self.booster.as_mut().expect("begin not called");
        b.seqs[self.seq].truncate(keep);
        self.seq += 1;
        Ok(())
    }
}

/// Streams trees to a file so that no more than one tree is held in memory.
/// Trees dropped by early stopping are overwritten and the file truncated.
pub struct FileSink {
    w: BufWriter<File>,
    pos: u64,
    count_pos: u64,
    tree_ends: Vec<u64>,
    buf: Vec<u8>,
}

impl FileSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            w: BufWriter::with_capacity(1 << 16, File::create(path)?),
            pos: 0,
            count_pos: 0,
            tree_ends: Vec::new(),
            buf: Vec::new(),
        })
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.w.write_all(bytes)?;
        self.pos += bytes.len() as u64;
        Ok(())
    }

    /// Flushes and truncates the file; returns its final size.
    pub fn finish(mut self) -> Result<u64> {
        self.w.flush()?;
        let f = self.w.into_inner().map_err(|e| GbdtError::Io(e.into_error()))?;
        f.set_len(self.pos)?;
        Ok(self.pos)
    }
}

impl TreeSink for FileSink {
    fn begin(&mut self, mode: TreeMode, m: usize, p: usize, eta: f32, base: &[f32]) -> Result<()> {
        let h = header_bytes(mode.canonical(m), m, p, eta, base);
        self.write(&h)
    }

    fn begin_sequence(&mut self) -> Result<()> {
        self.count_pos = self.pos;
        self.tree_ends.clear();
        self.write(&0u32.to_le_bytes())
    }

    fn push_tree(&mut self, tree: Tree) -> Result<()> {
        let mut buf = std::mem::take(&mut self.buf);
        buf.clear();
        encode_tree(&tree, &mut buf);
        self.write(&buf)?;
        self.buf = buf;
        self.tree_ends.push(self.pos);
        Ok(())
    }

    fn end_sequence(&mut self, keep: usize) -> Result<()> {
        let keep = keep.min(self.tree_ends.len());
        let end = if keep == 0 {
            self.count_pos + 4
        } else {
            self.tree_ends[keep - 1]
        };
        self.w.seek(SeekFrom::Start(self.count_pos))?;
        self.w.write_all(&(keep as u32).to_le_bytes())?;
        self.w.seek(SeekFrom::Start(end))?;
        self.pos = end;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(mode: TreeMode, m: usize) -> Booster {
        let mut b = Booster::new(mode, m, 2, 0.3, (0..m).map(|k| k as f32 * 0.5).collect());
        let m_leaf = b.m_leaf();
        for s in 0..b.seqs.len() {
            let mut t = Tree::new(m_leaf);
            t.nodes.push(Node {
                feature: 1,
                split: 0.25,
                left: 1,
                right: 2,
            });
            t.push_leaf(&vec![-1.0; m_leaf]);
            t.push_leaf(&vec![2.0; m_leaf]);
            b.push_tree(s, t);
            b.push_tree(s, Tree::constant(&vec![0.125; m_leaf]));
        }
        b
    }

    #[test]
    fn round_trip_bit_identical() {
        for (mode, m) in [(TreeMode::So, 1), (TreeMode::So, 3), (TreeMode::Mo, 3)] {
            let b = sample(mode, m);
            let mut buf = Vec::new();
            write_booster(&mut buf, &b).unwrap();
            let back = read_booster(&buf).unwrap();
            assert_eq!(back, b);
            let x = [0.0, 0.0, 1.0, 1.0];
            let (p1, p2) = (b.predict(&x).unwrap(), back.predict(&x).unwrap());
            assert_eq!(
                p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn documented_size() {
        let b = sample(TreeMode::So, 4);
        let mut buf = Vec::new();
        let n = write_booster(&mut buf, &b).unwrap();
        // header 24 + 4m, sequence count 4, then per sequence 4 + two trees
        // of 3 and 1 nodes with 4-byte node counts.
        let expected = 24 + 16 + 4 + 4 * (4 + (4 + 3 * 21) + (4 + 21));
        assert_eq!(n as usize, expected);
        assert_eq!(buf.len(), expected);
    }

    #[test]
    fn truncated_is_corrupt() {
        let mut buf = Vec::new();
        write_booster(&mut buf, &sample(TreeMode::Mo, 2)).unwrap();
        for cut in [0, 3, 10, buf.len() - 1] {
            assert!(matches!(read_booster(&buf[..cut]), Err(GbdtError::CorruptFile(_))));
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_booster(&extra), Err(GbdtError::CorruptFile(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_booster(&bad), Err(GbdtError::CorruptFile(_))));
        let mut bad = buf;
        bad[4] = 9;
        assert!(matches!(read_booster(&bad), Err(GbdtError::CorruptFile(_))));
    }

    #[test]
    fn file_sink_truncates_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.fgb");
        let full = sample(TreeMode::So, 2);
        let mut sink = FileSink::create(&path).unwrap();
        sink.begin(full.mode, 2, 2, full.eta, &full.base).unwrap();
        for s in 0..2 {
            sink.begin_sequence().unwrap();
            for t in &full.seqs[s] {
                sink.push_tree(t.clone()).unwrap();
            }
            sink.end_sequence(1).unwrap();
        }
        sink.finish().unwrap();
        let mut expected = full.clone();
        for s in expected.seqs.iter_mut() {
            s.truncate(1);
        }
        let mut buf = Vec::new();
        write_booster(&mut buf, &expected).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), buf);
        assert_eq!(load_booster(&path).unwrap(), expected);
    }
}
