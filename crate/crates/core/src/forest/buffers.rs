use std::fs::File;
use std::io::{BufWriter, Write};

use memmap2::Mmap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ForestError, Method};

pub(crate) const TAG_TRAIN_NOISE: u8 = 1;
pub(crate) const TAG_VALID_NOISE: u8 = 2;
pub(crate) const TAG_GEN_NOISE: u8 = 3;
pub(crate) const TAG_LABELS: u8 = 4;

/// Deterministic random stream keyed by `(seed, t_index, y_index, tag)`.
pub fn job_rng(seed: u64, t_index: u32, y_index: u32, tag: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((t_index as u64) << 32) | (((y_index as u64) & 0xFF_FFFF) << 8) | tag as u64);
    rng
}

enum Buf {
    Heap(Vec<f32>),
    Mapped(Mmap),
}

impl Buf {
    fn as_slice(&self) -> &[f32] {
        match self {
            Buf::Heap(v) => v,
            // SAFETY: the map is page aligned, read-only, and was written as
            // native-endian f32 values by this process.
            Buf::Mapped(m) => unsafe { std::slice::from_raw_parts(m.as_ptr().cast::<f32>(), m.len() / 4) },
        }
    }
}

/// Duplicated data, Gaussian noise and (for flow) the constant targets,
/// built once and shared read-only by every job.
pub struct TrainingBuffers {
    x0dup: Buf,
    x1: Buf,
    zflow: Option<Buf>,
    n_rows: usize,
    p: usize,
    _dir: Option<tempfile::TempDir>,
}

struct Writers {
    x0: Sink,
    x1: Sink,
    z: Option<Sink>,
}

enum Sink {
    Heap(Vec<f32>),
    File(BufWriter<File>, std::path::PathBuf),
}

impl Sink {
    fn heap(cap: usize) -> Self {
        Sink::Heap(Vec::with_capacity(cap))
    }

    fn file(dir: &std::path::Path, name: &str) -> std::io::Result<Self> {
        let path = dir.join(name);
        Ok(Sink::File(BufWriter::with_capacity(1 << 16, File::create(&path)?), path))
    }

    fn push(&mut self, v: f32) -> std::io::Result<()> {
        match self {
            Sink::Heap(b) => {
                b.push(v);
                Ok(())
            }
            Sink::File(w, _) => w.write_all(&v.to_ne_bytes()),
        }
    }

    fn finish(self) -> std::io::Result<Buf> {
        match self {
            Sink::Heap(b) => Ok(Buf::Heap(b)),
            Sink::File(w, path) => {
                let f = w.into_inner().map_err(|e| e.into_error())?;
                f.sync_data()?;
                drop(f);
                let f = File::open(path)?;
                if f.metadata()?.len() == 0 {
                    return Ok(Buf::Heap(Vec::new()));
                }
                // SAFETY: the file lives in a private temporary directory that
                // outlives the map and is never written again.
                Ok(Buf::Mapped(unsafe { Mmap::map(&f)? }))
            }
        }
    }
}

impl TrainingBuffers {
    /// Repeats each row of the class-sorted `x0` `k` times, draws the noise
    /// from the seed's training stream and, for flow, forms `x1 - x0`. With
    /// `file_backed` the buffers live in memory-mapped temporary files.
    pub fn build(x0: &[f32], p: usize, k: usize, method: Method, seed: u64, file_backed: bool) -> Result<Self, ForestError> {
        if p == 0 || x0.len() % p != 0 {
            return Err(ForestError::ShapeMismatch(format!("{} values do not form rows of width {p}", x0.len())));
        }
        let n_rows = x0.len() / p * k;
        let total = n_rows * p;
        let dir = if file_backed { Some(tempfile::tempdir()?) } else { None };
        let mut w = match &dir {
            Some(d) => Writers {
                x0: Sink::file(d.path(), "x0dup.f32")?,
                x1: Sink::file(d.path(), "x1.f32")?,
                z: match method {
                    Method::Flow => Some(Sink::file(d.path(), "zflow.f32")?),
                    Method::Diffusion => None,
                },
            },
            None => Writers {
                x0: Sink::heap(total),
                x1: Sink::heap(total),
                z: match method {
                    Method::Flow => Some(Sink::heap(total)),
                    Method::Diffusion => None,
                },
            },
        };
        let mut rng = job_rng(seed, 0, 0, TAG_TRAIN_NOISE);
        for row in x0.chunks_exact(p) {
            for _ in 0..k {
                for &a in row {
                    let b: f32 = rng.sample(StandardNormal);
                    w.x0.push(a)?;
                    w.x1.push(b)?;
                    if let Some(z) = &mut w.z {
                        z.push(b - a)?;
                    }
                }
            }
        }
        Ok(Self {
            x0dup: w.x0.finish()?,
            x1: w.x1.finish()?,
            zflow: w.z.map(Sink::finish).transpose()?,
            n_rows,
            p,
            _dir: dir,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn x0dup(&self) -> &[f32] {
        self.x0dup.as_slice()
    }

    pub fn x1(&self) -> &[f32] {
        self.x1.as_slice()
    }

    /// Flow targets `x1 - x0`; `None` for diffusion.
    pub fn zflow(&self) -> Option<&[f32]> {
        self.zflow.as_ref().map(Buf::as_slice)
    }

    pub fn is_file_backed(&self) -> bool {
        self._dir.is_some()
    }

    /// Total bytes held by the buffers.
    pub fn bytes(&self) -> usize {
        let n = self.n_rows * self.p * 4;
        n * if self.zflow.is_some() { 3 } else { 2 }
    }
}
