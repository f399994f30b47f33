use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::buffers::{job_rng, TrainingBuffers, TAG_VALID_NOISE};
use super::schedule::{make_targets, make_xt};
use super::store::{booster_file_name, JobRecord, Manifest, FINGERPRINT_FILE, MANIFEST_FILE, MANIFEST_VERSION};
use super::{ForestError, HyperParams, Method};
use crate::gbdt::{load_booster, save_booster, train_booster_into, BinMapper, BinnedMatrix, Booster, FileSink, MemorySink};
use crate::resource::alloc;
use crate::tabular::{sort_by_class, Dataset, PerClassScaler};

/// Bookkeeping from one [`train_all`] call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub jobs_total: usize,
    pub jobs_run: usize,
    pub jobs_skipped: usize,
    pub workers: usize,
    pub buffer_bytes: usize,
    /// Size of the all-timestep input tensor in naive mode, else 0.
    pub naive_tensor_bytes: usize,
    /// `n_c * k * p * 4` for the largest class.
    pub largest_class_slice_bytes: usize,
    /// Highest per-job allocation peak seen by the counting allocator; 0 when
    /// it is not installed.
    pub max_job_transient_bytes: usize,
    /// Most boosters held in memory at once.
    pub max_resident_boosters: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub manifest: Manifest,
    pub stats: TrainStats,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Fingerprint {
    hyperparams: HyperParams,
    n: usize,
    p: usize,
    n_y: usize,
    data_hash: String,
}

impl Fingerprint {
    fn of(ds: &Dataset, hp: &HyperParams) -> Self {
        let mut h = std::hash::DefaultHasher::new();
        for v in ds.features() {
            v.to_bits().hash(&mut h);
        }
        ds.labels().hash(&mut h);
        Self {
            hyperparams: hp.clone(),
            n: ds.n(),
            p: ds.p(),
            n_y: ds.n_y(),
            data_hash: format!("{:016x}", h.finish()),
        }
    }
}

#[derive(Default)]
struct Gauge {
    cur: AtomicUsize,
    max: AtomicUsize,
}

impl Gauge {
    fn inc(&self) {
        let v = self.cur.fetch_add(1, Ordering::SeqCst) + 1;
        self.max.fetch_max(v, Ordering::SeqCst);
    }

    fn dec(&self) {
        self.cur.fetch_sub(1, Ordering::SeqCst);
    }
}

struct Ctx<'a> {
    hp: &'a HyperParams,
    buffers: &'a TrainingBuffers,
    xt_all: Option<&'a [f32]>,
    grid: &'a [f32],
    slices: &'a [Range<usize>],
    dir: &'a Path,
    resident: &'a Gauge,
}

/// Noisy inputs and targets from a fresh noise draw over the same rows.
fn validation_set(ctx: &Ctx, ti: usize, yi: usize, x0: &[f32], mapper: &Arc<BinMapper>) -> Result<(BinnedMatrix, Vec<f32>), ForestError> {
    let t = ctx.grid[ti];
    let mut rng = job_rng(ctx.hp.seed, ti as u32, yi as u32, TAG_VALID_NOISE);
    let mut xt = Vec::with_capacity(x0.len());
    let mut z = Vec::with_capacity(x0.len());
    match ctx.hp.method {
        Method::Flow => {
            for &a in x0 {
                let e: f32 = rng.sample(StandardNormal);
                xt.push(t * e + (1.0 - t) * a);
                z.push(e - a);
            }
        }
        Method::Diffusion => {
            let s = &ctx.hp.schedule;
            let (al, si) = (s.alpha(t as f64) as f32, s.sigma(t as f64) as f32);
            if !(si > 0.0) {
                return Err(ForestError::DegenerateTime(t));
            }
            for &a in x0 {
                let e: f32 = rng.sample(StandardNormal);
                xt.push(al * a + si * e);
                z.push(-e / si);
            }
        }
    }
    let binned = mapper.transform(&xt)?;
    Ok((binned, z))
}

/// Trains one `(t, y)` booster. Returns it when `keep_in_memory`, otherwise
/// streams it to the store.
fn run_job(ctx: &Ctx, ti: usize, yi: usize, keep_in_memory: bool) -> Result<(Option<Booster>, JobRecord), ForestError> {
    let start = Instant::now();
    let hp = ctx.hp;
    let p = ctx.buffers.p();
    let rows = &ctx.slices[yi];
    let (a, b) = (rows.start * p, rows.end * p);
    let x0 = &ctx.buffers.x0dup()[a..b];
    let x1 = &ctx.buffers.x1()[a..b];
    let t = ctx.grid[ti];

    let binned = {
        let owned;
        let xt = match ctx.xt_all {
            Some(all) => {
                let off = ti * ctx.buffers.n_rows() * p;
                &all[off + a..off + b]
            }
            None => {
                owned = make_xt(x0, x1, t, hp.method, &hp.schedule)?;
                &owned[..]
            }
        };
        let mapper = Arc::new(BinMapper::fit(xt, p, hp.gbdt.max_bins));
        mapper.transform(xt)?
    };
    let owned_z;
    let z = match ctx.buffers.zflow() {
        Some(zf) => &zf[a..b],
        None => {
            owned_z = make_targets(x0, x1, t, hp.method, &hp.schedule)?;
            &owned_z[..]
        }
    };
    let valid = if hp.gbdt.n_es > 0 {
        Some(validation_set(ctx, ti, yi, x0, binned.mapper())?)
    } else {
        None
    };
    let valid_ref = valid.as_ref().map(|(vb, vz)| (vb, &vz[..]));

    let file = booster_file_name(ti, yi);
    ctx.resident.inc();
    let (booster, summary) = if keep_in_memory {
        let mut sink = MemorySink::new();
        let s = train_booster_into(&binned, z, p, &hp.gbdt, hp.tree_mode, valid_ref, &mut sink)?;
        (Some(sink.into_booster()?), s)
    } else {
        let tmp = ctx.dir.join(format!("{file}.tmp"));
        let mut sink = FileSink::create(&tmp)?;
        let s = train_booster_into(&binned, z, p, &hp.gbdt, hp.tree_mode, valid_ref, &mut sink)?;
        sink.finish()?;
        fs::rename(&tmp, ctx.dir.join(&file))?;
        ctx.resident.dec();
        (None, s)
    };
    let record = JobRecord {
        t_index: ti,
        y_index: yi,
        file,
        best_iterations: summary.best_iterations,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((booster, record))
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs `f(i)` for every `i` in `items` on `workers` threads. Stops handing
/// out work after the first failure and returns the failure of the lowest
/// index.
fn run_pool<R: Send>(
    items: &[usize],
    workers: usize,
    f: impl Fn(usize) -> Result<R, ForestError> + Sync,
) -> Result<Vec<(usize, R)>, ForestError> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let out = Mutex::new(Vec::with_capacity(items.len()));
    let errors = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = items.get(k) else { break };
                match f(i) {
                    Ok(r) => out.lock().unwrap().push((i, r)),
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        errors.lock().unwrap().push((i, e));
                    }
                }
            });
        }
    });
    let mut errors = errors.into_inner().unwrap();
    if !errors.is_empty() {
        errors.sort_by_key(|(i, _)| *i);
        return Err(errors.swap_remove(0).1);
    }
    let mut out = out.into_inner().unwrap();
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

fn existing_booster_ok(path: &Path, hp: &HyperParams, p: usize) -> Option<Booster> {
    let b = load_booster(path).ok()?;
    (b.n_features() == p && b.n_outputs() == p && b.mode() == hp.tree_mode.canonical(p)).then_some(b)
}

/// Trains every `(t, y)` booster of `ds` into the store directory and writes
/// the manifest last.
///
/// Booster files already present from an interrupted run with the same data
/// and hyperparameters are kept and their jobs skipped.
pub fn train_all(ds: &Dataset, hp: &HyperParams, store: impl AsRef<Path>) -> Result<Trained, ForestError> {
    hp.validate()?;
    let start = Instant::now();
    let dir = store.as_ref();
    fs::create_dir_all(dir)?;

    let fingerprint = Fingerprint::of(ds, hp);
    let fp_bytes = serde_json::to_vec_pretty(&fingerprint)?;
    let fingerprint: Fingerprint = serde_json::from_slice(&fp_bytes)?;
    let fp_path = dir.join(FINGERPRINT_FILE);
    let resume = match fs::read(&fp_path) {
        Ok(bytes) => {
            let old: Fingerprint =
                serde_json::from_slice(&bytes).map_err(|_| ForestError::StoreMismatch(dir.display().to_string()))?;
            if old != fingerprint {
                return Err(ForestError::StoreMismatch(dir.display().to_string()));
            }
            true
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            fs::write(&fp_path, &fp_bytes)?;
            false
        }
        Err(e) => return Err(e.into()),
    };

    let (sorted, idx) = sort_by_class(ds);
    let scaler = PerClassScaler::fit(&sorted, &idx, hp.scaler_mode);
    let scaled = scaler.apply(&sorted);
    let (p, n_y, n_t) = (ds.p(), ds.n_y(), hp.n_t);
    let grid = hp.time_grid();
    let slices = idx.dup_slices(hp.k);
    let n_jobs = n_t * n_y;

    let previous: HashMap<String, f64> = if resume {
        fs::read(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
            .map(|m| m.jobs.into_iter().map(|j| (j.file, j.seconds)).collect())
            .unwrap_or_default()
    } else {
        HashMap::new()
    };
    let mut records: Vec<Option<JobRecord>> = vec![None; n_jobs];
    let mut pending = Vec::new();
    for (j, rec) in records.iter_mut().enumerate() {
        let (ti, yi) = (j / n_y, j % n_y);
        let file = booster_file_name(ti, yi);
        let done = if resume {
            existing_booster_ok(&dir.join(&file), hp, p)
        } else {
            None
        };
        match done {
            Some(b) => {
                *rec = Some(JobRecord {
                    t_index: ti,
                    y_index: yi,
                    seconds: previous.get(&file).copied().unwrap_or(0.0),
                    file,
                    best_iterations: b.best_iterations(),
                })
            }
            None => pending.push(j),
        }
    }

    let workers = hp.workers();
    let mut stats = TrainStats {
        jobs_total: n_jobs,
        jobs_run: pending.len(),
        jobs_skipped: n_jobs - pending.len(),
        workers,
        largest_class_slice_bytes: idx.largest_class() * hp.k * p * 4,
        ..TrainStats::default()
    };

    if !pending.is_empty() {
        let buffers = TrainingBuffers::build(scaled.features(), p, hp.k, hp.method, hp.seed, hp.file_backed)?;
        drop(scaled);
        stats.buffer_bytes = buffers.bytes();
        let xt_all = if hp.naive_mode {
            let mut all = Vec::with_capacity(n_t * buffers.n_rows() * p);
            for &t in &grid {
                all.extend(make_xt(buffers.x0dup(), buffers.x1(), t, hp.method, &hp.schedule)?);
            }
            stats.naive_tensor_bytes = all.len() * 4;
            Some(all)
        } else {
            None
        };
        let resident = Gauge::default();
        let ctx = Ctx {
            hp,
            buffers: &buffers,
            xt_all: xt_all.as_deref(),
            grid: &grid,
            slices: &slices,
            dir,
            resident: &resident,
        };
        let max_transient = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let results = run_pool(&pending, workers, |j| {
            let (ti, yi) = (j / n_y, j % n_y);
            let run = catch_unwind(AssertUnwindSafe(|| {
                alloc::measure_thread(|| run_job(&ctx, ti, yi, hp.naive_mode))
            }));
            match run {
                Ok((res, peak)) => {
                    max_transient.fetch_max(peak, Ordering::Relaxed);
                    let d = done.fetch_add(1, Ordering::Relaxed) + 1;
                    log::info!("job t={ti} y={yi} finished ({d}/{})", pending.len());
                    res.map_err(|e| ForestError::TrainingFailed {
                        t_index: ti,
                        y_index: yi,
                        reason: e.to_string(),
                    })
                }
                Err(panic) => Err(ForestError::TrainingFailed {
                    t_index: ti,
                    y_index: yi,
                    reason: panic_message(panic),
                }),
            }
        })?;
        stats.max_job_transient_bytes = max_transient.into_inner();
        for (j, (booster, record)) in results {
            if let Some(b) = booster {
                let tmp = dir.join(format!("{}.tmp", record.file));
                save_booster(&b, &tmp)?;
                fs::rename(&tmp, dir.join(&record.file))?;
            }
            records[j] = Some(record);
        }
        stats.max_resident_boosters = resident.max.into_inner();
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        hyperparams: hp.clone(),
        p,
        time_grid: grid,
        class_ids: ds.class_names.clone(),
        class_counts: idx.counts(),
        scaler,
        feature_names: ds.feature_names.clone(),
        label_name: ds.label_name.clone(),
        jobs: records.into_iter().map(|r| r.expect("every job has a record")).collect(),
    };
    manifest.write(dir)?;
    stats.seconds = start.elapsed().as_secs_f64();
    Ok(Trained { manifest, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::ModelStore;
    use crate::gbdt::TreeMode;
    use crate::resource::synth_dataset;

    fn small_hp(mode: TreeMode) -> HyperParams {
        let mut hp = HyperParams::default();
        hp.tree_mode = mode;
        hp.n_t = 5;
        hp.k = 10;
        hp.gbdt.n_tree = 5;
        hp.gbdt.max_depth = 3;
        hp.n_jobs = 2;
        hp
    }

    #[test]
    fn count_contract() {
        let ds = synth_dataset(100, 4, 2, 1).unwrap();
        for mode in [TreeMode::So, TreeMode::Mo] {
            let dir = tempfile::tempdir().unwrap();
            let out = train_all(&ds, &small_hp(mode), dir.path()).unwrap();
            assert_eq!(out.manifest.jobs.len(), 10);
            assert_eq!(out.stats.jobs_run, 10);
            let store = ModelStore::open(dir.path()).unwrap();
            for j in &out.manifest.jobs {
                let b = store.load_booster(j.t_index, j.y_index).unwrap();
                assert_eq!(b.n_outputs(), 4);
                assert_eq!(b.mode(), mode);
                assert_eq!(b.sequences().len(), if mode == TreeMode::So { 4 } else { 1 });
            }
            assert!(out.stats.max_resident_boosters <= 2);
        }
    }

    #[test]
    fn resume_runs_only_missing_jobs() {
        let ds = synth_dataset(100, 4, 2, 1).unwrap();
        let hp = small_hp(TreeMode::So);
        let dir = tempfile::tempdir().unwrap();
        let first = train_all(&ds, &hp, dir.path()).unwrap();
        let bytes: Vec<Vec<u8>> = first.manifest.jobs.iter().map(|j| fs::read(dir.path().join(&j.file)).unwrap()).collect();
        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        for j in &first.manifest.jobs[7..] {
            fs::remove_file(dir.path().join(&j.file)).unwrap();
        }
        let second = train_all(&ds, &hp, dir.path()).unwrap();
        assert_eq!((second.stats.jobs_run, second.stats.jobs_skipped), (3, 7));
        for (j, b) in second.manifest.jobs.iter().zip(&bytes) {
            assert_eq!(&fs::read(dir.path().join(&j.file)).unwrap(), b);
        }
    }

    #[test]
    fn stale_store_rejected() {
        let ds = synth_dataset(60, 3, 1, 1).unwrap();
        let hp = small_hp(TreeMode::So);
        let dir = tempfile::tempdir().unwrap();
        train_all(&ds, &hp, dir.path()).unwrap();
        let other = HyperParams { seed: 9, ..hp };
        assert!(matches!(train_all(&ds, &other, dir.path()), Err(ForestError::StoreMismatch(_))));
    }

    #[test]
    fn naive_and_file_backed_match_optimized() {
        let ds = synth_dataset(80, 3, 2, 4).unwrap();
        let mut hp = small_hp(TreeMode::So);
        hp.gbdt.n_es = 2;
        let read_all = |dir: &Path, m: &Manifest| -> Vec<Vec<u8>> { m.jobs.iter().map(|j| fs::read(dir.join(&j.file)).unwrap()).collect() };
        let d0 = tempfile::tempdir().unwrap();
        let base = train_all(&ds, &hp, d0.path()).unwrap();
        for (naive, file_backed) in [(true, false), (false, true)] {
            let d = tempfile::tempdir().unwrap();
            let hp2 = HyperParams {
                naive_mode: naive,
                file_backed,
                ..hp.clone()
            };
            let out = train_all(&ds, &hp2, d.path()).unwrap();
            assert_eq!(read_all(d.path(), &out.manifest), read_all(d0.path(), &base.manifest));
            if naive {
                assert_eq!(out.stats.max_resident_boosters, 10);
                assert_eq!(out.stats.naive_tensor_bytes, 5 * 80 * 10 * 3 * 4);
            }
        }
    }

    #[test]
    fn diffusion_trains() {
        let ds = synth_dataset(60, 2, 2, 2).unwrap();
        let hp = HyperParams {
            n_t: 3,
            k: 5,
            n_jobs: 1,
            ..HyperParams::new(Method::Diffusion)
        };
        let d = tempfile::tempdir().unwrap();
        let out = train_all(&ds, &hp, d.path()).unwrap();
        assert_eq!(out.manifest.time_grid[0], 0.001f32);
        assert_eq!(out.manifest.jobs.len(), 6);
    }

    #[test]
    fn pool_reports_lowest_failure() {
        let items: Vec<usize> = (0..20).collect();
        let r = run_pool(&items, 3, |i| {
            if i % 7 == 5 {
                Err(ForestError::InvalidParams(i.to_string()))
            } else {
                Ok(i)
            }
        });
        match r {
            Err(ForestError::InvalidParams(s)) => assert_eq!(s, "5"),
            other => panic!("{other:?}"),
        }
        let ok = run_pool(&items, 4, Ok).unwrap();
        assert_eq!(ok.into_iter().map(|(i, _)| i).collect::<Vec<_>>(), items);
    }
}
