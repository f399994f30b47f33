use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use forestgen::forest::{train_all, HyperParams, Method, ModelStore, TrainStats};
use forestgen::metrics;
use forestgen::resource::{self, monitor_run, EstimateParams, ResourceReport};
use forestgen::sampler::{generate, generate_batched, GenConfig};
use forestgen::tabular::{load_csv, Dataset, ScalerMode};
use serde::Serialize;
use serde_json::json;

use crate::config::{pick, switch, Config};
use crate::{BenchArgs, Cli, Cmd, EstimateArgs, EvaluateArgs, Failure, GenerateArgs, HpArgs, TrainArgs, TrainSynthArgs};

pub const SEED_ENV: &str = "FORESTGEN_SEED";

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| anyhow!("{SEED_ENV}={v:?}: {e}")),
        Err(_) => Ok(None),
    }
}

/// Seed from flag, then config, then the environment, then 0.
fn resolve_seed(flag: Option<u64>, cfg: &mut Config) -> Result<u64> {
    match pick(flag, cfg, "seed")? {
        Some(s) => Ok(s),
        None => Ok(env_seed()?.unwrap_or(0)),
    }
}

fn parse_scaler(s: &str) -> Result<ScalerMode> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "global" => Ok(ScalerMode::Global),
        "per_class" => Ok(ScalerMode::PerClass),
        other => bail!("unknown scaler {other:?} (expected global or per_class)"),
    }
}

fn resolve_hp(a: &HpArgs, cfg: &mut Config) -> Result<HyperParams> {
    let method = pick(a.method, cfg, "method")?.unwrap_or(Method::Flow);
    let mut hp = HyperParams::new(method);
    macro_rules! set {
        ($field:expr, $flag:expr, $key:literal) => {
            if let Some(v) = pick($flag, cfg, $key)? {
                $field = v;
            }
        };
    }
    set!(hp.tree_mode, a.trees, "trees");
    set!(hp.n_t, a.n_t, "n_t");
    set!(hp.k, a.k, "k");
    set!(hp.gbdt.n_tree, a.n_tree, "n_tree");
    set!(hp.gbdt.n_es, a.n_es, "n_es");
    set!(hp.gbdt.eta, a.eta, "eta");
    set!(hp.gbdt.lambda, a.lambda, "lambda");
    set!(hp.gbdt.gamma, a.gamma, "gamma");
    set!(hp.gbdt.max_depth, a.max_depth, "max_depth");
    set!(hp.gbdt.max_bins, a.max_bins, "max_bins");
    set!(hp.eps, a.eps, "eps");
    set!(hp.schedule.beta_min, a.beta_min, "beta_min");
    set!(hp.schedule.beta_max, a.beta_max, "beta_max");
    set!(hp.label_mode, a.labels, "labels");
    set!(hp.n_jobs, a.n_jobs, "n_jobs");
    if let Some(s) = pick(a.scaler.clone(), cfg, "scaler")? {
        hp.scaler_mode = parse_scaler(&s)?;
    }
    hp.seed = resolve_seed(a.seed, cfg)?;
    hp.naive_mode = switch(a.naive, cfg, "naive")?;
    hp.file_backed = switch(a.file_backed, cfg, "file_backed")?;
    hp.validate()?;
    Ok(hp)
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| anyhow!("missing required --{flag}"))
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => usage(Config::load(p))?,
        None => Config::default(),
    };
    match cli.cmd {
        Cmd::Train(a) => train(a, cfg),
        Cmd::Generate(a) => generate_cmd(a, cfg),
        Cmd::Evaluate(a) => evaluate(a, cfg),
        Cmd::Bench(a) => bench(a, cfg),
        Cmd::EstimateMem(a) => estimate(a, &mut cfg).and_then(|()| usage(cfg.finish())),
        Cmd::TrainSynth(a) => train_synth(a, cfg),
    }
}

fn load_data(path: &Path, label: Option<&str>, header: bool) -> Result<Dataset> {
    load_csv(path, label, header).with_context(|| format!("cannot load {}", path.display()))
}

fn train(a: TrainArgs, mut cfg: Config) -> std::result::Result<(), Failure> {
    let (data, label, no_header, out, hp) = usage((|| {
        let data: PathBuf = required(pick(a.data, &mut cfg, "data")?, "data")?;
        let label: Option<String> = pick(a.label, &mut cfg, "label")?;
        let no_header = switch(a.no_header, &mut cfg, "no_header")?;
        let out: PathBuf = required(pick(a.out, &mut cfg, "out")?, "out")?;
        let hp = resolve_hp(&a.hp, &mut cfg)?;
        Ok((data, label, no_header, out, hp))
    })())?;
    usage(cfg.finish())?;
    let ds = load_data(&data, label.as_deref(), !no_header)?;
    log::info!("training on {} rows, {} features, {} classes", ds.n(), ds.p(), ds.n_y());
    let (res, report) = monitor_run(|| train_all(&ds, &hp, &out));
    let trained = res.with_context(|| format!("training into {} failed", out.display()))?;
    print_json(&json!({
        "store": out,
        "resource": report,
        "train": trained.stats,
    }))?;
    Ok(())
}

fn generate_cmd(a: GenerateArgs, mut cfg: Config) -> std::result::Result<(), Failure> {
    let (store_dir, n, labels, seed, n_t_gen, strict, batch, n_jobs, out) = usage((|| {
        Ok((
            required::<PathBuf>(pick(a.store, &mut cfg, "store")?, "store")?,
            required::<usize>(pick(a.n, &mut cfg, "n")?, "n")?,
            pick(a.labels, &mut cfg, "labels")?,
            resolve_seed(a.seed, &mut cfg)?,
            pick(a.n_t_gen, &mut cfg, "n_t_gen")?,
            switch(a.strict_time, &mut cfg, "strict_time")?,
            pick::<usize>(a.batch_size, &mut cfg, "batch_size")?,
            pick::<usize>(a.n_jobs, &mut cfg, "n_jobs")?.unwrap_or(1),
            required::<PathBuf>(pick(a.out, &mut cfg, "out")?, "out")?,
        ))
    })())?;
    usage(cfg.finish())?;
    let store = ModelStore::open(&store_dir).with_context(|| format!("cannot open store {}", store_dir.display()))?;
    let gen_cfg = GenConfig {
        n_samples: n,
        n_t_gen,
        label_mode: labels.unwrap_or(store.manifest().hyperparams.label_mode),
        seed,
        strict_time: strict,
        p: None,
        n_jobs,
    };
    let start = Instant::now();
    let file = File::create(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let calls = match batch {
        Some(b) => {
            let mut it = generate_batched(&store, &gen_cfg, b).map_err(anyhow::Error::from)?;
            let mut first = true;
            for block in it.by_ref() {
                block.map_err(anyhow::Error::from)?.write_csv_with(&mut w, first).map_err(anyhow::Error::from)?;
                first = false;
            }
            it.predict_calls().to_vec()
        }
        None => {
            let g = generate(&store, &gen_cfg).map_err(anyhow::Error::from)?;
            g.dataset.write_csv(&mut w).map_err(anyhow::Error::from)?;
            g.stats.predict_calls
        }
    };
    w.flush().map_err(anyhow::Error::from)?;
    let secs = start.elapsed().as_secs_f64();
    print_json(&json!({
        "out": out,
        "n": n,
        "seconds": secs,
        "ms_total": secs * 1e3,
        "ms_per_datapoint": secs * 1e3 / n as f64,
        "predict_calls": calls,
    }))?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, mut cfg: Config) -> std::result::Result<(), Failure> {
    let (gen, train, test, label, no_header, bins) = usage((|| {
        Ok((
            required::<PathBuf>(pick(a.generated, &mut cfg, "generated")?, "generated")?,
            required::<PathBuf>(pick(a.train, &mut cfg, "train")?, "train")?,
            required::<PathBuf>(pick(a.test, &mut cfg, "test")?, "test")?,
            pick::<String>(a.label, &mut cfg, "label")?,
            switch(a.no_header, &mut cfg, "no_header")?,
            pick::<usize>(a.bins, &mut cfg, "bins")?.unwrap_or(50),
        ))
    })())?;
    usage(cfg.finish())?;
    let load = |p: &Path| load_data(p, label.as_deref(), !no_header);
    let (g, tr, te) = (load(&gen)?, load(&train)?, load(&test)?);
    if g.p() != tr.p() || g.p() != te.p() {
        return Err(anyhow!("feature counts differ: generated {}, train {}, test {}", g.p(), tr.p(), te.p()).into());
    }
    let report = metrics::evaluate(g.features(), tr.features(), te.features(), g.p(), bins).map_err(anyhow::Error::from)?;
    print_json(&report)?;
    Ok(())
}

fn estimate(a: EstimateArgs, cfg: &mut Config) -> std::result::Result<(), Failure> {
    let params = usage((|| {
        let d = EstimateParams::pions();
        Ok(EstimateParams {
            n: pick(a.n, cfg, "n")?.unwrap_or(d.n),
            p: pick(a.p, cfg, "p")?.unwrap_or(d.p),
            n_y: pick(a.n_y, cfg, "n_y")?.unwrap_or(d.n_y),
            n_t: pick(a.n_t, cfg, "n_t")?.unwrap_or(d.n_t),
            k: pick(a.k, cfg, "k")?.unwrap_or(d.k),
            n_jobs: pick(a.n_jobs, cfg, "n_jobs")?.unwrap_or(d.n_jobs),
            n_tree: pick(a.n_tree, cfg, "n_tree")?.unwrap_or(d.n_tree),
            depth: pick(a.depth, cfg, "depth")?.unwrap_or(d.depth),
            w: pick(a.w, cfg, "w")?.unwrap_or(d.w),
        })
    })())?;
    let est = resource::estimate_all(&params).map_err(|e| Failure::Usage(e.into()))?;
    print_json(&est)?;
    Ok(())
}

/// Parses `4GiB`, `512 MiB` or a plain byte count.
pub fn parse_size(s: &str) -> Result<u128> {
    let s = s.trim();
    let split = s.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let v = resource::parse_iec(&format!("{} {}", num.trim(), if unit.is_empty() { "B" } else { unit.trim() }))
        .ok_or_else(|| anyhow!("bad size {s:?}"))?;
    Ok(v as u128)
}

#[derive(Debug, Serialize)]
struct BenchRow {
    scenario: &'static str,
    n: usize,
    p: usize,
    n_y: usize,
    seconds: f64,
    peak_bytes: u64,
}

fn measure(n: usize, p: usize, n_y: usize, data_seed: u64, hp: &HyperParams, store: &Path) -> Result<(ResourceReport, TrainStats)> {
    let ds = resource::synth_dataset(n, p, n_y, data_seed)?;
    let (res, report) = monitor_run(|| train_all(&ds, hp, store));
    let trained = res?;
    Ok((report, trained.stats))
}

fn bench(a: BenchArgs, mut cfg: Config) -> std::result::Result<(), Failure> {
    let (sweep, max_n, n_values, naive, limit, scratch, mut hp) = usage((|| {
        let sweep = pick::<String>(a.sweep, &mut cfg, "sweep")?.unwrap_or_else(|| "all".into());
        let max_n = pick::<usize>(a.max_n, &mut cfg, "max_n")?.unwrap_or(300_000);
        let n_values: Option<Vec<usize>> = pick::<String>(a.n_values, &mut cfg, "n_values")?
            .map(|s| s.split(',').map(|v| v.trim().parse::<usize>().map_err(|e| anyhow!("n_values: {e}"))).collect())
            .transpose()?;
        let limit = parse_size(&pick::<String>(a.mem_limit, &mut cfg, "mem_limit")?.unwrap_or_else(|| "4GiB".into()))?;
        let scratch = pick::<PathBuf>(a.scratch, &mut cfg, "scratch")?;
        let hp = resolve_hp(&a.hp, &mut cfg)?;
        // In a sweep --naive adds the naive pipeline next to the optimized one.
        let naive = hp.naive_mode;
        if !["all", "n", "p", "n_y"].contains(&sweep.as_str()) {
            bail!("unknown sweep {sweep:?} (expected n, p, n_y or all)");
        }
        Ok((sweep, max_n, n_values, naive, limit, scratch, hp))
    })())?;
    usage(cfg.finish())?;
    let (base_n, base_p, base_y) = (1000, 10, 10);
    let mut points = Vec::new();
    if sweep == "all" || sweep == "n" {
        let ns = n_values.unwrap_or_else(|| {
            [100, 300, 1000, 3000, 10_000, 30_000, 100_000, 300_000]
                .into_iter()
                .filter(|&n| n <= max_n)
                .collect()
        });
        points.extend(ns.into_iter().map(|n| (n, base_p, base_y)));
    }
    if sweep == "all" || sweep == "p" {
        points.extend([3, 10, 30, 100, 300].into_iter().map(|p| (base_n, p, base_y)));
    }
    if sweep == "all" || sweep == "n_y" {
        points.extend([1, 3, 10, 30, 100].into_iter().map(|y| (base_n, base_p, y)));
    }
    let scratch = match scratch {
        Some(d) => tempfile::tempdir_in(d),
        None => tempfile::tempdir(),
    }
    .map_err(anyhow::Error::from)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "scenario,n,p,n_y,seconds,peak_bytes").map_err(anyhow::Error::from)?;
    let data_seed = hp.seed;
    for (n, p, n_y) in points {
        for naive_run in [false, true] {
            if naive_run && !naive {
                continue;
            }
            if naive_run {
                let need = (n * hp.k * p * hp.n_t * 4) as u128;
                if need > limit {
                    log::warn!("skipping naive n={n} p={p} n_y={n_y}: needs {} over the limit", resource::format_iec(need));
                    continue;
                }
            }
            hp.naive_mode = naive_run;
            let store = scratch.path().join(format!("n{n}_p{p}_y{n_y}_{}", if naive_run { "naive" } else { "opt" }));
            let (report, _) = measure(n, p, n_y, data_seed, &hp, &store)?;
            std::fs::remove_dir_all(&store).map_err(anyhow::Error::from)?;
            let row = BenchRow {
                scenario: if naive_run { "naive" } else { "optimized" },
                n,
                p,
                n_y,
                seconds: report.wall_seconds,
                peak_bytes: report.peak_bytes,
            };
            writeln!(out, "{},{},{},{},{:.6},{}", row.scenario, row.n, row.p, row.n_y, row.seconds, row.peak_bytes)
                .map_err(anyhow::Error::from)?;
            out.flush().map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}

fn train_synth(a: TrainSynthArgs, mut cfg: Config) -> std::result::Result<(), Failure> {
    let hp = usage(resolve_hp(&a.hp, &mut cfg))?;
    usage(cfg.finish())?;
    let (report, stats) = measure(a.n, a.p, a.n_y, a.data_seed, &hp, &a.out)?;
    if a.remove_store {
        std::fs::remove_dir_all(&a.out).map_err(anyhow::Error::from)?;
    }
    print_json(&json!({
        "scenario": if hp.naive_mode { "naive" } else { "optimized" },
        "n": a.n,
        "p": a.p,
        "n_y": a.n_y,
        "seconds": report.wall_seconds,
        "peak_bytes": report.peak_bytes,
        "resource": report,
        "train": stats,
    }))?;
    Ok(())
}
