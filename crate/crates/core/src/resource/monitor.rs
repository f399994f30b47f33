use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::alloc;

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub interval: Duration,
    /// Interval used once `slow_after` has elapsed.
    pub slow_interval: Duration,
    pub slow_after: Duration,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            interval: Duration::from_secs(1),
            slow_interval: Duration::from_secs(10),
            slow_after: Duration::from_secs(3600),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub seconds: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    /// Highest measurement minus lowest measurement.
    pub peak_bytes: u64,
    pub max_sample_bytes: u64,
    pub baseline_bytes: u64,
    pub wall_seconds: f64,
    /// `"rss"` or `"alloc"` when resident-set size is unavailable.
    pub source: String,
    pub os_unsupported: bool,
    /// True when the kernel peak-RSS counter contributed the maximum.
    pub used_high_water_mark: bool,
    pub samples: Vec<Sample>,
}

fn status_field(name: &str) -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = s.lines().find(|l| l.starts_with(name))?;
    let kb: u64 = line[name.len()..].trim().trim_end_matches("kB").trim().parse().ok()?;
    Some(kb * 1024)
}

/// Current resident-set size in bytes.
pub fn current_rss() -> Option<u64> {
    status_field("VmRSS:")
}

fn reset_high_water_mark() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

#[derive(Clone, Copy)]
enum Source {
    Rss,
    Alloc,
}

impl Source {
    fn read(self) -> u64 {
        match self {
            Source::Rss => current_rss().unwrap_or(0),
            Source::Alloc => alloc::stats().live as u64,
        }
    }
}

/// Runs `f` while sampling process memory at 1 Hz (every 10 s after the
/// first hour).
pub fn monitor_run<R>(f: impl FnOnce() -> R) -> (R, ResourceReport) {
    monitor_run_with(&MonitorConfig::default(), f)
}

pub fn monitor_run_with<R>(cfg: &MonitorConfig, f: impl FnOnce() -> R) -> (R, ResourceReport) {
    let source = if current_rss().is_some() {
        Source::Rss
    } else {
        Source::Alloc
    };
    let hwm = matches!(source, Source::Rss) && reset_high_water_mark();
    if matches!(source, Source::Alloc) {
        alloc::reset();
    }
    let start = Instant::now();
    let first = Sample {
        seconds: 0.0,
        bytes: source.read(),
    };
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let cfg2 = cfg.clone();
    let sampler = thread::spawn(move || {
        let mut samples = vec![first];
        loop {
            let elapsed = start.elapsed();
            let wait = if elapsed >= cfg2.slow_after {
                cfg2.slow_interval
            } else {
                cfg2.interval
            };
            match stop_rx.recv_timeout(wait) {
                Err(mpsc::RecvTimeoutError::Timeout) => samples.push(Sample {
                    seconds: start.elapsed().as_secs_f64(),
                    bytes: source.read(),
                }),
                _ => break,
            }
        }
        samples
    });
    let out = f();
    let wall = start.elapsed().as_secs_f64();
    let _ = stop_tx.send(());
    let mut samples = sampler.join().unwrap_or_default();
    samples.push(Sample {
        seconds: wall,
        bytes: source.read(),
    });

    let lowest = samples.iter().map(|s| s.bytes).min().unwrap_or(0);
    let mut highest = samples.iter().map(|s| s.bytes).max().unwrap_or(0);
    let mut used_hwm = false;
    match source {
        Source::Rss if hwm => {
            if let Some(h) = status_field("VmHWM:") {
                if h > highest {
                    highest = h;
                    used_hwm = true;
                }
            }
        }
        Source::Alloc => {
            let peak = alloc::stats().peak as u64;
            if peak > highest {
                highest = peak;
            }
        }
        Source::Rss => {}
    }
    let report = ResourceReport {
        peak_bytes: highest.saturating_sub(lowest),
        max_sample_bytes: highest,
        baseline_bytes: lowest,
        wall_seconds: wall,
        source: match source {
            Source::Rss => "rss".into(),
            Source::Alloc => "alloc".into(),
        },
        os_unsupported: matches!(source, Source::Alloc),
        used_high_water_mark: used_hwm,
        samples,
    };
    (out, report)
}
