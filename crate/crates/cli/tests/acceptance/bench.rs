//! The 20-seed benchmark through the CLI: level ordering, the pinned CSV, and
//! replay of every session log.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use agency_core::session::ledger::read_log;
use agency_core::session::replay::replay;
use agency_core::session::MetricsReport;
use serde_json::json;

use super::{ensure, fail, golden_dir, run_cli, Check};

const SEEDS: u64 = 20;
const LEVELS: [&str; 3] = ["baseline", "plus_propagation", "plus_scaling"];

fn bench_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-bench20")
}

/// Runs the bench once per process; both criteria read the same output.
fn ensure_bench() -> Result<PathBuf, String> {
    static RUN: OnceLock<Result<PathBuf, String>> = OnceLock::new();
    RUN.get_or_init(fresh_bench).clone()
}

fn fresh_bench() -> Result<PathBuf, String> {
    let dir = bench_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(fail("clearing bench dir"))?;
    }
    fs::create_dir_all(&dir).map_err(fail("bench dir"))?;
    let cfg = dir.join("bench.json");
    let seeds: Vec<u64> = (1..=SEEDS).collect();
    fs::write(&cfg, json!({ "seeds": seeds }).to_string()).map_err(fail("bench.json"))?;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get()).to_string();
    run_cli(&[
        "--out",
        dir.to_str().ok_or("non-utf8 path")?,
        "bench",
        "run",
        "--config",
        cfg.to_str().ok_or("non-utf8 path")?,
        "--jobs",
        &jobs,
    ])?;
    Ok(dir)
}

/// Median with nulls (threshold never reached) ranked above every time.
fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            f64::INFINITY
        } else {
            (a + b) / 2.0
        }
    }
}

struct Row {
    capability: String,
    t_tau: f64,
    auc: f64,
}

fn parse_summary(text: &str) -> Result<Vec<Row>, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty summary")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("summary lacks `{name}`"));
    let (ci, ti, ai) = (col("capability")?, col("T_tau")?, col("auc")?);
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
            Ok(Row {
                capability: f[ci].to_string(),
                t_tau: if f[ti].is_empty() { f64::INFINITY } else { num(f[ti])? },
                auc: num(f[ai])?,
            })
        })
        .collect()
}

pub fn run_levels() -> Check {
    let dir = ensure_bench()?;
    let summary = fs::read_to_string(dir.join("summary.csv")).map_err(fail("summary.csv"))?;
    let rows = parse_summary(&summary)?;
    let per_level = |level: &str, f: fn(&Row) -> f64| -> Vec<f64> {
        rows.iter().filter(|r| r.capability == level).map(f).collect()
    };
    let mut t = Vec::new();
    let mut auc = Vec::new();
    for l in LEVELS {
        let ts = per_level(l, |r| r.t_tau);
        ensure!(ts.len() == SEEDS as usize, "{l}: {} sessions, want {SEEDS}", ts.len());
        t.push(median(ts));
        auc.push(median(per_level(l, |r| r.auc)));
    }
    let shown = format!(
        "median T_tau {} > {} > {}, AUC {:.4} < {:.4} < {:.4}",
        t[0], t[1], t[2], auc[0], auc[1], auc[2]
    );
    ensure!(t[0] > t[1] && t[1] > t[2], "time ordering broken: {shown}");
    ensure!(auc[0] < auc[1] && auc[1] < auc[2], "AUC ordering broken: {shown}");

    let golden = golden_dir().join("bench20_summary.csv");
    let bless = std::env::var("AGENCY_BLESS").is_ok_and(|v| v == "1");
    if bless || !golden.exists() {
        fs::create_dir_all(golden_dir()).map_err(fail("golden dir"))?;
        fs::write(&golden, &summary).map_err(fail("writing golden"))?;
        return Ok(format!("{shown}; pinned {}", golden.display()));
    }
    let pinned = fs::read_to_string(&golden).map_err(fail("golden"))?;
    ensure!(pinned == summary, "summary.csv differs from the pinned {}", golden.display());
    Ok(format!("{shown}; matches pinned CSV"))
}

pub fn run_replay() -> Check {
    let dir = ensure_bench()?;
    let sessions = dir.join("sessions");
    let mut n = 0;
    let mut entries: Vec<PathBuf> = fs::read_dir(&sessions)
        .map_err(fail("sessions"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(fail("sessions"))?;
    entries.sort();
    for s in entries {
        let name = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let log = fs::File::open(s.join("log.jsonl")).map_err(fail("log.jsonl"))?;
        let log = read_log(BufReader::new(log)).map_err(|e| format!("{name}: {e}"))?;
        let stored: MetricsReport = serde_json::from_slice(&fs::read(s.join("metrics.json")).map_err(fail("metrics.json"))?)
            .map_err(|e| format!("{name}: {e}"))?;
        let replayed = replay(&log).map_err(|e| format!("{name}: {e}"))?;
        ensure!(replayed.metrics == stored, "{name}: replayed metrics differ from metrics.json");
        n += 1;
    }
    ensure!(n == 4 * SEEDS as usize, "found {n} sessions, want {}", 4 * SEEDS);
    Ok(format!("{n} sessions replayed to identical metrics"))
}
