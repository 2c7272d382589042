//! Acceptance suite. Each criterion runs against an oracle written here, is
//! timed against its limit, and prints one PASS/FAIL line. The process exits
//! non-zero if any criterion fails.
//!
//! `AGENCY_BLESS=1` rewrites the pinned bench CSV instead of comparing to it.

mod api;
mod bench;
mod dual;
mod graphs;
mod index;
mod metric_cases;
mod ranking;
mod safety;
mod scenarios;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

pub type Check = Result<String, String>;

/// Fails the criterion with a message unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}
pub(crate) use ensure;

pub fn fail<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{ctx}: {e}")
}

pub fn agency() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agency"))
}

/// Runs the CLI and returns stdout, failing on a non-zero exit.
pub fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = agency().args(args).output().map_err(fail("spawning agency"))?;
    if !out.status.success() {
        return Err(format!(
            "`agency {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("AGENCY_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "metric formulas", limit: secs(1), run: metric_cases::run },
        Criterion { id: 2, name: "index soundness", limit: secs(10), run: index::run },
        Criterion { id: 3, name: "budget invariance", limit: secs(30), run: graphs::run },
        Criterion { id: 4, name: "suggestion safety", limit: None, run: safety::run },
        Criterion { id: 5, name: "ranking oracles", limit: None, run: ranking::run },
        Criterion { id: 6, name: "dual-model sanity", limit: secs(5), run: dual::run },
        Criterion { id: 7, name: "capability direction", limit: secs(120), run: bench::run_levels },
        Criterion { id: 8, name: "replay determinism", limit: None, run: bench::run_replay },
        Criterion { id: 9, name: "scenario scripts", limit: None, run: scenarios::run },
        Criterion { id: 10, name: "api equivalence", limit: None, run: api::run },
    ];

    let mut failed = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let mut result = (c.run)();
        let took = start.elapsed();
        if let (Ok(_), Some(limit)) = (&result, c.limit) {
            if took > limit {
                result = Err(format!("took {:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs()));
            }
        }
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(e) => {
                failed += 1;
                ("FAIL", e.as_str())
            }
        };
        println!("criterion {:>2} {:<22} {tag} ({:.2}s) {detail}", c.id, c.name, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
