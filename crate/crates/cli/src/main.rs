//! `agency`: generate worlds, run benchmark matrices and scripted scenarios,
//! execute compute graphs, run the dual-model loop and serve the HTTP API.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agency_core::graph::{build_graph, run_to_completion, Budget, ExecEnv, GraphSpec};
use agency_core::session::dual_run::{run_dual, DualRunConfig};
use agency_core::session::harness::{median, median_time, run_bench, summary_csv, HarnessConfig, SessionRun};
use agency_core::session::ledger::write_log;
use agency_core::session::scenario::{builtin, builtin_names, run_scenario, ScenarioScript};
use agency_core::session::world::{generate_world, WorldSpec};
use agency_core::session::CapabilityLevel;
use agency_core::workspace::{digest_hex, load_workspace, save_workspace};
use agency_core::Error;
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "agency", version, about = "Human-in-the-loop geospatial labeling sessions and their benchmark")]
struct Cli {
    /// Seed for everything random; each subcommand is deterministic under it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "agency-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic world and save it as a workspace bundle.
    World {
        /// World spec (JSON); defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Benchmark matrices over capability levels, seeds and users.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Run a scripted scenario end to end with a simulated user.
    Scenario {
        /// Built-in scenario: summarize, crop-map or flood.
        name: Option<String>,
        /// Scenario script file instead of a built-in.
        #[arg(long, conflicts_with = "name")]
        script: Option<PathBuf>,
    },
    /// Compute graphs over a saved workspace.
    Graph {
        #[command(subcommand)]
        cmd: GraphCmd,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Static UI bundle to serve at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Dual-model loop with a truthful reviewer on a generated world.
    DualLoop {
        #[arg(long, default_value_t = 1)]
        rounds: u32,
        /// Run config (JSON); defaults to a 32x32 two-class world.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Run every (user, seed, level) session and write summary.csv plus per-session metrics and logs.
    Run(BenchRun),
}

#[derive(Args, Debug)]
struct BenchRun {
    /// Bench config (JSON); defaults to 4 levels x 5 seeds.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sessions run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum GraphCmd {
    /// Build and execute a graph, resuming under the budget until complete.
    Run {
        /// Workspace bundle directory.
        #[arg(long)]
        workspace: PathBuf,
        /// Graph spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Cost units allowed per execution call.
        #[arg(long)]
        budget: Option<u64>,
    },
}

/// A failure and the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_)
            | Error::RuntimeOp { .. }
            | Error::Stalled(_)
            | Error::CallBudgetExhausted(_)
            | Error::FixtureMiss { .. } => Failure::Runtime(e.into()),
            _ => Failure::Usage(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// Reads and parses a JSON input file; any problem is a usage error.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::Runtime)
}

fn world(cli: &Cli, config: &Option<PathBuf>) -> Outcome {
    let spec: WorldSpec = match config {
        Some(p) => read_config(p)?,
        None => WorldSpec::default(),
    };
    let seed = cli.seed.unwrap_or(0);
    let w = generate_world(&spec, seed)?;
    save_workspace(&w.workspace, &cli.out.join("workspace"))?;
    write_json(&cli.out.join("world.json"), &json!({"seed": seed, "spec": spec, "digest": w.digest()}))?;
    println!("world seed={seed} {}x{} digest={}", spec.width, spec.height, w.digest());
    Ok(())
}

fn level_table(runs: &[SessionRun], levels: &[CapabilityLevel]) -> String {
    let mut out = String::from("level,sessions,median_T_tau,median_auc,median_final_q\n");
    for &l in levels {
        let rs: Vec<&SessionRun> = runs.iter().filter(|r| r.capability == l).collect();
        let t: Vec<Option<i64>> = rs.iter().map(|r| r.metrics.time_to_threshold.map(|t| t.0)).collect();
        let auc: Vec<f64> = rs.iter().map(|r| r.metrics.progress_auc).collect();
        let q: Vec<f64> = rs.iter().map(|r| r.metrics.final_quality).collect();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "null".into());
        out.push_str(&format!("{l},{},{},{},{}\n", rs.len(), fmt(median_time(&t)), fmt(median(&auc)), fmt(median(&q))));
    }
    out
}

fn bench(cli: &Cli, args: &BenchRun) -> Outcome {
    let mut cfg: HarnessConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => HarnessConfig::default(),
    };
    // --seed shifts the seed list to start at the given seed, keeping its length
    if let Some(s) = cli.seed {
        cfg.seeds = (0..cfg.seeds.len() as u64).map(|i| s + i).collect();
    }
    if args.jobs == 0 {
        return Err(usage(anyhow!("--jobs must be at least 1")));
    }
    let runs = run_bench(&cfg, args.jobs)?;
    fs::create_dir_all(cli.out.join("sessions"))?;
    fs::write(cli.out.join("summary.csv"), summary_csv(&runs))?;
    for r in &runs {
        let dir = cli.out.join("sessions").join(&r.session_id);
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("metrics.json"), &r.metrics)?;
        let mut buf = Vec::new();
        write_log(&r.log, &mut buf)?;
        fs::write(dir.join("log.jsonl"), buf)?;
    }
    let table = level_table(&runs, &cfg.capabilities);
    fs::write(cli.out.join("levels.csv"), &table)?;
    print!("{table}");
    println!("{} sessions -> {}", runs.len(), cli.out.display());
    Ok(())
}

fn scenario(cli: &Cli, name: &Option<String>, script: &Option<PathBuf>) -> Outcome {
    let script = match (name, script) {
        (_, Some(p)) => ScenarioScript::load(p).map_err(|e| usage(anyhow::Error::from(e).context(format!("loading {}", p.display()))))?,
        (Some(n), None) => builtin(n).map_err(|_| usage(anyhow!("unknown scenario `{n}`; built-ins: {}", builtin_names().join(", "))))?,
        (None, None) => return Err(usage(anyhow!("give a scenario name ({}) or --script", builtin_names().join(", ")))),
    };
    let seed = cli.seed.unwrap_or(7);
    let outcome = run_scenario(&script, seed)?;
    let hashes = outcome.export(&cli.out)?;
    let bundle = digest_hex(serde_json::to_string(&hashes)?.as_bytes());
    let m = &outcome.metrics;
    let summary = json!({
        "scenario": script.name,
        "seed": seed,
        "final_quality": m.final_quality,
        "time_to_threshold": m.time_to_threshold,
        "validity": m.validity,
        "footprint_check": outcome.check,
        "files": hashes.len(),
        "bundle_digest": bundle,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !m.validity.all() {
        return Err(Failure::Runtime(anyhow!("exported labels failed validity checks: {:?}", m.validity)));
    }
    Ok(())
}

fn graph(cli: &Cli, ws_dir: &Path, spec: &Path, budget: Option<u64>) -> Outcome {
    let mut ws = load_workspace(ws_dir).map_err(|e| usage(anyhow::Error::from(e).context(format!("loading {}", ws_dir.display()))))?;
    let v: serde_json::Value = read_config(spec)?;
    let g = build_graph(&GraphSpec::from_json(&v)?)?;
    let budget = Budget { max_cost_units: budget, ..Budget::default() };
    let mut env = ExecEnv::default();
    let reports = run_to_completion(&g, &mut ws, &mut env, &budget)?;
    save_workspace(&ws, &cli.out.join("workspace"))?;
    write_json(&cli.out.join("execution.json"), &json!({"graph_hash": g.hash(), "calls": reports}))?;
    let artifacts: Vec<&String> = reports.iter().flat_map(|r| &r.artifacts).collect();
    println!("graph {} complete in {} call(s): {} artifact(s)", g.short_hash(), reports.len(), artifacts.len());
    Ok(())
}

fn serve(addr: SocketAddr, ui: Option<PathBuf>) -> Outcome {
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("serving /v1 on http://{addr}");
    rt.block_on(agency_service::serve(addr, ui))?;
    Ok(())
}

fn dual_loop(cli: &Cli, rounds: u32, config: &Option<PathBuf>) -> Outcome {
    let mut cfg: DualRunConfig = match config {
        Some(p) => read_config(p)?,
        None => DualRunConfig::default(),
    };
    cfg.rounds = rounds;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let report = run_dual(&cfg)?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("surface.gridr"), report.surface.to_gridr_bytes()?)?;
    write_json(&cli.out.join("rounds.json"), &json!({"config": cfg, "rounds": report.rounds}))?;
    for r in &report.rounds {
        println!("iteration {} labeled={} f1={:.4} accuracy={:.4}", r.iteration, r.labeled, r.f1, r.accuracy);
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.cmd {
        Cmd::World { config } => world(cli, config),
        Cmd::Bench { cmd: BenchCmd::Run(args) } => bench(cli, args),
        Cmd::Scenario { name, script } => scenario(cli, name, script),
        Cmd::Graph { cmd: GraphCmd::Run { workspace, spec, budget } } => graph(cli, workspace, spec, *budget),
        Cmd::Serve { addr, ui } => serve(*addr, ui.clone()),
        Cmd::DualLoop { rounds, config } => dual_loop(cli, *rounds, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
