use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use saar_core::linalg::matrix_to_rows;
use saar_core::report::{write_csv, write_summary};
use saar_core::scenario::{load_scenario, ScenarioConfig, ScenarioError};
use saar_core::sim::{run, ControllerMode, RunOutput, RunSummary};
use saar_core::Error;
use serde_json::json;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_NON_FINITE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "saar",
    version,
    about = "Safety-aware, attack-resilient containment control simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write the trace CSV and summary JSON.
    Run(RunArgs),
    /// Check a scenario and print every violation as JSON.
    Validate(ScenarioArg),
    /// Print the synthesised gains and residuals for every follower.
    Gains(ScenarioArg),
    /// Vary one scalar parameter and write one summary row per value.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ScenarioArg {
    /// Path to a scenario JSON file, or a bundled scenario name.
    #[arg(long, short, default_value = "paper_sec4")]
    scenario: String,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Override the controller mode.
    #[arg(long, short)]
    mode: Option<ControllerMode>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Directory for trace.csv and summary.json.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
    /// Skip writing the trace CSV.
    #[arg(long)]
    no_trace: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long, short)]
    mode: Option<ControllerMode>,
    /// Parameter name, e.g. d_s, delta, alpha, q, c, attack_scale.
    #[arg(long)]
    param: String,
    #[arg(long)]
    from: f64,
    #[arg(long)]
    to: f64,
    /// Number of values, endpoints included.
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, short, default_value = "sweep")]
    out: PathBuf,
    /// Maximum concurrent runs; defaults to available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Gains(args) => cmd_gains(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn load(spec: &str) -> anyhow::Result<ScenarioConfig> {
    load_scenario(spec).with_context(|| format!("loading scenario '{spec}'"))
}

fn exit_code(out: &RunOutput) -> u8 {
    match out.failure.as_ref().map(Error::root) {
        Some(Error::QpInfeasible { .. }) => EXIT_INFEASIBLE,
        Some(Error::NonFinite { .. }) => EXIT_NON_FINITE,
        Some(_) => EXIT_CONFIG,
        None if out.summary.first_divergence_time.is_some() => EXIT_DIVERGED,
        None => 0,
    }
}

fn cmd_run(args: RunArgs) -> anyhow::Result<u8> {
    let mut cfg = load(&args.scenario.scenario)?;
    if let Some(mode) = args.mode {
        cfg.simulation.mode = mode;
    }
    if let Some(h) = args.horizon {
        cfg.set_scalar("horizon", h).map_err(anyhow::Error::msg)?;
    }
    if let Some(dt) = args.dt {
        cfg.set_scalar("dt", dt).map_err(anyhow::Error::msg)?;
    }
    let (system, world) = cfg.compile()?;
    info!(
        "running '{}' in {} mode",
        cfg.name,
        cfg.simulation.mode.as_str()
    );
    let out = run(&system, world, &cfg.run_options());

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    if !args.no_trace {
        let path = args.out.join("trace.csv");
        write_csv(BufWriter::new(create(&path)?), &out.records)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let path = args.out.join("summary.json");
    write_summary(BufWriter::new(create(&path)?), &out.summary)?;
    write_summary(io::stdout().lock(), &out.summary)?;

    let code = exit_code(&out);
    if let Some(e) = &out.failure {
        eprintln!("run aborted: {e}");
    } else if let Some(t) = out.summary.first_divergence_time {
        eprintln!(
            "divergence detected: |e_c| exceeded {} at t = {t}",
            cfg.simulation.divergence_threshold
        );
    }
    Ok(code)
}

fn create(path: &Path) -> anyhow::Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn cmd_validate(args: ScenarioArg) -> anyhow::Result<u8> {
    let report = match load_scenario(&args.scenario) {
        Ok(_) => json!({ "valid": true, "violations": [] }),
        Err(ScenarioError::Invalid(v)) => json!({ "valid": false, "violations": v }),
        Err(ScenarioError::Parse {
            line,
            column,
            message,
        }) => json!({
            "valid": false,
            "violations": [{ "field": format!("line {line}, column {column}"), "message": message }],
        }),
        Err(e @ ScenarioError::Io { .. }) => json!({
            "valid": false,
            "violations": [{ "field": "file", "message": e.to_string() }],
        }),
    };
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &report)?;
    writeln!(stdout)?;
    Ok(if report["valid"] == true {
        0
    } else {
        EXIT_CONFIG
    })
}

fn cmd_gains(args: ScenarioArg) -> anyhow::Result<u8> {
    let cfg = load(&args.scenario)?;
    let (system, _) = cfg.compile()?;
    let followers: Vec<_> = system
        .followers
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let g = &f.gains;
            json!({
                "follower": i + 1,
                "P": matrix_to_rows(&g.p),
                "K": matrix_to_rows(&g.k),
                "H": matrix_to_rows(&g.h),
                "Pi": matrix_to_rows(&g.pi),
                "care_residual": g.care_residual,
                "regulator_residual": g.regulator_residual,
            })
        })
        .collect();
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &json!({ "followers": followers }))?;
    writeln!(stdout)?;
    Ok(0)
}

fn sweep_values(from: f64, to: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..count)
            .map(|k| from + (to - from) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<u8> {
    let mut base = load(&args.scenario.scenario)?;
    if let Some(mode) = args.mode {
        base.simulation.mode = mode;
    }
    base.clone()
        .set_scalar(&args.param, args.from)
        .map_err(anyhow::Error::msg)?;
    let values = sweep_values(args.from, args.to, args.count);
    if values.is_empty() {
        bail!("--count must be at least 1");
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let mut rows: Vec<(f64, Result<RunSummary, String>)> = Vec::with_capacity(values.len());
    for chunk in values.chunks(jobs) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&value| {
                    let mut cfg = base.clone();
                    let out_dir = args.out.clone();
                    let param = args.param.clone();
                    s.spawn(move || sweep_one(&mut cfg, &param, value, &out_dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        rows.extend(chunk.iter().copied().zip(results));
    }

    let path = args.out.join("sweep.csv");
    let mut w = BufWriter::new(create(&path)?);
    writeln!(w, "{},mode,max_ec,max_ec_tail,final_ec,min_pair_distance,first_divergence_time,qp_infeasible_count,error", args.param)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.16e}"));
    for (value, row) in &rows {
        match row {
            Ok(s) => writeln!(
                w,
                "{value:.16e},{},{:.16e},{:.16e},{:.16e},{},{},{},{}",
                s.mode.as_str(),
                s.max_ec,
                s.max_ec_tail,
                s.final_ec,
                opt(s.min_pair_distance),
                opt(s.first_divergence_time),
                s.qp_infeasible_count,
                csv_quote(s.error.as_deref().unwrap_or("")),
            )?,
            Err(e) => writeln!(
                w,
                "{value:.16e},{},,,,,,,{}",
                base.simulation.mode.as_str(),
                csv_quote(e)
            )?,
        }
    }
    w.flush()?;
    let failed = rows.iter().filter(|(_, r)| r.is_err()).count();
    if failed > 0 {
        warn!("{failed} sweep value(s) could not be compiled");
    }
    println!("{}", path.display());
    Ok(0)
}

fn sweep_one(
    cfg: &mut ScenarioConfig,
    param: &str,
    value: f64,
    out_dir: &Path,
) -> Result<RunSummary, String> {
    cfg.set_scalar(param, value)?;
    let (system, world) = cfg.compile().map_err(|e| e.to_string())?;
    let out = run(&system, world, &cfg.run_options());
    let path = out_dir.join(format!("summary_{param}_{value}.json"));
    File::create(&path)
        .map_err(|e| e.to_string())
        .and_then(|f| write_summary(BufWriter::new(f), &out.summary).map_err(|e| e.to_string()))?;
    Ok(out.summary)
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
