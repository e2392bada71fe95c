use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rew_mslm::config::SessionConfig;
use rew_mslm::experiment::{new_decoder, plan_session, replay, run_experiment_with, Phases};
use rew_mslm::io::{
    load_log, read_features, save_log, sha256_hex, write_features, write_report_csv, write_trials_csv, ModelArchive,
};
use rew_mslm::metrics::{evaluate, stability, IndicatorReport, LatencyParams, SlopeFit};
use rew_mslm::mslm::MslmDecoder;
use rew_mslm::sim::chance::{chance_baseline, timeout_from_trials};
use rew_mslm::sim::session::{Phase, SessionLog};

/// Simulate, calibrate and evaluate REW-MSLM decoders.
///
/// Log verbosity follows `RUST_LOG` (e.g. `RUST_LOG=info`).
#[derive(Parser)]
#[command(name = "rewmslm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop sessions (training then test) and write logs,
    /// per-session models and reports.
    Simulate(RunArgs),
    /// Run training phases only and write the calibrated model.
    Calibrate(RunArgs),
    /// Compute indicators from session logs.
    Evaluate(EvaluateArgs),
    /// Random-walk chance baseline.
    Chance(ChanceArgs),
    /// Summarize a model archive.
    Inspect(InspectArgs),
    /// Re-decode a recorded feature stream with a frozen model.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Session configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: standard, noisy or five_state.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SessionConfig> {
        Ok(match (&self.config, &self.preset) {
            (Some(path), _) => SessionConfig::load(path)?,
            (None, Some(name)) => SessionConfig::preset(name)?,
            (None, None) => SessionConfig::standard(),
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Continue from this model archive instead of a zero model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Accept a model trained under a different configuration.
    #[arg(long)]
    allow_mismatch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Training,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Session logs (JSON lines), in session order.
    #[arg(long, required = true, num_args = 1..)]
    log: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    phase: PhaseArg,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report CSV path (one row per session).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ChanceArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of runs (defaults to the configuration's `chance_runs`).
    #[arg(long)]
    runs: Option<usize>,
    /// Derive the timeout from the trial durations in these logs.
    #[arg(long, num_args = 1..)]
    timeout_from: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model archive to inspect.
    #[arg(long, required_unless_present = "fresh")]
    model: Option<PathBuf>,
    /// Inspect a zero-initialized decoder for the configuration instead.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature stream (concatenated TNSR records).
    #[arg(long)]
    features: PathBuf,
    /// Session log whose test-phase outputs must be reproduced exactly.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Decoded outputs as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Simulate(a) => run_sessions(&a, Phases::Both),
        Command::Calibrate(a) => run_sessions(&a, Phases::TrainingOnly),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Chance(a) => cmd_chance(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Replay(a) => cmd_replay(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn starting_model(args: &RunArgs, cfg: &SessionConfig) -> Result<Option<MslmDecoder>> {
    let Some(path) = &args.model else { return Ok(None) };
    let archive = ModelArchive::load(path)?;
    archive.check_fingerprint(cfg, args.allow_mismatch)?;
    Ok(Some(archive.decoder))
}

#[derive(Serialize)]
struct Stability {
    indicator: String,
    fit: Option<SlopeFit>,
    note: Option<String>,
}

fn stability_rows(reports: &[IndicatorReport]) -> Vec<Stability> {
    stability(reports)
        .into_iter()
        .map(|(indicator, fit)| match fit {
            Ok(f) => Stability { indicator, fit: Some(f), note: None },
            Err(e) => Stability { indicator, fit: None, note: Some(e.to_string()) },
        })
        .collect()
}

fn run_sessions(args: &RunArgs, phases: Phases) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.sim.record_features = phases == Phases::Both;
    let start = starting_model(args, &cfg)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    let mut reports = Vec::new();
    let out_dir = &args.out;
    let cfg_ref = &cfg;
    let outcome = run_experiment_with(&cfg, start, phases, |i, log, decoder| {
        let n = i + 1;
        save_log(log, &out_dir.join(format!("session_{n}.jsonl")))?;
        write_trials_csv(&log.trials, File::create(out_dir.join(format!("trials_{n}.csv")))?)?;
        if phases == Phases::Both {
            write_features(&log.features, File::create(out_dir.join(format!("features_{n}.tnsr")))?)?;
            ModelArchive::new(decoder.clone(), cfg_ref, n).save(&out_dir.join(format!("model_{n}.json")))?;
            reports.push(evaluate(log, &cfg_ref.sim.layout, Phase::Test, &LatencyParams::default())?);
        }
        Ok(())
    })?;
    ModelArchive::new(outcome.decoder.clone(), &cfg, cfg.sessions).save(&args.out.join("model.json"))?;
    if !reports.is_empty() {
        write_json(&args.out.join("report.json"), &reports)?;
        write_report_csv(&reports, File::create(args.out.join("report.csv"))?)?;
        if reports.len() >= 3 {
            write_json(&args.out.join("stability.json"), &stability_rows(&reports))?;
        }
        for (i, r) in reports.iter().enumerate() {
            println!(
                "session {}: accuracy {:.3}  f-score {:.3}  error blocks {:.2}/min  {}",
                i + 1,
                r.accuracy,
                r.f_score,
                r.error_blocks.rate_per_min,
                r.reach
                    .iter()
                    .map(|s| format!("{}: SR {:.0}%", rew_mslm::metrics::limb_key(s.limb), s.sr))
                    .collect::<Vec<_>>()
                    .join("  ")
            );
        }
    }
    println!("{} updates; model written to {}", outcome.decoder.updates(), args.out.join("model.json").display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let phase = match args.phase {
        PhaseArg::Training => Phase::Training,
        PhaseArg::Test => Phase::Test,
    };
    let logs: Vec<SessionLog> =
        args.log.iter().map(|p| load_log(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<_>>()?;
    let reports = logs
        .iter()
        .map(|l| evaluate(l, &cfg.sim.layout, phase, &LatencyParams::default()))
        .collect::<rew_mslm::Result<Vec<_>>>()?;
    for r in &reports {
        check_report(r)?;
    }
    #[derive(Serialize)]
    struct Out<'a> {
        reports: &'a [IndicatorReport],
        stability: Vec<Stability>,
    }
    let out = Out { reports: &reports, stability: if reports.len() >= 3 { stability_rows(&reports) } else { Vec::new() } };
    match &args.out {
        Some(p) => write_json(p, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    if let Some(p) = &args.csv {
        write_report_csv(&reports, File::create(p)?)?;
    }
    Ok(())
}

/// Range checks every report must satisfy.
fn check_report(r: &IndicatorReport) -> Result<()> {
    let unit = |name: &str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(anyhow!("{name} = {v} outside [0, 1]"))
        }
    };
    unit("accuracy", r.accuracy)?;
    unit("f_score", r.f_score)?;
    unit("sample_accuracy", r.sample_accuracy)?;
    for s in &r.reach {
        if !(0.0..=100.0).contains(&s.sr) {
            bail!("success rate {} outside [0, 100]", s.sr);
        }
        if let Some(min) = s.r_ratio_min {
            if min < 1.0 - 1e-12 {
                bail!("R-ratio {min} below 1");
            }
        }
    }
    Ok(())
}

fn cmd_chance(args: &ChanceArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let timeout = if args.timeout_from.is_empty() {
        None
    } else {
        let mut trials = Vec::new();
        let mut tick_s = cfg.sim.tick_s();
        for p in &args.timeout_from {
            let log = load_log(p).with_context(|| format!("reading {}", p.display()))?;
            tick_s = log.tick_s;
            trials.extend(log.trials);
        }
        Some(timeout_from_trials(&trials, tick_s).ok_or_else(|| anyhow!("no trials to derive a timeout from"))?)
    };
    let plan = plan_session(&cfg, 0, Phases::Both)?;
    let runs = args.runs.unwrap_or(cfg.chance_runs);
    let report = chance_baseline(&plan.test, &cfg.sim, runs, timeout, args.seed.unwrap_or(cfg.seed))?;
    match &args.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct Inspection {
    fingerprint: Option<String>,
    updates: u64,
    expert_f_star: Vec<Option<usize>>,
    gating_f_star: usize,
    transition: Vec<Vec<f64>>,
    class_priors: Vec<f64>,
    pi: Vec<f64>,
    convergence: Vec<Vec<f64>>,
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let (decoder, fingerprint) = if args.fresh {
        (new_decoder(&args.config.load()?)?, None)
    } else {
        let path = args.model.as_ref().expect("clap requires --model");
        let a = ModelArchive::load(path)?;
        (a.decoder, Some(a.fingerprint))
    };
    let g = decoder.gating();
    let out = Inspection {
        fingerprint,
        updates: decoder.updates(),
        expert_f_star: (0..decoder.k()).map(|k| decoder.expert(k).map(|e| e.f_star())).collect(),
        gating_f_star: g.classifier().f_star(),
        transition: g.transition().to_vec(),
        class_priors: g.class_priors().to_vec(),
        pi: g.pi().to_vec(),
        convergence: decoder.convergence().to_vec(),
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Serialize)]
struct ReplayLine<'a> {
    tick: usize,
    state: usize,
    y_hat: &'a [f64],
    gamma: &'a [f64],
}

fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let archive = ModelArchive::load(&args.model)?;
    let features = read_features(File::open(&args.features).with_context(|| format!("opening {}", args.features.display()))?)?;
    let results = replay(&archive.decoder, &features)?;
    let mut buf = Vec::new();
    for (i, r) in results.iter().enumerate() {
        serde_json::to_writer(&mut buf, &ReplayLine { tick: i, state: r.state, y_hat: &r.y_hat, gamma: &r.gamma })?;
        buf.push(b'\n');
    }
    if let Some(p) = &args.out {
        std::fs::write(p, &buf)?;
    }
    println!("{} ticks  sha256 {}", results.len(), sha256_hex(&buf));
    if let Some(p) = &args.log {
        let log = load_log(p)?;
        let test = log.ticks_in(Phase::Test);
        if test.len() != results.len() {
            bail!("log has {} test ticks, feature stream has {}", test.len(), results.len());
        }
        for (i, (r, t)) in results.iter().zip(test).enumerate() {
            let same = r.y_hat.len() == t.y_hat.len() && r.y_hat.iter().zip(&t.y_hat).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same || r.state != t.decoded {
                bail!("replay diverges from the log at test tick {i}");
            }
        }
        println!("matches the logged outputs bit-exactly");
    }
    Ok(())
}
