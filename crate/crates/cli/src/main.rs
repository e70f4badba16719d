use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maestrocut_core::config::{resolve_config, Overrides, OUT_ENV};
use maestrocut_core::report::{Dashboard, Decision, EntryStatus};
use maestrocut_core::runner::{self, RunOutput, Tiers};
use maestrocut_core::selftest;
use maestrocut_core::tier1::Policy;
use maestrocut_core::tier2::ScenarioName;

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "maestrocut", version, about = "Drift-aware circuit cutting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tier-1 closed loop over workloads x policies x seeds.
    Tier1(RunArgs),
    /// Tier-2 queue scenarios and overhead sweep.
    Tier2(RunArgs),
    /// Both tiers plus the dashboard.
    Suite(RunArgs),
    /// Brute-force oracle batteries.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute dashboard.json of an existing run directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tier-1 seeds per workload and Tier-2 episodes per scenario.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output root; the run goes to <out>/<run-id>.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    scenario: Option<ScenarioName>,
    #[arg(long)]
    policy: Option<Policy>,
    /// PhasePad overhead fraction applied to Tier-2 service times.
    #[arg(long)]
    overhead: Option<f64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn print_dashboard(d: &Dashboard) {
    for e in &d.entries {
        let value = match (e.status, e.value) {
            (EntryStatus::Ok, Some(v)) => format!("{v:.4}"),
            _ => "missing".into(),
        };
        let ci = match (e.ci_lower, e.ci_upper) {
            (Some(l), Some(u)) => format!(" [{l:.4}, {u:.4}]"),
            _ => String::new(),
        };
        out!(
            "{:<5} {} {:<6} {:<18} {}{} {} {} ({} samples)",
            decision_word(e.decision),
            e.tier,
            e.name,
            e.metric,
            value,
            ci,
            comparison_word(e.comparison),
            e.target,
            e.samples
        );
    }
    out!("dashboard: {}", decision_word(d.decision));
}

fn decision_word(d: Decision) -> &'static str {
    match d {
        Decision::Pass => "pass",
        Decision::Fail => "fail",
    }
}

fn comparison_word(c: maestrocut_core::report::Comparison) -> &'static str {
    match c {
        maestrocut_core::report::Comparison::AtMost => "<=",
        maestrocut_core::report::Comparison::AtLeast => ">=",
    }
}

fn exit_for(d: &Dashboard) -> ExitCode {
    match d.decision {
        Decision::Pass => ExitCode::SUCCESS,
        Decision::Fail => ExitCode::from(1),
    }
}

fn run(args: RunArgs, tiers: Tiers) -> Result<ExitCode, maestrocut_core::Error> {
    let overrides = Overrides {
        seed: args.seed,
        seeds: args.seeds,
        out: args.out,
        scenario: args.scenario,
        policy: args.policy,
        overhead: args.overhead,
    };
    let cfg = resolve_config(args.config.as_deref(), &overrides, std::env::var(OUT_ENV).ok())?;
    let out: RunOutput = runner::with_jobs(args.jobs, || runner::run(&cfg, tiers))??;
    out!("run {} -> {}", cfg.run_id(), out.dir.display());
    if let Some(t) = out.timing {
        out!(
            "phasepad wall-clock share over {} tier1 episodes: mask+seal {:.3}%, with open+unmask {:.3}%",
            t.episodes,
            100.0 * t.mask_seal_share(),
            100.0 * t.round_trip_share()
        );
    }
    print_dashboard(&out.dashboard);
    Ok(exit_for(&out.dashboard))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tier1(a) => run(a, Tiers::One),
        Command::Tier2(a) => run(a, Tiers::Two),
        Command::Suite(a) => run(a, Tiers::Both),
        Command::Selftest { seed } => {
            let results = selftest::run_all(seed);
            for r in &results {
                out!("{} {}: {}", if r.passed { "pass" } else { "FAIL" }, r.name, r.detail);
            }
            Ok(if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Report { dir } => runner::rereport(&dir).map(|d| {
            print_dashboard(&d);
            exit_for(&d)
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
