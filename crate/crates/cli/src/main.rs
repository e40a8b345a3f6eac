mod commands;
mod config;
mod model;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{GoldenFailure, Run};

#[derive(Parser, Debug)]
#[command(name = "rmfg", version, about = "Robust mean-field game solver")]
struct Cli {
    /// TOML config, or a manifest.json written by an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set grid.h=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory. Defaults to output.dir, then $RMFG_OUTPUT_DIR, then ./rmfg-out.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Robust value of the configured policy, best responses and worst-case kernels.
    SolveMfg,
    /// One-shot deviation check of the configured policy.
    VerifyMfg,
    /// N-agent value and one-shot check of the configured policy.
    SolveNagent,
    /// Damped best-response search for an N-agent equilibrium.
    EquilibriumNagent,
    /// Seeded N-agent trajectory.
    Simulate,
    /// Solvable two-state game checked against its closed form.
    ExampleTwoState {
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// One-period comparison game checked against its reference numbers.
    ExampleComparison,
    /// Value-gap, one-shot-gain and limit-policy studies over the N ladder.
    StudyConvergence,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SolveMfg => "solve-mfg",
            Command::VerifyMfg => "verify-mfg",
            Command::SolveNagent => "solve-nagent",
            Command::EquilibriumNagent => "equilibrium-nagent",
            Command::Simulate => "simulate",
            Command::ExampleTwoState { .. } => "example-two-state",
            Command::ExampleComparison => "example-comparison",
            Command::StudyConvergence => "study-convergence",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = Vec::new();
    match &cli.command {
        Command::ExampleTwoState { epsilon } => {
            overrides.push("model.builtin=two-state-solvable".to_string());
            if let Some(e) = epsilon {
                overrides.push(format!("model.epsilon={e}"));
            }
        }
        Command::ExampleComparison => overrides.push("model.builtin=comparison-one-period".to_string()),
        _ => {}
    }
    overrides.extend(cli.overrides.iter().cloned());
    let (cfg, _) = config::load(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    if let Some(w) = cli.workers {
        if w == 0 {
            anyhow::bail!("--workers: need at least one worker");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    let out = commands::output_dir(cli.output.as_deref(), &cfg);
    let run = Run {
        cfg,
        out,
        subcommand: cli.command.name().to_string(),
    };
    run.write_manifest()?;
    match cli.command {
        Command::SolveMfg => commands::solve_mfg(&run, false),
        Command::VerifyMfg => commands::solve_mfg(&run, true),
        Command::SolveNagent => commands::solve_nagent(&run),
        Command::EquilibriumNagent => commands::equilibrium_nagent(&run),
        Command::Simulate => commands::simulate_cmd(&run),
        Command::ExampleTwoState { .. } => commands::example_two_state(&run),
        Command::ExampleComparison => commands::example_comparison(&run),
        Command::StudyConvergence => commands::study_convergence(&run),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<GoldenFailure>().is_some() {
            return 3;
        }
        if let Some(rmfg::Error::NonConvergence { .. }) = cause.downcast_ref::<rmfg::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
