use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stcast::Error;
use stcast_cli::config::ExperimentConfig;
use stcast_cli::{error_json, run, Command, Overrides};

/// Global and regional grid forecasting experiments.
///
/// Flags override the matching keys of the `--config` file. Set
/// `STCAST_THREADS` to cap the worker threads.
#[derive(Parser, Debug)]
#[command(name = "stcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Step count of the command (training steps, rollout length, ...).
    #[arg(long, global = true, value_name = "N")]
    steps: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    members: Option<usize>,
    /// Train the regional model without the coupling.
    #[arg(long, global = true)]
    no_saa: bool,
    /// Initialize the prior from a truncated normal.
    #[arg(long, global = true)]
    random_prior: bool,
    /// Plain feed-forward blocks instead of routed experts.
    #[arg(long, global = true)]
    no_tmoe: bool,
    /// Routed experts without the month embedding.
    #[arg(long, global = true)]
    no_month_embedding: bool,
    /// Uncentred anomaly correlation.
    #[arg(long, global = true)]
    literal_acc: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Train the global forecaster.
    TrainGlobal,
    /// Train the regional model against a global checkpoint.
    TrainRegional,
    /// Roll out a global checkpoint.
    Forecast,
    /// Track the pressure minimum through a sequence.
    Track,
    /// Perturbed-initial-condition ensemble forecast.
    Ensemble,
    /// Score a forecast against verifying states.
    Evaluate,
    /// Run an ablation study over seeds.
    Ablate,
    /// Write synthetic data and a planted cyclone case.
    Synth,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::TrainGlobal => Command::TrainGlobal,
            Cmd::TrainRegional => Command::TrainRegional,
            Cmd::Forecast => Command::Forecast,
            Cmd::Track => Command::Track,
            Cmd::Ensemble => Command::Ensemble,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Ablate => Command::Ablate,
            Cmd::Synth => Command::Synth,
        }
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("{}", error_json(e));
    ExitCode::FAILURE
}

fn threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("STCAST_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::invalid("cli", format!("STCAST_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::invalid("cli", e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            return fail(&Error::invalid("cli", msg.lines().next().unwrap_or_default().trim_start_matches("error: ")));
        }
    };
    if let Err(e) = threads() {
        return fail(&e);
    }
    let cmd = Command::from(cli.command);
    let mut cfg = match &cli.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        },
        None => ExperimentConfig::default(),
    };
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        steps: cli.steps,
        members: cli.members,
        no_saa: cli.no_saa,
        random_prior: cli.random_prior,
        no_tmoe: cli.no_tmoe,
        no_month_embedding: cli.no_month_embedding,
        literal_acc: cli.literal_acc,
    };
    if let Err(e) = ov.apply(&mut cfg, cmd) {
        return fail(&e);
    }
    match run(cmd, &cfg, |m| eprintln!("{m}")) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
