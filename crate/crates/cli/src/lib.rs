//! Experiment plumbing behind the `stcast` binary.

pub mod commands;
pub mod config;
pub mod experiments;

use config::ExperimentConfig;
use stcast::saa::PriorInit;
use stcast::tmoe::RoutingMode;
use stcast::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainGlobal,
    TrainRegional,
    Forecast,
    Track,
    Ensemble,
    Evaluate,
    Ablate,
    Synth,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<std::path::PathBuf>,
    pub steps: Option<u64>,
    pub members: Option<usize>,
    pub no_saa: bool,
    pub random_prior: bool,
    pub no_tmoe: bool,
    pub no_month_embedding: bool,
    pub literal_acc: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig, cmd: Command) -> Result<()> {
        if self.no_tmoe && self.no_month_embedding {
            return Err(Error::invalid("cli", "--no-tmoe and --no-month-embedding are mutually exclusive"));
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.ensemble.noise.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(n) = self.steps {
            match cmd {
                Command::TrainGlobal => cfg.train.steps = n,
                Command::TrainRegional => cfg.regional.steps = n,
                Command::Forecast | Command::Ensemble => cfg.forecast.steps = n as usize,
                Command::Synth => cfg.synth.steps = n as usize,
                Command::Ablate => {
                    cfg.ablate.saa.steps = n;
                    cfg.ablate.tmoe.steps = n;
                }
                Command::Track | Command::Evaluate => {}
            }
        }
        if let Some(m) = self.members {
            cfg.ensemble.members = m;
        }
        if self.no_saa {
            cfg.regional.no_saa = true;
        }
        if self.random_prior {
            cfg.saa.prior_init = PriorInit::Random;
        }
        for mc in [&mut cfg.model, &mut cfg.ablate.saa.model] {
            if self.no_tmoe {
                mc.tmoe.mode = RoutingMode::Dense;
            }
            if self.no_month_embedding {
                mc.tmoe.mode = RoutingMode::NoMonth;
            }
        }
        if self.literal_acc {
            cfg.evaluate.literal_acc = true;
        }
        Ok(())
    }
}

/// Runs a command on a validated configuration.
pub fn run(cmd: Command, cfg: &ExperimentConfig, log: impl FnMut(&str)) -> Result<serde_json::Value> {
    cfg.validate()?;
    match cmd {
        Command::TrainGlobal => commands::train_global(cfg),
        Command::TrainRegional => commands::train_regional(cfg),
        Command::Forecast => commands::forecast(cfg),
        Command::Track => commands::track_cmd(cfg),
        Command::Ensemble => commands::ensemble(cfg),
        Command::Evaluate => commands::evaluate(cfg),
        Command::Ablate => commands::ablate(cfg, log),
        Command::Synth => commands::synth(cfg),
    }
}

/// `{"module", "code", "message"}` for a failed command.
pub fn error_json(e: &Error) -> serde_json::Value {
    serde_json::json!({ "module": e.module(), "code": e.code(), "message": e.to_string() })
}
