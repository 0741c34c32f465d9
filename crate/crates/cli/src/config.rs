//! Experiment configuration.
//!
//! One TOML document describes an experiment. Every table rejects unknown
//! keys. Command-line flags are applied after the file is parsed, so a flag
//! always wins over the matching key:
//!
//! | flag                   | key                                        |
//! |------------------------|--------------------------------------------|
//! | `--seed N`             | `seed`                                     |
//! | `--out DIR`            | `out`                                      |
//! | `--steps N`            | the step count of the command being run    |
//! | `--members N`          | `ensemble.members`                         |
//! | `--no-saa`             | `regional.no_saa = true`                   |
//! | `--random-prior`       | `saa.prior_init = "random"`                |
//! | `--no-tmoe`            | `model.tmoe.mode = "dense"`                |
//! | `--no-month-embedding` | `model.tmoe.mode = "no-month"`             |
//! | `--literal-acc`        | `evaluate.literal_acc = true`              |
//!
//! `--steps` maps to `train.steps` (train-global), `regional.steps`
//! (train-regional), `forecast.steps` (forecast, ensemble), `synth.steps`
//! (synth) and the per-arm budget of the selected study (ablate).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stcast::ensemble::NoiseConfig;
use stcast::fields::synth::SynthConfig;
use stcast::fields::RegionSpec;
use stcast::model::ModelConfig;
use stcast::saa::SaaConfig;
use stcast::{Error, Result};

use crate::experiments::{SaaStudy, TmoeStudy};

const MODULE: &str = "cli";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory receiving every artifact.
    pub out: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regional: RegionalConfig,
    pub saa: SaaConfig,
    pub forecast: ForecastConfig,
    pub ensemble: EnsembleConfig,
    pub cyclone: CycloneConfig,
    pub evaluate: EvaluateConfig,
    pub ablate: AblateConfig,
}

/// Training data. Directories hold grid-file sequences; any directory left
/// unset is replaced by synthetic data generated from `[synth]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub global_dir: Option<PathBuf>,
    pub regional_dir: Option<PathBuf>,
    pub val_global_dir: Option<PathBuf>,
    pub val_regional_dir: Option<PathBuf>,
    pub train_seed: u64,
    pub val_seed: u64,
    /// Length of the synthetic validation sequence.
    pub val_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionalConfig {
    /// Global checkpoint; defaults to `<out>/global.ckpt`.
    pub global_checkpoint: Option<PathBuf>,
    /// Backbone fine-tuning on regional data before the coupling is attached.
    pub pretrain_steps: u64,
    pub steps: u64,
    pub lr: f64,
    /// Skip the coupling and keep fine-tuning the backbone instead.
    pub no_saa: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Checkpoint to roll out; defaults to `<out>/global.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Initial state as a grid file; defaults to the first validation state.
    pub init: Option<PathBuf>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub save_members: bool,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycloneConfig {
    /// Sequence to track; defaults to `<out>/forecast`.
    pub input: Option<PathBuf>,
    /// First-guess centre; defaults to the global minimum of the first state.
    pub init_lat: Option<f64>,
    pub init_lon: Option<f64>,
    pub search_radius_deg: f64,
    /// Planted depression written by `synth`: start cell, steps, depth, width.
    pub fixture_row: usize,
    pub fixture_col: usize,
    pub fixture_steps: usize,
    pub fixture_depth: f64,
    pub fixture_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Forecast sequence; defaults to `<out>/forecast`.
    pub pred: Option<PathBuf>,
    /// Verifying sequence, matched to the forecast by valid time; defaults to
    /// the validation data.
    pub truth: Option<PathBuf>,
    pub literal_acc: bool,
    /// Also write per-block routing counts of the global checkpoint.
    pub routing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Saa,
    Tmoe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub study: Study,
    pub saa: SaaStudy,
    pub tmoe: TmoeStudy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig {
            global_lat: 16,
            global_lon: 32,
            regional_lat: 16,
            regional_lon: 32,
            region: RegionSpec { center_x: 6, center_y: 12, height: 4, width: 8 },
            remote: RegionSpec { center_x: 13, center_y: 24, height: 2, width: 4 },
            noise_scale: 4.0,
            steps: 96,
            ..Default::default()
        };
        let mut model = ModelConfig { channels: 3, n_lat: 16, n_lon: 32, width: 32, blocks: 2, heads: 4, window: 4, batch_size: 4, ..Default::default() };
        model.tmoe.experts = 4;
        model.optimizer.lr = 1e-3;
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("stcast-out"),
            data: DataConfig::default(),
            synth,
            model,
            train: TrainConfig::default(),
            regional: RegionalConfig::default(),
            saa: SaaConfig::default(),
            forecast: ForecastConfig::default(),
            ensemble: EnsembleConfig::default(),
            cyclone: CycloneConfig::default(),
            evaluate: EvaluateConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { global_dir: None, regional_dir: None, val_global_dir: None, val_regional_dir: None, train_seed: 1, val_seed: 2, val_steps: 33 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1000 }
    }
}

impl Default for RegionalConfig {
    fn default() -> Self {
        RegionalConfig { global_checkpoint: None, pretrain_steps: 500, steps: 2000, lr: 1e-3, no_saa: false }
    }
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig { checkpoint: None, init: None, steps: 8 }
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { members: 8, save_members: false, noise: NoiseConfig::default() }
    }
}

impl Default for CycloneConfig {
    fn default() -> Self {
        CycloneConfig {
            input: None,
            init_lat: None,
            init_lon: None,
            search_radius_deg: stcast::cyclone::DEFAULT_SEARCH_RADIUS_DEG,
            fixture_row: 4,
            fixture_col: 4,
            fixture_steps: 8,
            fixture_depth: 20.0,
            fixture_sigma: 1.5,
        }
    }
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { pred: None, truth: None, literal_acc: false, routing: true }
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { study: Study::Saa, saa: SaaStudy::default(), tmoe: TmoeStudy::default() }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(MODULE, format!("config: {}", e.to_string().trim_end())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(MODULE, path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every referenced path and every numeric setting.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let paths = [
            &d.global_dir,
            &d.regional_dir,
            &d.val_global_dir,
            &d.val_regional_dir,
            &self.regional.global_checkpoint,
            &self.forecast.checkpoint,
            &self.forecast.init,
        ];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::invalid(MODULE, format!("path {} does not exist", p.display())));
            }
        }
        self.synth.validate()?;
        self.model.validate()?;
        self.ensemble.noise.validate()?;
        let s = &self.saa;
        if !(s.alpha > 0.0) || s.heads == 0 || !self.model.width.is_multiple_of(s.heads) {
            return Err(Error::invalid(MODULE, "saa needs alpha > 0 and a head count dividing the width"));
        }
        if self.data.global_dir.is_none() && (self.synth.global_lat, self.synth.global_lon) != (self.model.n_lat, self.model.n_lon) {
            return Err(Error::shape(MODULE, "model grid differs from the synthetic global grid"));
        }
        if self.synth.variables.len() != self.model.channels && self.data.global_dir.is_none() {
            return Err(Error::shape(MODULE, "model channels differ from the synthetic variables"));
        }
        if self.regional.lr < 0.0 || !self.regional.lr.is_finite() {
            return Err(Error::invalid(MODULE, "regional.lr must be a finite value >= 0"));
        }
        if self.ensemble.members == 0 || self.forecast.steps == 0 || self.data.val_steps < 2 {
            return Err(Error::invalid(MODULE, "members, forecast steps must be positive and val_steps at least 2"));
        }
        if !(self.cyclone.search_radius_deg >= 0.0) || !(self.cyclone.fixture_sigma > 0.0) {
            return Err(Error::invalid(MODULE, "cyclone search radius must be >= 0 and fixture width positive"));
        }
        if self.cyclone.init_lat.is_some() != self.cyclone.init_lon.is_some() {
            return Err(Error::invalid(MODULE, "set both cyclone.init_lat and cyclone.init_lon or neither"));
        }
        if self.ablate.saa.seeds == 0 || self.ablate.tmoe.seeds == 0 {
            return Err(Error::invalid(MODULE, "ablation needs at least one seed"));
        }
        Ok(())
    }

    pub fn global_checkpoint(&self) -> PathBuf {
        self.regional.global_checkpoint.clone().unwrap_or_else(|| self.out.join("global.ckpt"))
    }
}
