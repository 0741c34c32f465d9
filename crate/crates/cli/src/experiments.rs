//! Training protocols shared by the commands and the acceptance suite.

use chrono::{TimeZone, Utc};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use stcast::fields::synth::{synth_generate, SynthConfig};
use stcast::fields::{compute_norm_stats, normalize, FieldTensor, NormStats, RegionSpec};
use stcast::metrics::rmse_weighted;
use stcast::autograd::{Graph, Mat};
use stcast::model::{unpatchify, CouplingSpec, Dataset, Forecaster, ModelConfig, Pair, RegionalPair, Trainer};
use stcast::saa::{PriorInit, SaaConfig};
use stcast::tmoe::RoutingMode;
use stcast::{Error, Result};

const MODULE: &str = "cli";

pub fn normalize_all(seq: &[FieldTensor], stats: &NormStats) -> Result<Vec<FieldTensor>> {
    seq.iter().map(|f| normalize(f, stats)).collect()
}

/// Pairs regional step `k → k+1` with the concurrent global state `k`.
pub fn regional_pairs(global: &[FieldTensor], regional: &[FieldTensor]) -> Result<Vec<RegionalPair>> {
    if global.len() != regional.len() || regional.len() < 2 {
        return Err(Error::invalid(
            MODULE,
            format!("need matching global/regional sequences of length >= 2, got {} and {}", global.len(), regional.len()),
        ));
    }
    Ok(regional
        .windows(2)
        .zip(global)
        .map(|(r, g)| RegionalPair { input: r[0].clone(), target: r[1].clone(), global: g.clone() })
        .collect())
}

/// One-step latitude-weighted RMSE averaged over pairs and channels.
pub fn mean_rmse(model: &Forecaster, data: &Dataset) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for (i, p) in data.pairs().iter().enumerate() {
        let pred = if model.is_coupled() {
            let states = data
                .global_states(i)
                .ok_or_else(|| Error::invalid(MODULE, "coupled model evaluated on data without global states"))?;
            forward_field(model, p, Some(states))?
        } else {
            forward_field(model, p, None)?
        };
        for c in 0..pred.channels() {
            let a = pred.values().index_axis(Axis(0), c);
            let b = p.target.values().index_axis(Axis(0), c);
            total += rmse_weighted(a, b, p.target.grid())?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

fn forward_field(model: &Forecaster, p: &Pair, states: Option<&[Mat]>) -> Result<FieldTensor> {
    let mut g = Graph::inference();
    let out = model.forward(&mut g, p.input.values(), p.input.month(), states)?;
    let c = &model.config;
    let v = unpatchify(g.value(out.prediction), c.channels, c.n_lat, c.n_lon, c.patch)?;
    p.target.with_values(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionalArm {
    /// SAA with the distance-decay prior.
    Full,
    /// SAA with a truncated-normal prior.
    RandomPrior,
    /// Regional data only, no coupling.
    NoSaa,
}

impl RegionalArm {
    pub const ALL: [RegionalArm; 3] = [RegionalArm::Full, RegionalArm::RandomPrior, RegionalArm::NoSaa];

    pub fn name(self) -> &'static str {
        match self {
            RegionalArm::Full => "full",
            RegionalArm::RandomPrior => "random-prior",
            RegionalArm::NoSaa => "no-saa",
        }
    }
}

/// Regional model geometry: the global architecture on the regional grid.
pub fn regional_config(global: &ModelConfig, n_lat: usize, n_lon: usize, lr: f64) -> ModelConfig {
    let mut rc = global.clone();
    rc.n_lat = n_lat;
    rc.n_lon = n_lon;
    rc.optimizer.lr = lr;
    rc
}

/// Regional backbone: global weights fine-tuned on regional inputs alone.
pub fn pretrain_regional(global: &Forecaster, config: ModelConfig, data: &Dataset, steps: u64, seed: u64) -> Result<Trainer> {
    let mut m = Forecaster::new(config, seed)?;
    m.copy_backbone_from(global)?;
    let mut t = Trainer::new(m, seed);
    t.train(&data.without_global(), steps, |_| {})?;
    Ok(t)
}

/// Model for one arm, starting from the pretrained backbone. Coupled arms
/// freeze the backbone; the no-SAA arm keeps fine-tuning it.
pub fn regional_arm(base: &Forecaster, arm: RegionalArm, saa: SaaConfig, region: RegionSpec, global: &ModelConfig, seed: u64) -> Result<Forecaster> {
    let mut m = base.clone();
    let prior_init = match arm {
        RegionalArm::NoSaa => return Ok(m),
        RegionalArm::Full => PriorInit::Distance,
        RegionalArm::RandomPrior => PriorInit::Random,
    };
    m.attach_coupling(CouplingSpec { saa: SaaConfig { prior_init, ..saa }, region, global: global.clone() }, seed)?;
    m.freeze_backbone();
    Ok(m)
}

/// Training view of a regional dataset for an arm.
pub fn arm_data(arm: RegionalArm, data: &Dataset) -> Dataset {
    match arm {
        RegionalArm::NoSaa => data.without_global(),
        _ => data.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
    pub n: usize,
}

pub fn summarize(results: &[ArmResult]) -> Vec<ArmSummary> {
    let mut arms: Vec<&str> = Vec::new();
    for r in results {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    arms.into_iter()
        .map(|a| {
            let v: Vec<f64> = results.iter().filter(|r| r.arm == a).map(|r| r.val).collect();
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            ArmSummary { arm: a.to_string(), mean, std: var.sqrt(), n }
        })
        .collect()
}

/// Regional coupling study: one global model, one shared regional pretrain,
/// then every arm trained for the same number of steps per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaaStudy {
    pub synth: SynthConfig,
    pub train_len: usize,
    pub val_len: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub model: ModelConfig,
    pub global_steps: u64,
    pub pretrain_steps: u64,
    pub steps: u64,
    pub regional_lr: f64,
    pub saa: SaaConfig,
    pub seeds: u64,
}

impl Default for SaaStudy {
    fn default() -> Self {
        let synth = SynthConfig {
            global_lat: 16,
            global_lon: 32,
            regional_lat: 16,
            regional_lon: 32,
            region: RegionSpec { center_x: 6, center_y: 12, height: 4, width: 8 },
            remote: RegionSpec { center_x: 13, center_y: 24, height: 2, width: 4 },
            noise_scale: 4.0,
            beta: 1.0,
            local_coupling: 0.75,
            ..Default::default()
        };
        let mut model = ModelConfig { channels: 3, n_lat: 16, n_lon: 32, width: 32, blocks: 2, heads: 4, window: 4, batch_size: 4, ..Default::default() };
        model.tmoe.experts = 4;
        model.optimizer.lr = 1e-3;
        SaaStudy {
            synth,
            train_len: 96,
            val_len: 33,
            train_seed: 1,
            val_seed: 2,
            model,
            global_steps: 1000,
            pretrain_steps: 500,
            steps: 2000,
            regional_lr: 1e-3,
            saa: SaaConfig::default(),
            seeds: 3,
        }
    }
}

pub fn saa_study(study: &SaaStudy, mut log: impl FnMut(&str)) -> Result<Vec<ArmResult>> {
    let (g, r) = synth_generate(&SynthConfig { steps: study.train_len, ..study.synth.clone() }, study.train_seed)?;
    let (gv, rv) = synth_generate(&SynthConfig { steps: study.val_len, ..study.synth.clone() }, study.val_seed)?;
    let (gs, rs) = (compute_norm_stats(&g)?, compute_norm_stats(&r)?);
    let (g, gv) = (normalize_all(&g, &gs)?, normalize_all(&gv, &gs)?);
    let (r, rv) = (normalize_all(&r, &rs)?, normalize_all(&rv, &rs)?);

    let mut gt = Trainer::new(Forecaster::new(study.model.clone(), 0)?, 0);
    gt.train(&Dataset::global(Pair::from_sequence(&g))?, study.global_steps, |_| {})?;
    log(&format!("global model trained for {} steps", study.global_steps));
    let gm = &gt.model;
    let train = Dataset::regional(regional_pairs(&g, &r)?, gm)?;
    let val = Dataset::regional(regional_pairs(&gv, &rv)?, gm)?;

    let rc = regional_config(&study.model, study.synth.regional_lat, study.synth.regional_lon, study.regional_lr);
    let base = pretrain_regional(gm, rc, &train, study.pretrain_steps, 7)?.model;
    log(&format!("regional pretrain val rmse {:.4}", mean_rmse(&base, &val.without_global())?));

    let mut out = Vec::new();
    for arm in RegionalArm::ALL {
        for s in 0..study.seeds {
            let seed = 100 + s;
            let m = regional_arm(&base, arm, study.saa, study.synth.region, &study.model, seed)?;
            let mut t = Trainer::new(m, seed);
            t.train(&arm_data(arm, &train), study.steps, |_| {})?;
            let v = mean_rmse(&t.model, &arm_data(arm, &val))?;
            log(&format!("{} seed {s} val rmse {v:.4}", arm.name()));
            out.push(ArmResult { arm: arm.name().into(), seed: s, val: v });
        }
    }
    Ok(out)
}

/// Month-cyclic data: one sequence starting in each calendar month.
pub fn month_cyclic_sequences(synth: &SynthConfig, len: usize, seed: u64) -> Result<Vec<Vec<FieldTensor>>> {
    (1..=12u32)
        .map(|m| {
            let start = Utc.with_ymd_and_hms(2021, m, 10, 0, 0, 0).single().expect("valid date");
            Ok(synth_generate(&SynthConfig { start, steps: len, ..synth.clone() }, seed + m as u64)?.0)
        })
        .collect()
}

/// Routing study: the same architecture and budget with month-aware,
/// month-blind and dense feed-forward blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmoeStudy {
    pub synth: SynthConfig,
    pub train_len: usize,
    pub val_len: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub model: ModelConfig,
    pub steps: u64,
    pub seeds: u64,
}

impl Default for TmoeStudy {
    fn default() -> Self {
        let synth = SynthConfig {
            global_lat: 16,
            global_lon: 32,
            regional_lat: 16,
            regional_lon: 32,
            region: RegionSpec { center_x: 6, center_y: 12, height: 4, width: 8 },
            remote: RegionSpec { center_x: 13, center_y: 24, height: 2, width: 4 },
            noise_scale: 4.0,
            burn_in: 4,
            ..Default::default()
        };
        let mut model = ModelConfig { channels: 3, n_lat: 16, n_lon: 32, width: 32, blocks: 2, heads: 4, window: 4, batch_size: 4, ..Default::default() };
        model.tmoe.experts = 4;
        model.optimizer.lr = 1e-3;
        TmoeStudy { synth, train_len: 36, val_len: 12, train_seed: 10, val_seed: 100, model, steps: 1000, seeds: 3 }
    }
}

pub fn routing_arm_name(mode: RoutingMode) -> &'static str {
    match mode {
        RoutingMode::Temporal => "tmoe",
        RoutingMode::NoMonth => "moe-no-month",
        RoutingMode::Dense => "dense",
    }
}

pub fn tmoe_study(study: &TmoeStudy, mut log: impl FnMut(&str)) -> Result<Vec<ArmResult>> {
    let train = month_cyclic_sequences(&study.synth, study.train_len, study.train_seed)?;
    let val = month_cyclic_sequences(&study.synth, study.val_len, study.val_seed)?;
    let all: Vec<FieldTensor> = train.iter().flatten().cloned().collect();
    let stats = compute_norm_stats(&all)?;
    let pairs = |seqs: &[Vec<FieldTensor>]| -> Result<Vec<Pair>> {
        let mut out = Vec::new();
        for s in seqs {
            out.extend(Pair::from_sequence(&normalize_all(s, &stats)?));
        }
        Ok(out)
    };
    let (tdata, vdata) = (Dataset::global(pairs(&train)?)?, Dataset::global(pairs(&val)?)?);
    let mut out = Vec::new();
    for mode in [RoutingMode::Temporal, RoutingMode::NoMonth, RoutingMode::Dense] {
        for seed in 0..study.seeds {
            let mut mc = study.model.clone();
            mc.tmoe.mode = mode;
            let mut t = Trainer::new(Forecaster::new(mc, seed)?, seed);
            t.train(&tdata, study.steps, |_| {})?;
            let v = t.evaluate(&vdata)?.obj_final;
            log(&format!("{} seed {seed} val loss {v:.4}", routing_arm_name(mode)));
            out.push(ArmResult { arm: routing_arm_name(mode).into(), seed, val: v });
        }
    }
    Ok(out)
}
