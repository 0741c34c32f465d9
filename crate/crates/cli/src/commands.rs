//! One function per subcommand. Each returns a JSON summary of what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stcast::cyclone::{detect_min_msl, track, write_track, TrackPoint};
use stcast::ensemble::ensemble_forecast;
use stcast::fields::io::{load_norm_stats, load_field, load_sequence, save_norm_stats, save_sequence};
use stcast::fields::synth::{depression_sequence, synth_generate, SynthConfig};
use stcast::fields::{compute_norm_stats, denormalize, normalize, FieldTensor, NormStats};
use stcast::metrics::{AccMode, SkillReport};
use stcast::model::{load_checkpoint, save_checkpoint, write_loss_csv, Dataset, Forecaster, Pair, Trainer, STEP_HOURS};
use stcast::{Error, Result};

use crate::config::{ExperimentConfig, Study};
use crate::experiments::{
    arm_data, mean_rmse, normalize_all, pretrain_regional, regional_config, regional_pairs, saa_study, summarize,
    tmoe_study, ArmResult, RegionalArm,
};

const MODULE: &str = "cli";

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(MODULE, p, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).expect("json value")).map_err(|e| Error::io(MODULE, path, e))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Normalization written next to a global checkpoint by `train-global`.
fn stats_beside(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("global_stats.json")
}

/// Training and validation sequences in physical units.
pub struct Sequences {
    pub global: Vec<FieldTensor>,
    pub regional: Vec<FieldTensor>,
    pub val_global: Vec<FieldTensor>,
    pub val_regional: Vec<FieldTensor>,
}

type SeqPair = (Vec<FieldTensor>, Vec<FieldTensor>);

/// Synthetic `(train, val)` global/regional sequences.
fn synthetic(cfg: &ExperimentConfig) -> Result<(SeqPair, SeqPair)> {
    let d = &cfg.data;
    let train = synth_generate(&cfg.synth, d.train_seed)?;
    let val = synth_generate(&SynthConfig { steps: d.val_steps, ..cfg.synth.clone() }, d.val_seed)?;
    Ok((train, val))
}

/// Reads each configured directory; anything unset comes from `[synth]`.
pub fn sequences(cfg: &ExperimentConfig) -> Result<Sequences> {
    let d = &cfg.data;
    let all_set = [&d.global_dir, &d.regional_dir, &d.val_global_dir, &d.val_regional_dir].iter().all(|p| p.is_some());
    let (train, val) = if all_set { (None, None) } else { synthetic(cfg).map(|(t, v)| (Some(t), Some(v)))? };
    let pick = |dir: &Option<PathBuf>, fallback: Option<&Vec<FieldTensor>>| -> Result<Vec<FieldTensor>> {
        match dir {
            Some(p) => load_sequence(p),
            None => Ok(fallback.expect("synthetic data generated").clone()),
        }
    };
    Ok(Sequences {
        global: pick(&d.global_dir, train.as_ref().map(|t| &t.0))?,
        regional: pick(&d.regional_dir, train.as_ref().map(|t| &t.1))?,
        val_global: pick(&d.val_global_dir, val.as_ref().map(|t| &t.0))?,
        val_regional: pick(&d.val_regional_dir, val.as_ref().map(|t| &t.1))?,
    })
}

pub fn synth(cfg: &ExperimentConfig) -> Result<Value> {
    let root = cfg.out.join("synth");
    let ((g, r), (gv, rv)) = synthetic(cfg)?;
    for (name, seq) in [("global", &g), ("regional", &r), ("val_global", &gv), ("val_regional", &rv)] {
        let dir = root.join(name);
        mkdir(&dir)?;
        save_sequence(seq, &dir, name)?;
    }

    // Planted depression moving one cell per step along the diagonal.
    let c = &cfg.cyclone;
    let grid = cfg.synth.global_grid()?;
    let centres: Vec<(f64, f64)> = (0..c.fixture_steps).map(|k| ((c.fixture_row + k) as f64, (c.fixture_col + k) as f64)).collect();
    if centres.last().is_some_and(|p| p.0 as usize >= grid.n_lat()) {
        return Err(Error::invalid(MODULE, "cyclone fixture runs off the southern edge of the grid"));
    }
    let fixture = depression_sequence(&grid, &centres, c.fixture_depth, c.fixture_sigma, cfg.synth.start, STEP_HOURS)?;
    let cdir = root.join("cyclone");
    mkdir(&cdir)?;
    save_sequence(&fixture, &cdir, "msl")?;
    let truth: Vec<TrackPoint> = fixture
        .iter()
        .zip(&centres)
        .map(|(f, &(i, j))| TrackPoint {
            time: f.timestamp(),
            lat: grid.lats()[i as usize],
            lon: grid.lons()[j as usize % grid.n_lon()],
            msl: -c.fixture_depth,
        })
        .collect();
    let track_path = root.join("cyclone_track.csv");
    write_track(&truth, &track_path)?;
    Ok(json!({
        "command": "synth",
        "dir": display(&root),
        "train_steps": g.len(),
        "val_steps": gv.len(),
        "cyclone_fixture": display(&cdir),
        "cyclone_track": display(&track_path),
    }))
}

pub fn train_global(cfg: &ExperimentConfig) -> Result<Value> {
    mkdir(&cfg.out)?;
    let s = sequences(cfg)?;
    let stats = compute_norm_stats(&s.global)?;
    save_norm_stats(&stats, cfg.out.join("global_stats.json"))?;
    let train = Dataset::global(Pair::from_sequence(&normalize_all(&s.global, &stats)?))?;
    let val = Dataset::global(Pair::from_sequence(&normalize_all(&s.val_global, &stats)?))?;
    let mut t = Trainer::new(Forecaster::new(cfg.model.clone(), cfg.seed)?, cfg.seed);
    let records = t.train(&train, cfg.train.steps, |_| {})?;
    let ckpt = cfg.out.join("global.ckpt");
    save_checkpoint(&t, &ckpt)?;
    let loss = cfg.out.join("global_loss.csv");
    write_loss_csv(&loss, &records)?;
    let v = t.evaluate(&val)?;
    Ok(json!({
        "command": "train-global",
        "checkpoint": display(&ckpt),
        "loss_csv": display(&loss),
        "steps": cfg.train.steps,
        "params": t.model.param_count(),
        "val_loss": v.obj_final,
        "val_rmse": mean_rmse(&t.model, &val)?,
    }))
}

pub fn train_regional(cfg: &ExperimentConfig) -> Result<Value> {
    mkdir(&cfg.out)?;
    let gpath = cfg.global_checkpoint();
    let global = load_checkpoint(&gpath)?.model;
    if global.is_coupled() {
        return Err(Error::invalid(MODULE, format!("{} is a regional checkpoint", gpath.display())));
    }
    let s = sequences(cfg)?;
    let gstats = load_norm_stats(stats_beside(&gpath))?;
    let rstats = compute_norm_stats(&s.regional)?;
    save_norm_stats(&rstats, cfg.out.join("regional_stats.json"))?;
    let g = normalize_all(&s.global, &gstats)?;
    let gv = normalize_all(&s.val_global, &gstats)?;
    let r = normalize_all(&s.regional, &rstats)?;
    let rv = normalize_all(&s.val_regional, &rstats)?;
    if let Some(f) = r.first() {
        let (_, h, w) = f.values().dim();
        if global.config.channels != f.channels() || (global.config.n_lat, global.config.n_lon) != (h, w) {
            return Err(Error::shape(
                MODULE,
                format!("regional data is {}x{h}x{w}, global checkpoint expects {}x{}x{}", f.channels(), global.config.channels, global.config.n_lat, global.config.n_lon),
            ));
        }
    }
    let train = Dataset::regional(regional_pairs(&g, &r)?, &global)?;
    let val = Dataset::regional(regional_pairs(&gv, &rv)?, &global)?;
    let rc = regional_config(&global.config, global.config.n_lat, global.config.n_lon, cfg.regional.lr);
    let base = pretrain_regional(&global, rc, &train, cfg.regional.pretrain_steps, cfg.seed)?.model;

    let mut m = base.clone();
    let arm = if cfg.regional.no_saa {
        RegionalArm::NoSaa
    } else {
        let spec = stcast::model::CouplingSpec { saa: cfg.saa, region: cfg.synth.region, global: global.config.clone() };
        m.attach_coupling(spec, cfg.seed)?;
        m.freeze_backbone();
        RegionalArm::Full
    };
    let frozen = |m: &Forecaster| m.store.digest(|n| !n.starts_with("saa."));
    let before = frozen(&m);
    let mut t = Trainer::new(m, cfg.seed);
    let data = arm_data(arm, &train);
    let records = t.train(&data, cfg.regional.steps, |_| {})?;
    let after = frozen(&t.model);
    let ckpt = cfg.out.join("regional.ckpt");
    save_checkpoint(&t, &ckpt)?;
    let loss = cfg.out.join("regional_loss.csv");
    write_loss_csv(&loss, &records)?;
    Ok(json!({
        "command": "train-regional",
        "checkpoint": display(&ckpt),
        "loss_csv": display(&loss),
        "coupled": t.model.is_coupled(),
        "prior_init": t.model.prior_init(),
        "steps": cfg.regional.steps,
        "frozen_digest_before": format!("{before:016x}"),
        "frozen_digest_after": format!("{after:016x}"),
        "val_rmse": mean_rmse(&t.model, &arm_data(arm, &val))?,
        "pretrained_val_rmse": mean_rmse(&base, &val.without_global())?,
    }))
}

/// Uncoupled model, its normalization and the normalized initial state.
fn rollout_inputs(cfg: &ExperimentConfig) -> Result<(Forecaster, NormStats, FieldTensor)> {
    let path = cfg.forecast.checkpoint.clone().unwrap_or_else(|| cfg.out.join("global.ckpt"));
    let model = load_checkpoint(&path)?.model;
    if model.is_coupled() {
        return Err(Error::invalid(MODULE, "forecast and ensemble roll out a global checkpoint"));
    }
    let stats = load_norm_stats(stats_beside(&path))?;
    let init = match &cfg.forecast.init {
        Some(p) => load_field(p)?,
        None => sequences(cfg)?.val_global.into_iter().next().ok_or_else(|| Error::invalid(MODULE, "empty validation data"))?,
    };
    Ok((model, stats.clone(), normalize(&init, &stats)?))
}

fn denormalize_all(seq: &[FieldTensor], stats: &NormStats) -> Result<Vec<FieldTensor>> {
    seq.iter().map(|f| denormalize(f, stats)).collect()
}

pub fn forecast(cfg: &ExperimentConfig) -> Result<Value> {
    let (model, stats, x0) = rollout_inputs(cfg)?;
    let out = denormalize_all(&model.rollout(&x0, cfg.forecast.steps)?, &stats)?;
    let dir = cfg.out.join("forecast");
    mkdir(&dir)?;
    save_sequence(&out, &dir, "f")?;
    Ok(json!({ "command": "forecast", "dir": display(&dir), "steps": out.len(), "init_time": x0.timestamp().to_rfc3339() }))
}

pub fn ensemble(cfg: &ExperimentConfig) -> Result<Value> {
    let (model, stats, x0) = rollout_inputs(cfg)?;
    let e = &cfg.ensemble;
    let out = ensemble_forecast(&x0, &model, e.members, cfg.forecast.steps, &e.noise)?;
    let dir = cfg.out.join("ensemble");
    let mean_dir = dir.join("mean");
    mkdir(&mean_dir)?;
    save_sequence(&denormalize_all(&out.mean, &stats)?, &mean_dir, "f")?;
    if e.save_members {
        for (i, m) in out.members.iter().enumerate() {
            let d = dir.join(format!("member_{i:03}"));
            mkdir(&d)?;
            save_sequence(&denormalize_all(m, &stats)?, &d, "f")?;
        }
    }
    let spread = dir.join("spread.csv");
    out.write_spread_csv(&spread)?;
    Ok(json!({
        "command": "ensemble",
        "mean": display(&mean_dir),
        "members": e.members,
        "spread_csv": display(&spread),
        "amplitude": e.noise.amplitude,
    }))
}

pub fn track_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let input = cfg.cyclone.input.clone().unwrap_or_else(|| cfg.out.join("forecast"));
    let seq = load_sequence(&input)?;
    let first = seq.first().ok_or_else(|| Error::invalid(MODULE, format!("no grid files in {}", input.display())))?;
    let init = match (cfg.cyclone.init_lat, cfg.cyclone.init_lon) {
        (Some(lat), Some(lon)) => (lat, lon),
        _ => {
            let p = detect_min_msl(first, None, 0.0)?;
            (p.lat, p.lon)
        }
    };
    let points = track(&seq, init, cfg.cyclone.search_radius_deg)?;
    mkdir(&cfg.out)?;
    let path = cfg.out.join("track.csv");
    write_track(&points, &path)?;
    Ok(json!({ "command": "track", "track_csv": display(&path), "points": points.len() }))
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<Value> {
    let pred_dir = cfg.evaluate.pred.clone().unwrap_or_else(|| cfg.out.join("forecast"));
    let pred = load_sequence(&pred_dir)?;
    let pool = match &cfg.evaluate.truth {
        Some(p) => load_sequence(p)?,
        None => sequences(cfg)?.val_global,
    };
    let truth = pred
        .iter()
        .map(|p| {
            pool.iter().find(|t| t.timestamp() == p.timestamp()).cloned().ok_or_else(|| Error::Consistency {
                module: MODULE,
                message: format!("no verifying state at {}", p.timestamp()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = if cfg.evaluate.literal_acc { AccMode::Literal } else { AccMode::Centered };
    let report = SkillReport::evaluate(&pred, &truth, STEP_HOURS, mode)?;
    let dir = cfg.out.join("evaluate");
    report.write(&dir)?;
    let mut summary = json!({
        "command": "evaluate",
        "skill_csv": display(&dir.join("skill.csv")),
        "skill_json": display(&dir.join("skill.json")),
        "acc_mode": if cfg.evaluate.literal_acc { "literal" } else { "centered" },
    });
    let ckpt = cfg.out.join("global.ckpt");
    if cfg.evaluate.routing && ckpt.exists() {
        let model = load_checkpoint(&ckpt)?.model;
        let stats = load_norm_stats(stats_beside(&ckpt))?;
        let inputs = normalize_all(&truth, &stats)?;
        let routing = model.routing_stats(&inputs)?;
        let path = dir.join("routing.json");
        write_json(&path, &serde_json::to_value(&routing).expect("routing stats serialize"))?;
        summary["routing_json"] = json!(display(&path));
    }
    Ok(summary)
}

pub fn ablate(cfg: &ExperimentConfig, log: impl FnMut(&str)) -> Result<Value> {
    mkdir(&cfg.out)?;
    let results: Vec<ArmResult> = match cfg.ablate.study {
        Study::Saa => saa_study(&cfg.ablate.saa, log)?,
        Study::Tmoe => tmoe_study(&cfg.ablate.tmoe, log)?,
    };
    let csv = cfg.out.join("ablation.csv");
    let mut text = String::from("arm,seed,val\n");
    for r in &results {
        text.push_str(&format!("{},{},{}\n", r.arm, r.seed, r.val));
    }
    fs::write(&csv, text).map_err(|e| Error::io(MODULE, &csv, e))?;
    let summary = summarize(&results);
    let path = cfg.out.join("ablation_summary.json");
    write_json(&path, &serde_json::to_value(&summary).expect("summary serializes"))?;
    Ok(json!({ "command": "ablate", "csv": display(&csv), "summary": summary }))
}
