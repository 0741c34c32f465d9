//! Latitude-weighted RMSE and ACC, great-circle distance and mean track error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{latitude_weights, FieldTensor, GridSpec};

const MODULE: &str = "metrics";

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

fn check(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>, grid: &GridSpec) -> Result<Vec<f64>> {
    if pred.dim() != truth.dim() || pred.dim() != (grid.n_lat(), grid.n_lon()) {
        return Err(Error::shape(
            MODULE,
            format!("prediction {:?}, truth {:?}, grid {}x{}", pred.dim(), truth.dim(), grid.n_lat(), grid.n_lon()),
        ));
    }
    latitude_weights(grid.lats())
}

/// `sqrt(Σ_i Σ_j L_i (X̂_ij − X_ij)² / (N_lat · N_lon))`.
pub fn rmse_weighted(pred: ArrayView2<f64>, truth: ArrayView2<f64>, grid: &GridSpec) -> Result<f64> {
    let l = check(&pred, &truth, grid)?;
    let mut s = 0.0;
    for ((p, t), w) in pred.axis_iter(Axis(0)).zip(truth.axis_iter(Axis(0))).zip(&l) {
        s += w * p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccMode {
    /// Anomaly correlation about a climatology.
    #[default]
    Centered,
    /// `sqrt(Σ L X̂ X / (Σ L X̂² · Σ L X²))` on raw values, kept for comparison
    /// with published scores. Not equal to 1 for a perfect forecast.
    Literal,
}

/// Latitude-weighted anomaly correlation. In centered mode `climatology`
/// defaults to the latitude-weighted mean of `truth`; literal mode ignores it.
pub fn acc_weighted(pred: ArrayView2<f64>, truth: ArrayView2<f64>, grid: &GridSpec, climatology: Option<ArrayView2<f64>>, mode: AccMode) -> Result<f64> {
    let l = check(&pred, &truth, grid)?;
    let (mut num, mut sp, mut st) = (0.0, 0.0, 0.0);
    match mode {
        AccMode::Centered => {
            if let Some(c) = &climatology {
                if c.dim() != truth.dim() {
                    return Err(Error::shape(MODULE, "climatology does not match the field shape"));
                }
            }
            let mean = {
                let (mut a, mut b) = (0.0, 0.0);
                for (row, w) in truth.axis_iter(Axis(0)).zip(&l) {
                    a += w * row.sum();
                    b += w * row.len() as f64;
                }
                a / b
            };
            for (i, w) in l.iter().enumerate() {
                for j in 0..truth.ncols() {
                    let c = climatology.as_ref().map_or(mean, |c| c[[i, j]]);
                    let (p, t) = (pred[[i, j]] - c, truth[[i, j]] - c);
                    num += w * p * t;
                    sp += w * p * p;
                    st += w * t * t;
                }
            }
            let den = (sp * st).sqrt();
            if !(den > 0.0) {
                return Err(Error::Undefined { module: MODULE, message: "ACC denominator is zero (constant anomaly field)".into() });
            }
            Ok(num / den)
        }
        AccMode::Literal => {
            for ((p, t), w) in pred.axis_iter(Axis(0)).zip(truth.axis_iter(Axis(0))).zip(&l) {
                for (a, b) in p.iter().zip(t) {
                    num += w * a * b;
                    sp += w * a * a;
                    st += w * b * b;
                }
            }
            let den = sp * st;
            if !(den > 0.0) {
                return Err(Error::Undefined { module: MODULE, message: "literal ACC denominator is zero".into() });
            }
            let r = num / den;
            if r < 0.0 {
                return Err(Error::Undefined { module: MODULE, message: format!("literal ACC radicand {r} is negative") });
            }
            Ok(r.sqrt())
        }
    }
}

/// Great-circle distance in km between `(lat, lon)` points given in degrees.
pub fn haversine(p1: (f64, f64), p2: (f64, f64)) -> Result<f64> {
    for (lat, lon) in [p1, p2] {
        if !(lat.abs() <= 90.0) || !lon.is_finite() {
            return Err(Error::invalid(MODULE, format!("invalid coordinate ({lat}, {lon})")));
        }
    }
    let (f1, f2) = (p1.0.to_radians(), p2.0.to_radians());
    let dphi = f2 - f1;
    let dlam = (p2.1 - p1.1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + f1.cos() * f2.cos() * (dlam / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * a.clamp(0.0, 1.0).sqrt().asin())
}

/// Mean great-circle distance between time-aligned `(lat, lon)` tracks.
pub fn mde(pred: &[(f64, f64)], obs: &[(f64, f64)]) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(Error::shape(MODULE, format!("track lengths differ: {} vs {}", pred.len(), obs.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid(MODULE, "tracks are empty"));
    }
    let mut s = 0.0;
    for (a, b) in pred.iter().zip(obs) {
        s += haversine(*a, *b)?;
    }
    Ok(s / pred.len() as f64)
}

/// RMSE and ACC per variable and lead time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    /// `variable → lead_hours → (rmse, acc)`.
    pub scores: BTreeMap<String, BTreeMap<i64, Score>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub rmse: f64,
    /// Absent when the correlation is undefined for this field.
    pub acc: Option<f64>,
}

impl SkillReport {
    /// Scores a forecast sequence against truth, lead `k` at `(k+1)·step_hours`.
    pub fn evaluate(pred: &[FieldTensor], truth: &[FieldTensor], step_hours: i64, mode: AccMode) -> Result<SkillReport> {
        if pred.len() != truth.len() {
            return Err(Error::shape(MODULE, format!("{} forecasts for {} truth states", pred.len(), truth.len())));
        }
        let mut report = SkillReport::default();
        for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
            if p.variables() != t.variables() || p.grid() != t.grid() {
                return Err(Error::shape(MODULE, "forecast and truth differ in variables or grid"));
            }
            let lead = (k as i64 + 1) * step_hours;
            for (c, name) in p.variables().iter().enumerate() {
                let pv = p.values().index_axis(Axis(0), c);
                let tv = t.values().index_axis(Axis(0), c);
                let rmse = rmse_weighted(pv, tv, p.grid())?;
                let acc = match acc_weighted(pv, tv, p.grid(), None, mode) {
                    Ok(a) => Some(a),
                    Err(Error::Undefined { .. }) => None,
                    Err(e) => return Err(e),
                };
                report.scores.entry(name.clone()).or_default().insert(lead, Score { rmse, acc });
            }
        }
        Ok(report)
    }

    /// `variable,lead_hours,rmse,acc` rows; undefined ACC is written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable,lead_hours,rmse,acc\n");
        for (var, leads) in &self.scores {
            for (lead, sc) in leads {
                s.push_str(&format!("{var},{lead},{},{}\n", sc.rmse, sc.acc.unwrap_or(f64::NAN)));
            }
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(MODULE, dir, e))?;
        let csv = dir.join("skill.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(MODULE, &csv, e))?;
        let json = dir.join("skill.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, text).map_err(|e| Error::io(MODULE, &json, e))
    }
}
