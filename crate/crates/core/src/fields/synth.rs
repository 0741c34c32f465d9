//! Synthetic atmosphere used in place of reanalysis data.
//!
//! Each channel is a climatology plus an anomaly. Global anomalies are
//! advected zonally (periodic in longitude) with a month-dependent speed,
//! damped, and refreshed with smooth Perlin innovations. The regional grid
//! refines a box of the global grid and follows the same rule in its own cell
//! units, plus two couplings to the global state at the previous step:
//!
//! * a local term from the global anomaly over the region's box, and
//! * a teleconnection from a remote global patch, scaled by `beta`.
//!
//! Without the global fields neither coupling can be predicted from the
//! regional state alone.

use chrono::{DateTime, Datelike, Duration, TimeZone, Utc};
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{FieldTensor, GridSpec, RegionSpec};
use crate::ensemble::{perlin2d_stream, NoiseConfig};
use crate::error::{Error, Result};

const MODULE: &str = "fields";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub global_lat: usize,
    pub global_lon: usize,
    pub regional_lat: usize,
    pub regional_lon: usize,
    /// Box of the global grid covered by the regional grid (global cells).
    pub region: RegionSpec,
    /// Remote global patch that drives the teleconnection (global cells).
    pub remote: RegionSpec,
    pub variables: Vec<String>,
    /// Number of snapshots in each returned sequence.
    pub steps: usize,
    pub step_hours: i64,
    pub start: DateTime<Utc>,
    /// Teleconnection strength.
    pub beta: f64,
    /// Amplitude of the annual cycle of the first channel.
    pub annual_amplitude: f64,
    /// Month-dependent zonal advection (cells per step); off means no advection.
    pub seasonal_flow: bool,
    /// Damping factor applied to anomalies each step.
    pub persistence: f64,
    /// Peak amplitude of the per-step Perlin innovation.
    pub innovation: f64,
    /// Lattice period of the innovation noise in cells.
    pub noise_scale: f64,
    /// Weight of the global box anomaly in the regional update.
    pub local_coupling: f64,
    /// Steps simulated before the first recorded snapshot.
    pub burn_in: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            global_lat: 32,
            global_lon: 64,
            regional_lat: 32,
            regional_lon: 64,
            region: RegionSpec { center_x: 12, center_y: 24, height: 8, width: 16 },
            remote: RegionSpec { center_x: 26, center_y: 48, height: 4, width: 8 },
            variables: vec!["t2m".into(), "msl".into(), "z500".into()],
            steps: 64,
            step_hours: 6,
            start: Utc.with_ymd_and_hms(2020, 1, 15, 0, 0, 0).unwrap(),
            beta: 1.0,
            annual_amplitude: 2.0,
            seasonal_flow: true,
            persistence: 0.9,
            innovation: 1.0,
            noise_scale: 8.0,
            local_coupling: 0.5,
            burn_in: 16,
        }
    }
}

/// Zonal advection speed in cells per step for a calendar month.
pub fn seasonal_shift(month: u32) -> i64 {
    let phase = 2.0 * std::f64::consts::PI * (month as f64 - 1.0) / 12.0;
    (2.0 * phase.sin()).round() as i64
}

/// Annual-cycle offset of the first channel for a calendar month.
pub fn annual_cycle(month: u32, amplitude: f64) -> f64 {
    amplitude * (2.0 * std::f64::consts::PI * (month as f64 - 1.0) / 12.0).cos()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.global_lat, self.global_lon, self.regional_lat, self.regional_lon, self.steps];
        if dims.contains(&0) || self.variables.is_empty() {
            return Err(Error::invalid(MODULE, "synthetic dimensions must be positive"));
        }
        if self.step_hours <= 0 {
            return Err(Error::invalid(MODULE, "step_hours must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid(MODULE, "teleconnection strength beta must be >= 0"));
        }
        self.region.validate(self.global_lat, self.global_lon)?;
        self.remote.validate(self.global_lat, self.global_lon)?;
        Ok(())
    }

    pub fn global_grid(&self) -> Result<GridSpec> {
        GridSpec::global(self.global_lat, self.global_lon)
    }

    /// Regional grid spanning the region's box of the global grid.
    pub fn regional_grid(&self) -> Result<GridSpec> {
        let dlat = 180.0 / self.global_lat as f64;
        let dlon = 360.0 / self.global_lon as f64;
        let r0 = self.region.row_start() as f64;
        let c0 = self.region.col_start() as f64;
        let north = 90.0 - dlat * r0;
        let south = north - dlat * self.region.height as f64;
        let west = dlon * c0 - dlon / 2.0;
        let east = west + dlon * self.region.width as f64;
        GridSpec::regional(north, south, west.max(-180.0), east, self.regional_lat, self.regional_lon)
    }
}

fn climatology(vars: &[String], grid: &GridSpec, month: u32, annual: f64) -> Array3<f64> {
    let (h, w) = (grid.n_lat(), grid.n_lon());
    let mut out = Array3::zeros((vars.len(), h, w));
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        for (i, mut row) in plane.axis_iter_mut(Axis(0)).enumerate() {
            let lat = grid.lats()[i].to_radians();
            let v = match c {
                0 => annual_cycle(month, annual),
                1 => 0.5 * (2.0 * lat).cos(),
                _ => lat.cos(),
            };
            row.fill(v);
        }
    }
    let _ = w;
    out
}

fn shift_lon(a: &Array3<f64>, k: i64) -> Array3<f64> {
    let w = a.dim().2 as i64;
    let mut out = Array3::zeros(a.dim());
    for j in 0..w {
        let src = (j - k).rem_euclid(w) as usize;
        out.slice_mut(s![.., .., j as usize]).assign(&a.slice(s![.., .., src]));
    }
    out
}

fn innovation(cfg: &SynthConfig, seed: u64, h: usize, w: usize, step: u64, stream0: u64) -> Result<Array3<f64>> {
    let noise = NoiseConfig { amplitude: cfg.innovation, base_scale: cfg.noise_scale, octaves: 2, persistence: 0.5, seed };
    let mut out = Array3::zeros((cfg.variables.len(), h, w));
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        plane.assign(&perlin2d_stream(h, w, &noise, step, stream0 + c as u64)?);
    }
    Ok(out)
}

/// Smooth bump centred on the regional grid carrying the teleconnection signal.
fn teleconnection_pattern(h: usize, w: usize) -> Array2<f64> {
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (si, sj) = (h as f64 / 4.0, w as f64 / 4.0);
    Array2::from_shape_fn((h, w), |(i, j)| {
        (-((i as f64 - ci) / si).powi(2) / 2.0 - ((j as f64 - cj) / sj).powi(2) / 2.0).exp()
    })
}

/// Generates `(global, regional)` sequences of `cfg.steps` snapshots each.
/// The output is a pure function of `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(Vec<FieldTensor>, Vec<FieldTensor>)> {
    cfg.validate()?;
    let ggrid = cfg.global_grid()?;
    let rgrid = cfg.regional_grid()?;
    let (gh, gw) = (cfg.global_lat, cfg.global_lon);
    let (rh, rw) = (cfg.regional_lat, cfg.regional_lon);
    let c = cfg.variables.len();
    let pattern = teleconnection_pattern(rh, rw);
    let (br0, bc0) = (cfg.region.row_start() as usize, cfg.region.col_start() as usize);
    let (mr0, mc0) = (cfg.remote.row_start() as usize, cfg.remote.col_start() as usize);

    let mut ag = innovation(cfg, seed, gh, gw, u64::MAX, 0)?;
    let mut ar = innovation(cfg, seed, rh, rw, u64::MAX, 100)?;
    let total = cfg.burn_in + cfg.steps;
    let mut global = Vec::with_capacity(cfg.steps);
    let mut regional = Vec::with_capacity(cfg.steps);
    let step = Duration::hours(cfg.step_hours);
    let t0 = cfg.start - step * cfg.burn_in as i32;
    for k in 0..total {
        let now = t0 + step * k as i32;
        if k >= cfg.burn_in {
            let month = now.month();
            let xg = climatology(&cfg.variables, &ggrid, month, cfg.annual_amplitude) + &ag;
            let xr = climatology(&cfg.variables, &rgrid, month, cfg.annual_amplitude) + &ar;
            global.push(FieldTensor::new(xg, cfg.variables.clone(), ggrid.clone(), now)?);
            regional.push(FieldTensor::new(xr, cfg.variables.clone(), rgrid.clone(), now)?);
        }
        if k + 1 == total {
            break;
        }
        let shift = if cfg.seasonal_flow { seasonal_shift(now.month()) } else { 0 };

        // Regional update reads the global anomaly at the current step.
        let mut next_r = shift_lon(&ar, shift) * cfg.persistence;
        for ch in 0..c {
            let remote = ag
                .slice(s![ch, mr0..mr0 + cfg.remote.height, mc0..mc0 + cfg.remote.width])
                .mean()
                .unwrap_or(0.0);
            let mut plane = next_r.index_axis_mut(Axis(0), ch);
            plane.scaled_add(2.0 * cfg.beta * remote, &pattern);
            for i in 0..rh {
                let gi = br0 + i * cfg.region.height / rh;
                for j in 0..rw {
                    let gj = bc0 + j * cfg.region.width / rw;
                    plane[[i, j]] += cfg.local_coupling * ag[[ch, gi, gj]];
                }
            }
        }
        next_r += &innovation(cfg, seed, rh, rw, k as u64, 100)?;
        ar = next_r;

        ag = shift_lon(&ag, shift) * cfg.persistence + innovation(cfg, seed, gh, gw, k as u64, 0)?;
    }
    Ok((global, regional))
}

/// Gaussian pressure low of `depth` and width `sigma_cells` centred on each
/// fractional `(row, col)` grid position in turn, on a single `msl` channel.
/// Column distance wraps around the globe.
pub fn depression_sequence(grid: &GridSpec, centres: &[(f64, f64)], depth: f64, sigma_cells: f64, start: DateTime<Utc>, step_hours: i64) -> Result<Vec<FieldTensor>> {
    if !(sigma_cells > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(MODULE, "depression needs finite depth and positive width"));
    }
    let (h, w) = (grid.n_lat(), grid.n_lon());
    centres
        .iter()
        .enumerate()
        .map(|(k, &(ci, cj))| {
            let v = Array3::from_shape_fn((1, h, w), |(_, i, j)| {
                let dj = (j as f64 - cj).rem_euclid(w as f64);
                let dj = dj.min(w as f64 - dj);
                let d2 = (i as f64 - ci).powi(2) + dj * dj;
                -depth * (-d2 / (2.0 * sigma_cells * sigma_cells)).exp()
            });
            FieldTensor::new(v, vec!["msl".into()], grid.clone(), start + Duration::hours(step_hours * k as i64))
        })
        .collect()
}

/// `n` points on a circle of `radius` cells around `centre`, starting at
/// angle `phase` and advancing `step` radians per point.
pub fn circular_path(centre: (f64, f64), radius: f64, phase: f64, step: f64, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let a = phase + step * k as f64;
            (centre.0 + radius * a.sin(), centre.1 + radius * a.cos())
        })
        .collect()
}
