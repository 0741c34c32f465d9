//! Cyclone centre tracking by windowed minimum of mean sea-level pressure.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldTensor;

const MODULE: &str = "cyclone";

/// Variable name of the pressure channel.
pub const MSL: &str = "msl";

/// Default search radius around the previous centre, in degrees.
pub const DEFAULT_SEARCH_RADIUS_DEG: f64 = 4.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub time: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub msl: f64,
}

fn lon_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Grid cell with minimum MSL. With `prev`, only cells within
/// `search_radius_deg` of it (Euclidean in degrees, longitude wrapped) are
/// searched. Ties go to the first cell in row-major order.
pub fn detect_min_msl(field: &FieldTensor, prev: Option<(f64, f64)>, search_radius_deg: f64) -> Result<TrackPoint> {
    let c = field
        .variable_index(MSL)
        .ok_or_else(|| Error::invalid(MODULE, format!("field has no {MSL:?} channel (variables {:?})", field.variables())))?;
    if !(search_radius_deg >= 0.0) {
        return Err(Error::invalid(MODULE, "search radius must be >= 0"));
    }
    let plane = field.values().index_axis(Axis(0), c);
    let grid = field.grid();
    let mut best: Option<(usize, usize)> = None;
    for (i, &lat) in grid.lats().iter().enumerate() {
        for (j, &lon) in grid.lons().iter().enumerate() {
            if let Some((plat, plon)) = prev {
                let d = ((lat - plat).powi(2) + lon_gap(lon, plon).powi(2)).sqrt();
                if d > search_radius_deg {
                    continue;
                }
            }
            if best.is_none_or(|(bi, bj)| plane[[i, j]] < plane[[bi, bj]]) {
                best = Some((i, j));
            }
        }
    }
    let (i, j) = best.ok_or_else(|| Error::invalid(MODULE, format!("search window around {prev:?} contains no grid cell")))?;
    Ok(TrackPoint { time: field.timestamp(), lat: grid.lats()[i], lon: grid.lons()[j], msl: plane[[i, j]] })
}

/// Chains [`detect_min_msl`] over a 6-hourly sequence starting near `init`.
pub fn track(fields: &[FieldTensor], init: (f64, f64), search_radius_deg: f64) -> Result<Vec<TrackPoint>> {
    if fields.is_empty() {
        return Err(Error::invalid(MODULE, "no fields to track"));
    }
    for w in fields.windows(2) {
        if w[1].timestamp() - w[0].timestamp() != Duration::hours(6) {
            return Err(Error::Consistency {
                module: MODULE,
                message: format!("fields at {} and {} are not 6 hours apart", w[0].timestamp(), w[1].timestamp()),
            });
        }
    }
    let mut prev = init;
    let mut out = Vec::with_capacity(fields.len());
    for f in fields {
        let p = detect_min_msl(f, Some(prev), search_radius_deg)?;
        prev = (p.lat, p.lon);
        out.push(p);
    }
    Ok(out)
}

pub fn track_to_csv(points: &[TrackPoint]) -> String {
    let mut s = String::from("time,lat,lon,msl\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true), p.lat, p.lon, p.msl));
    }
    s
}

pub fn write_track(points: &[TrackPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, track_to_csv(points)).map_err(|e| Error::io(MODULE, path, e))
}

pub fn read_track(path: impl AsRef<Path>) -> Result<Vec<TrackPoint>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(MODULE, path, e))?;
    parse_track(&text)
}

pub fn parse_track(text: &str) -> Result<Vec<TrackPoint>> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("time,lat,lon,msl") => {}
        other => return Err(Error::format(MODULE, format!("expected header time,lat,lon,msl, got {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |m: String| Error::format(MODULE, format!("track row {}: {m}", n + 2));
            if cols.len() != 4 {
                return Err(bad(format!("{} columns", cols.len())));
            }
            let time = DateTime::parse_from_rfc3339(cols[0]).map_err(|e| bad(e.to_string()))?.with_timezone(&Utc);
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            Ok(TrackPoint { time, lat: num(cols[1])?, lon: num(cols[2])?, msl: num(cols[3])? })
        })
        .collect()
}

/// `(lat, lon)` pairs of a track.
pub fn positions(points: &[TrackPoint]) -> Vec<(f64, f64)> {
    points.iter().map(|p| (p.lat, p.lon)).collect()
}
