//! Grid files: raw little-endian `f32` payload, row-major `[C][lat][lon]`,
//! plus a JSON sidecar with the same basename.
//!
//! ```json
//! {"n_lat": 2, "n_lon": 3, "lats": [..], "lons": [..],
//!  "variables": ["t2m"], "timestamp": "2020-07-15T12:00:00Z", "month": 7}
//! ```
//!
//! Values are stored at 32-bit precision, so a round trip is bit-exact for
//! any field whose values are representable as `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, SecondsFormat, Utc};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{FieldTensor, GridSpec, NormStats};
use crate::error::{Error, Result};

const MODULE: &str = "fields";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    n_lat: usize,
    n_lon: usize,
    lats: Vec<f64>,
    lons: Vec<f64>,
    variables: Vec<String>,
    timestamp: String,
    month: u32,
}

/// Path of the JSON sidecar that accompanies a payload file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_field(field: &FieldTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let grid = field.grid();
    let sidecar = Sidecar {
        n_lat: grid.n_lat(),
        n_lon: grid.n_lon(),
        lats: grid.lats().to_vec(),
        lons: grid.lons().to_vec(),
        variables: field.variables().to_vec(),
        timestamp: field.timestamp().to_rfc3339_opts(SecondsFormat::Secs, true),
        month: field.month(),
    };
    let mut bytes = Vec::with_capacity(field.values().len() * 4);
    for &v in field.values().iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(MODULE, dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(MODULE, path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(MODULE, &side, e))?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<FieldTensor> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(MODULE, &side, e))?;
    let meta: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(MODULE, format!("{}: {e}", side.display())))?;
    if meta.lats.len() != meta.n_lat || meta.lons.len() != meta.n_lon {
        return Err(Error::format(MODULE, "sidecar n_lat/n_lon disagree with coordinate lists"));
    }
    let timestamp: DateTime<Utc> = DateTime::parse_from_rfc3339(&meta.timestamp)
        .map_err(|e| Error::format(MODULE, format!("bad timestamp {:?}: {e}", meta.timestamp)))?
        .with_timezone(&Utc);
    if timestamp.month() != meta.month {
        return Err(Error::Consistency {
            module: MODULE,
            message: format!("sidecar month {} disagrees with timestamp {}", meta.month, meta.timestamp),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(MODULE, path, e))?;
    let c = meta.variables.len();
    let expected = c * meta.n_lat * meta.n_lon * 4;
    if bytes.len() != expected {
        return Err(Error::shape(
            MODULE,
            format!("payload has {} bytes, header implies {expected} ({c}x{}x{} f32)", bytes.len(), meta.n_lat, meta.n_lon),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(MODULE, format!("{} contains NaN or infinity", path.display())));
    }
    let values = Array3::from_shape_vec((c, meta.n_lat, meta.n_lon), data).expect("length checked above");
    let grid = GridSpec::new(meta.lats, meta.lons)?;
    FieldTensor::new(values, meta.variables, grid, timestamp)
}

pub fn save_norm_stats(stats: &NormStats, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(stats).expect("stats serialize");
    fs::write(path, json).map_err(|e| Error::io(MODULE, path, e))
}

pub fn load_norm_stats(path: impl AsRef<Path>) -> Result<NormStats> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(MODULE, path, e))?;
    let stats: NormStats =
        serde_json::from_str(&text).map_err(|e| Error::format(MODULE, format!("{}: {e}", path.display())))?;
    if let Some((name, s)) = stats.vars.iter().find(|(_, s)| !(s.std > 0.0) || !s.mean.is_finite()) {
        return Err(Error::format(MODULE, format!("invalid statistics for {name}: {s:?}")));
    }
    Ok(stats)
}

/// Saves a sequence as `<dir>/<prefix>_<index:06>.f32` files.
pub fn save_sequence(fields: &[FieldTensor], dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fields
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("{prefix}_{i:06}.f32"));
            save_field(f, &p).map(|_| p)
        })
        .collect()
}

/// Loads every `*.f32` grid file in `dir` in lexicographic order.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<Vec<FieldTensor>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(MODULE, dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "f32"))
        .collect();
    paths.sort();
    paths.iter().map(load_field).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(seed: u64) -> FieldTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array3::from_shape_fn((2, 3, 5), |_| rng.random_range(-100.0f32..100.0) as f64);
        let ts = Utc.with_ymd_and_hms(2021, 7, 15, 6, 0, 0).unwrap();
        FieldTensor::new(values, vec!["t2m".into(), "msl".into()], GridSpec::global(3, 5).unwrap(), ts).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let f = field(1);
        save_field(&f, &p).unwrap();
        let g = load_field(&p).unwrap();
        assert_eq!(f.variables(), g.variables());
        assert_eq!(f.timestamp(), g.timestamp());
        assert_eq!(f.grid(), g.grid());
        for (a, b) in f.values().iter().zip(g.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_payload_is_a_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        save_field(&field(2), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_field(&p), Err(Error::Shape { .. })));
    }

    #[test]
    fn month_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        save_field(&field(3), &p).unwrap();
        let side = sidecar_path(&p);
        let text = fs::read_to_string(&side).unwrap().replace("\"month\": 7", "\"month\": 3");
        fs::write(&side, text).unwrap();
        assert!(matches!(load_field(&p), Err(Error::Consistency { .. })));
    }

    #[test]
    fn malformed_header_and_non_finite_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        save_field(&field(4), &p).unwrap();
        let side = sidecar_path(&p);
        let good = fs::read_to_string(&side).unwrap();
        fs::write(&side, "{\"n_lat\": 3").unwrap();
        assert!(matches!(load_field(&p), Err(Error::Format { .. })));
        fs::write(&side, good).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_field(&p), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn norm_stats_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.json");
        let stats = super::super::compute_norm_stats(&[field(5)]).unwrap();
        save_norm_stats(&stats, &p).unwrap();
        assert_eq!(load_norm_stats(&p).unwrap(), stats);
        let text = fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["t2m"]["mean"].is_number() && v["msl"]["std"].is_number());
    }
}
