//! Grid data model: geometry, field snapshots, normalization and cropping.
//!
//! Grid files and the synthetic atmosphere live in the [`io`] and [`synth`]
//! submodules.

pub mod io;
pub mod synth;

use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, Utc};
use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MODULE: &str = "fields";

/// Variance floor used by [`compute_norm_stats`].
pub const STD_FLOOR: f64 = 1e-8;

/// Latitude/longitude geometry of a grid. Rows index latitude, columns longitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    lats: Vec<f64>,
    lons: Vec<f64>,
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

impl GridSpec {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>) -> Result<Self> {
        if lats.is_empty() || lons.is_empty() {
            return Err(Error::invalid(MODULE, "grid needs at least one latitude and one longitude"));
        }
        if let Some(bad) = lats.iter().find(|l| !(-90.0..=90.0).contains(*l)) {
            return Err(Error::invalid(MODULE, format!("latitude {bad} outside [-90, 90]")));
        }
        if let Some(bad) = lons.iter().find(|l| !(-180.0..360.0).contains(*l)) {
            return Err(Error::invalid(MODULE, format!("longitude {bad} outside [-180, 360)")));
        }
        if !strictly_monotone(&lats) || !strictly_monotone(&lons) {
            return Err(Error::invalid(MODULE, "latitudes and longitudes must be strictly monotone"));
        }
        Ok(GridSpec { lats, lons })
    }

    /// Cell-centred global grid, north to south, longitudes from 0°.
    pub fn global(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat == 0 || n_lon == 0 {
            return Err(Error::invalid(MODULE, "grid dimensions must be positive"));
        }
        let dlat = 180.0 / n_lat as f64;
        let dlon = 360.0 / n_lon as f64;
        let lats = (0..n_lat).map(|i| 90.0 - dlat * (i as f64 + 0.5)).collect();
        let lons = (0..n_lon).map(|j| dlon * j as f64).collect();
        GridSpec::new(lats, lons)
    }

    /// Cell-centred grid covering `[lat_south, lat_north] × [lon_west, lon_east]`,
    /// ordered north to south.
    pub fn regional(lat_north: f64, lat_south: f64, lon_west: f64, lon_east: f64, n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat == 0 || n_lon == 0 {
            return Err(Error::invalid(MODULE, "grid dimensions must be positive"));
        }
        let dlat = (lat_north - lat_south) / n_lat as f64;
        let dlon = (lon_east - lon_west) / n_lon as f64;
        let lats = (0..n_lat).map(|i| lat_north - dlat * (i as f64 + 0.5)).collect();
        let lons = (0..n_lon).map(|j| lon_west + dlon * (j as f64 + 0.5)).collect();
        GridSpec::new(lats, lons)
    }

    pub fn n_lat(&self) -> usize {
        self.lats.len()
    }

    pub fn n_lon(&self) -> usize {
        self.lons.len()
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    /// Mean absolute latitude spacing in degrees.
    pub fn lat_spacing(&self) -> f64 {
        if self.lats.len() < 2 {
            return 0.0;
        }
        (self.lats[self.lats.len() - 1] - self.lats[0]).abs() / (self.lats.len() - 1) as f64
    }

    pub fn lon_spacing(&self) -> f64 {
        if self.lons.len() < 2 {
            return 0.0;
        }
        (self.lons[self.lons.len() - 1] - self.lons[0]).abs() / (self.lons.len() - 1) as f64
    }

    /// Index of the row whose latitude is nearest to `lat`.
    pub fn nearest_row(&self, lat: f64) -> usize {
        nearest(&self.lats, lat)
    }

    pub fn nearest_col(&self, lon: f64) -> usize {
        nearest(&self.lons, lon)
    }
}

fn nearest(v: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, &c) in v.iter().enumerate() {
        if (c - x).abs() < (v[best] - x).abs() {
            best = i;
        }
    }
    best
}

/// Target region inside a grid: centre indices and extents, in grid cells.
///
/// `center_x`/`height` refer to rows, `center_y`/`width` to columns. The box
/// covers rows `center_x - height/2 .. center_x - height/2 + height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub center_x: usize,
    pub center_y: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionSpec {
    pub fn row_start(&self) -> isize {
        self.center_x as isize - (self.height / 2) as isize
    }

    pub fn col_start(&self) -> isize {
        self.center_y as isize - (self.width / 2) as isize
    }

    /// Checks that the box lies inside an `n_rows × n_cols` grid.
    pub fn validate(&self, n_rows: usize, n_cols: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid(MODULE, "region extents must be at least 1"));
        }
        let (r0, c0) = (self.row_start(), self.col_start());
        if r0 < 0 || c0 < 0 || r0 as usize + self.height > n_rows || c0 as usize + self.width > n_cols {
            return Err(Error::invalid(
                MODULE,
                format!("region {self:?} does not fit inside a {n_rows}x{n_cols} grid"),
            ));
        }
        Ok(())
    }

    /// The same region expressed on a grid coarsened by `factor` (e.g. a token grid).
    pub fn coarsen(&self, factor: usize) -> RegionSpec {
        RegionSpec {
            center_x: self.center_x / factor,
            center_y: self.center_y / factor,
            height: (self.height / factor).max(1),
            width: (self.width / factor).max(1),
        }
    }
}

/// A `[channels × lat × lon]` snapshot with its geometry and valid time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTensor {
    values: Array3<f64>,
    variables: Vec<String>,
    grid: GridSpec,
    timestamp: DateTime<Utc>,
}

impl FieldTensor {
    pub fn new(values: Array3<f64>, variables: Vec<String>, grid: GridSpec, timestamp: DateTime<Utc>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != variables.len() {
            return Err(Error::shape(MODULE, format!("{c} channels but {} variable names", variables.len())));
        }
        if h != grid.n_lat() || w != grid.n_lon() {
            return Err(Error::shape(
                MODULE,
                format!("values are {h}x{w} but grid is {}x{}", grid.n_lat(), grid.n_lon()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(MODULE, "field contains NaN or infinity"));
        }
        Ok(FieldTensor { values, variables, grid, timestamp })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn timestamp(&self) -> DateTime<Utc> {
        self.timestamp
    }

    /// Calendar month 1..=12 of the timestamp (UTC).
    pub fn month(&self) -> u32 {
        self.timestamp.month()
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Array3<f64>) -> Result<Self> {
        FieldTensor::new(values, self.variables.clone(), self.grid.clone(), self.timestamp)
    }

    pub fn with_timestamp(mut self, timestamp: DateTime<Utc>) -> Self {
        self.timestamp = timestamp;
        self
    }
}

/// Latitude weights `L_i = N_lat · cos φ_i / Σ_j cos φ_j`.
pub fn latitude_weights(lats: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = lats.iter().find(|l| l.abs() > 90.0 || !l.is_finite()) {
        return Err(Error::invalid(MODULE, format!("latitude {bad} outside [-90, 90]")));
    }
    let cos: Vec<f64> = lats.iter().map(|l| l.to_radians().cos().max(0.0)).collect();
    let total: f64 = cos.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid(MODULE, "latitude weights are undefined when every row is a pole"));
    }
    let n = lats.len() as f64;
    Ok(cos.iter().map(|c| n * c / total).collect())
}

pub fn compute_latitude_weights(grid: &GridSpec) -> Result<Vec<f64>> {
    latitude_weights(grid.lats())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-variable mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats {
    pub vars: BTreeMap<String, VarStats>,
}

impl NormStats {
    pub fn get(&self, var: &str) -> Option<VarStats> {
        self.vars.get(var).copied()
    }
}

/// Mean and (population) standard deviation per variable over every sample
/// and grid point, accumulated in one streaming pass.
pub fn compute_norm_stats(dataset: &[FieldTensor]) -> Result<NormStats> {
    let first = dataset.first().ok_or_else(|| Error::invalid(MODULE, "empty dataset"))?;
    let vars = first.variables().to_vec();
    let c = vars.len();
    let mut count = vec![0u64; c];
    let mut mean = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    for f in dataset {
        if f.variables() != vars.as_slice() {
            return Err(Error::invalid(MODULE, "samples disagree on their variable lists"));
        }
        for (ch, plane) in f.values().axis_iter(Axis(0)).enumerate() {
            for &x in plane.iter() {
                count[ch] += 1;
                let delta = x - mean[ch];
                mean[ch] += delta / count[ch] as f64;
                m2[ch] += delta * (x - mean[ch]);
            }
        }
    }
    let vars = vars
        .into_iter()
        .enumerate()
        .map(|(ch, name)| {
            let std = (m2[ch] / count[ch] as f64).sqrt().max(STD_FLOOR);
            (name, VarStats { mean: mean[ch], std })
        })
        .collect();
    Ok(NormStats { vars })
}

fn channel_stats(field: &FieldTensor, stats: &NormStats) -> Result<Vec<VarStats>> {
    field
        .variables()
        .iter()
        .map(|v| stats.get(v).ok_or_else(|| Error::invalid(MODULE, format!("no statistics for variable {v}"))))
        .collect()
}

/// `(x − mean) / std` per variable.
pub fn normalize(field: &FieldTensor, stats: &NormStats) -> Result<FieldTensor> {
    let per = channel_stats(field, stats)?;
    let mut values = field.values().clone();
    for (mut plane, s) in values.axis_iter_mut(Axis(0)).zip(&per) {
        plane.mapv_inplace(|x| (x - s.mean) / s.std);
    }
    field.with_values(values)
}

/// `x · std + mean` per variable.
pub fn denormalize(field: &FieldTensor, stats: &NormStats) -> Result<FieldTensor> {
    let per = channel_stats(field, stats)?;
    let mut values = field.values().clone();
    for (mut plane, s) in values.axis_iter_mut(Axis(0)).zip(&per) {
        plane.mapv_inplace(|x| x * s.std + s.mean);
    }
    field.with_values(values)
}

/// Copies the region's box out of `global`, including the matching geometry.
pub fn crop_region(global: &FieldTensor, region: &RegionSpec) -> Result<FieldTensor> {
    let grid = global.grid();
    region.validate(grid.n_lat(), grid.n_lon())?;
    let (r0, c0) = (region.row_start() as usize, region.col_start() as usize);
    let (r1, c1) = (r0 + region.height, c0 + region.width);
    let values = global.values().slice(s![.., r0..r1, c0..c1]).to_owned();
    let sub = GridSpec::new(grid.lats()[r0..r1].to_vec(), grid.lons()[c0..c1].to_vec())?;
    FieldTensor::new(values, global.variables().to_vec(), sub, global.timestamp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 7, 15, 12, 0, 0).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FieldTensor {
        let values = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-3.0..3.0));
        let vars = (0..c).map(|i| format!("v{i}")).collect();
        FieldTensor::new(values, vars, GridSpec::global(h, w).unwrap(), ts()).unwrap()
    }

    #[test]
    fn latitude_weights_closed_form() {
        let w = latitude_weights(&[-45.0, 0.0, 45.0]).unwrap();
        let expect = [0.878_679_656_440_357_6, 1.242_640_687_119_285_2, 0.878_679_656_440_357_6];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(latitude_weights(&[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn latitude_weights_sum_to_row_count() {
        let grid = GridSpec::global(32, 64).unwrap();
        let s: f64 = compute_latitude_weights(&grid).unwrap().iter().sum();
        assert!((s - 32.0).abs() < 1e-10 * 32.0);
    }

    #[test]
    fn latitude_weights_reject_out_of_range() {
        assert!(latitude_weights(&[0.0, 91.0]).is_err());
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::new(vec![0.0, 0.0], vec![0.0]).is_err());
        assert!(GridSpec::new(vec![10.0], vec![360.0]).is_err());
        assert!(GridSpec::new(vec![10.0, 5.0], vec![-10.0, 0.0, 10.0]).is_ok());
    }

    #[test]
    fn norm_stats_constant_field_floors_std() {
        let grid = GridSpec::global(2, 2).unwrap();
        let f = FieldTensor::new(Array3::from_elem((1, 2, 2), 4.5), vec!["a".into()], grid, ts()).unwrap();
        let s = compute_norm_stats(&[f]).unwrap().get("a").unwrap();
        assert_eq!(s.mean, 4.5);
        assert_eq!(s.std, STD_FLOOR);
    }

    #[test]
    fn norm_stats_two_samples() {
        let grid = GridSpec::global(2, 3).unwrap();
        let a = FieldTensor::new(Array3::zeros((2, 2, 3)), vec!["a".into(), "b".into()], grid.clone(), ts()).unwrap();
        let b = a.with_values(Array3::from_elem((2, 2, 3), 2.0)).unwrap();
        let s = compute_norm_stats(&[a, b]).unwrap();
        assert_eq!(s.get("a").unwrap().mean, 1.0);
        assert_eq!(s.get("b").unwrap().mean, 1.0);
    }

    #[test]
    fn norm_stats_match_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<_> = (0..3).map(|_| random_field(&mut rng, 2, 4, 5)).collect();
        let stats = compute_norm_stats(&data).unwrap();
        for ch in 0..2 {
            let xs: Vec<f64> = data.iter().flat_map(|f| f.values().index_axis(Axis(0), ch).iter().copied().collect::<Vec<_>>()).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            let s = stats.get(&format!("v{ch}")).unwrap();
            assert!((s.mean - mean).abs() < 1e-12);
            assert!((s.std - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_stats_errors() {
        assert!(compute_norm_stats(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_field(&mut rng, 2, 2, 2);
        let b = random_field(&mut rng, 3, 2, 2);
        assert!(compute_norm_stats(&[a, b]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let grid = GridSpec::global(1, 2).unwrap();
        let f = FieldTensor::new(Array3::from_elem((1, 1, 2), 9.0), vec!["t".into()], grid, ts()).unwrap();
        let mut vars = BTreeMap::new();
        vars.insert("t".to_string(), VarStats { mean: 5.0, std: 2.0 });
        let stats = NormStats { vars };
        let n = normalize(&f, &stats).unwrap();
        assert!(n.values().iter().all(|&v| v == 2.0));
        let at_mean = f.with_values(Array3::from_elem((1, 1, 2), 5.0)).unwrap();
        assert!(normalize(&at_mean, &stats).unwrap().values().iter().all(|&v| v == 0.0));
        let other = FieldTensor::new(Array3::zeros((1, 1, 2)), vec!["q".into()], f.grid().clone(), ts()).unwrap();
        assert!(normalize(&other, &stats).is_err());
    }

    #[test]
    fn crop_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_field(&mut rng, 2, 8, 12);
        let whole = RegionSpec { center_x: 4, center_y: 6, height: 8, width: 12 };
        assert_eq!(crop_region(&f, &whole).unwrap(), f);
        let one = RegionSpec { center_x: 3, center_y: 7, height: 1, width: 1 };
        let c = crop_region(&f, &one).unwrap();
        for ch in 0..2 {
            assert_eq!(c.values()[[ch, 0, 0]], f.values()[[ch, 3, 7]]);
        }
        let r = RegionSpec { center_x: 4, center_y: 5, height: 4, width: 6 };
        let c = crop_region(&f, &r).unwrap();
        assert_eq!(c.values().dim(), (2, 4, 6));
        for ch in 0..2 {
            for i in 0..4 {
                for j in 0..6 {
                    assert_eq!(c.values()[[ch, i, j]], f.values()[[ch, 2 + i, 2 + j]]);
                }
            }
        }
        let out = RegionSpec { center_x: 7, center_y: 5, height: 4, width: 6 };
        assert!(crop_region(&f, &out).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_round_trip(seed in 0u64..1000, mean in -50.0f64..50.0, std in 0.01f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, 1, 3, 4);
            let mut vars = BTreeMap::new();
            vars.insert("v0".to_string(), VarStats { mean, std });
            let stats = NormStats { vars };
            let back = denormalize(&normalize(&f, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.values().iter().zip(f.values().iter()) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
