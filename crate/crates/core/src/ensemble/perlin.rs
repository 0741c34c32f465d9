//! Gradient-lattice Perlin noise, periodic in longitude.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Peak absolute value of the generated field, in normalized units.
    pub amplitude: f64,
    /// Grid cells per lattice period at the first octave.
    pub base_scale: f64,
    pub octaves: u32,
    pub persistence: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { amplitude: 0.05, base_scale: 16.0, octaves: 3, persistence: 0.5, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::invalid("ensemble", "noise amplitude must be a finite value >= 0"));
        }
        if self.octaves < 1 {
            return Err(Error::invalid("ensemble", "noise needs at least one octave"));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::invalid("ensemble", "persistence must lie in (0, 1]"));
        }
        if !(self.base_scale > 0.0) {
            return Err(Error::invalid("ensemble", "base_scale must be positive"));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// One octave of lattice gradients. `period_x` lattice cells span the full
/// longitude circle, so the lattice wraps exactly.
#[derive(Debug, Clone, Copy)]
pub struct Lattice {
    key: u64,
    period_x: i64,
}

impl Lattice {
    pub fn new(key: u64, period_x: usize) -> Self {
        Lattice { key, period_x: period_x.max(1) as i64 }
    }

    fn gradient(&self, ix: i64, iy: i64) -> (f64, f64) {
        let ix = ix.rem_euclid(self.period_x);
        let h = splitmix(self.key ^ splitmix((ix as u64).wrapping_mul(0x1_0000_0001) ^ (iy as u64).rotate_left(32)));
        let angle = (h >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
        (angle.cos(), angle.sin())
    }

    /// Noise at lattice coordinates (`x` along longitude, `y` along latitude).
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let dot = |gx: i64, gy: i64, dx: f64, dy: f64| {
            let (a, b) = self.gradient(gx, gy);
            a * dx + b * dy
        };
        let n00 = dot(ix, iy, fx, fy);
        let n10 = dot(ix + 1, iy, fx - 1.0, fy);
        let n01 = dot(ix, iy + 1, fx, fy - 1.0);
        let n11 = dot(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
        let (u, v) = (fade(fx), fade(fy));
        let a = n00 + u * (n10 - n00);
        let b = n01 + u * (n11 - n01);
        a + v * (b - a)
    }
}

fn octave_key(config: &NoiseConfig, member: u64, stream: u64, octave: u32) -> u64 {
    splitmix(splitmix(splitmix(config.seed) ^ member.wrapping_mul(0xa076_1d64_78bd_642f)) ^ stream.wrapping_mul(0xe703_7ed1_a0b4_28db) ^ octave as u64)
}

/// Multi-octave noise for one `(member, stream)` pair. Streams give
/// independent fields for the same member (e.g. one per channel).
pub fn perlin2d_stream(n_lat: usize, n_lon: usize, config: &NoiseConfig, member: u64, stream: u64) -> Result<Array2<f64>> {
    if n_lat == 0 || n_lon == 0 {
        return Err(Error::invalid("ensemble", "noise dimensions must be positive"));
    }
    config.validate()?;
    let mut out = Array2::<f64>::zeros((n_lat, n_lon));
    if config.amplitude == 0.0 {
        return Ok(out);
    }
    let mut weight = 1.0;
    for o in 0..config.octaves {
        let cell = config.base_scale / 2f64.powi(o as i32);
        let period_x = ((n_lon as f64 / cell).round() as usize).max(1);
        let lattice = Lattice::new(octave_key(config, member, stream, o), period_x);
        for ((i, j), v) in out.indexed_iter_mut() {
            let x = j as f64 * period_x as f64 / n_lon as f64;
            let y = i as f64 / cell;
            *v += weight * lattice.value(x, y);
        }
        weight *= config.persistence;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let k = config.amplitude / peak;
        out.mapv_inplace(|v| v * k);
    }
    Ok(out)
}

/// Noise field for ensemble member `member_index`, scaled so that its peak
/// absolute value equals `config.amplitude`.
pub fn perlin2d(n_lat: usize, n_lon: usize, config: &NoiseConfig, member_index: u64) -> Result<Array2<f64>> {
    perlin2d_stream(n_lat, n_lon, config, member_index, 0)
}
