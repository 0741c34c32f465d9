//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export returns a flat row-major `Float64Array`; the page colours it.

use stcast::ensemble::{perlin2d, NoiseConfig};
use stcast::fields::RegionSpec;
use stcast::saa::PriorMatrix;
use stcast::tmoe::{argmax_month, month_gaussian, rotate_to_month, MonthDistribution};
use wasm_bindgen::prelude::*;

/// Distance-decay prior on an `n_lat × n_lon` grid around a region box.
pub fn prior_values(n_lat: usize, n_lon: usize, center_x: usize, center_y: usize, height: usize, width: usize, alpha: f64) -> Result<Vec<f64>, String> {
    let region = RegionSpec { center_x, center_y, height, width };
    let p = PriorMatrix::init(n_lat, n_lon, region, alpha).map_err(|e| e.to_string())?;
    Ok(p.values.iter().copied().collect())
}

/// One member's Perlin perturbation with unit amplitude.
pub fn perlin_values(n_lat: usize, n_lon: usize, base_scale: f64, octaves: u32, persistence: f64, seed: u64, member: u64) -> Result<Vec<f64>, String> {
    let cfg = NoiseConfig { amplitude: 1.0, base_scale, octaves, persistence, seed };
    cfg.validate().map_err(|e| e.to_string())?;
    let f = perlin2d(n_lat, n_lon, &cfg, member).map_err(|e| e.to_string())?;
    Ok(f.iter().copied().collect())
}

/// Month Gaussian rotated so its peak sits on `month`.
pub fn month_values(mu: f64, sigma: f64, month: u32) -> Result<Vec<f64>, String> {
    let d = MonthDistribution::new(mu, sigma).map_err(|e| e.to_string())?;
    let v = month_gaussian(&d).map_err(|e| e.to_string())?;
    let r = rotate_to_month(&v, month, argmax_month(&v)).map_err(|e| e.to_string())?;
    Ok(r.to_vec())
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn prior_map(n_lat: usize, n_lon: usize, center_x: usize, center_y: usize, height: usize, width: usize, alpha: f64) -> Result<Vec<f64>, JsError> {
    js(prior_values(n_lat, n_lon, center_x, center_y, height, width, alpha))
}

#[wasm_bindgen]
pub fn perlin_field(n_lat: usize, n_lon: usize, base_scale: f64, octaves: u32, persistence: f64, seed: u64, member: u64) -> Result<Vec<f64>, JsError> {
    js(perlin_values(n_lat, n_lon, base_scale, octaves, persistence, seed, member))
}

#[wasm_bindgen]
pub fn month_weights(mu: f64, sigma: f64, month: u32) -> Result<Vec<f64>, JsError> {
    js(month_values(mu, sigma, month))
}
