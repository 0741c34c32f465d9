#![allow(dead_code)]

use chrono::{DateTime, TimeZone, Utc};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcast::autograd::{Mat, ParamId, ParamStore};
use stcast::fields::{FieldTensor, GridSpec};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
// Denominator floor. Central differences of an O(10) loss with step 1e-5
// carry ~1e-10 of rounding noise, so gradients below this are compared
// in absolute terms.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Central differences of `loss` with respect to every element of `ids`,
/// compared with `analytic`. Returns the worst relative error and its location.
pub fn fd_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &dyn Fn(&ParamStore) -> Vec<Mat>,
    loss: &dyn Fn(&ParamStore) -> f64,
) -> (f64, String) {
    let grads = analytic(store);
    let mut worst = (0.0, String::new());
    for (k, &id) in ids.iter().enumerate() {
        let dim = store.value(id).dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let x0 = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = x0 + FD_STEP;
                let up = loss(store);
                store.value_mut(id)[[r, c]] = x0 - FD_STEP;
                let down = loss(store);
                store.value_mut(id)[[r, c]] = x0;
                let num = (up - down) / (2.0 * FD_STEP);
                let e = rel_err(grads[k][[r, c]], num);
                if e > worst.0 {
                    worst = (e, format!("{}[{r},{c}] analytic {} numeric {num}", store.name(id), grads[k][[r, c]]));
                }
            }
        }
    }
    worst
}

pub fn ts(month: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, month, 10, 0, 0, 0).unwrap()
}

pub fn random_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, month: u32) -> FieldTensor {
    let v = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0));
    let vars = (0..c).map(|i| format!("v{i}")).collect();
    FieldTensor::new(v, vars, GridSpec::global(h, w).unwrap(), ts(month)).unwrap()
}
