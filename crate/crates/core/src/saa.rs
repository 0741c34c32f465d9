//! Spatially aligned attention: a learnable global→regional prior, initialized
//! by distance decay from the target region, modulating linear cross-attention
//! from regional queries onto global keys and values.
//!
//! For one head with positive feature map `φ(x) = max(x, 0) + 1`:
//!
//! ```text
//! A[r, g]  = φ(q_r) · φ(k_g)                 (regional row r, global column g)
//! Â[r, g]  = A[r, g] · f(g) / Σ_g' A[r, g'] · f(g')
//! out_r    = x_r + W_o · Σ_g Â[r, g] v_g
//! ```
//!
//! The `[regional × global]` map is never materialized on the training path:
//! `Σ_g Â[r, g] v_g = φ(q_r)ᵀ (Σ_g f(g) φ(k_g) v_gᵀ) / φ(q_r)ᵀ (Σ_g f(g) φ(k_g))`,
//! which is linear in both token counts.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{truncated_normal_matrix, uniform_init, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::fields::{GridSpec, RegionSpec};

const MODULE: &str = "saa";

/// Floor applied to each row's modulated attention mass.
pub const RENORM_FLOOR: f64 = 1e-12;

/// `d(i, j) = max(|i − C_x| − H_r/2, |j − C_y| − W_r/2)`.
pub fn manhattan_region_distance(i: usize, j: usize, region: &RegionSpec) -> f64 {
    let di = (i as f64 - region.center_x as f64).abs() - region.height as f64 / 2.0;
    let dj = (j as f64 - region.center_y as f64).abs() - region.width as f64 / 2.0;
    di.max(dj)
}

/// Distance-decay prior value: `1` inside the region, `exp(−α d²)` outside.
pub fn decay_prior_value(d: f64, alpha: f64) -> f64 {
    if d <= 0.0 {
        1.0
    } else {
        (-alpha * d * d).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorInit {
    /// Distance decay from the region.
    Distance,
    /// Truncated normal, mean 0.5, std 0.2, truncated at ±2 std.
    Random,
    /// All ones: plain unmodulated cross-attention at initialization.
    Ones,
}

/// Which stream provides the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleOrder {
    /// Regional tokens query global keys/values. Works for any token counts.
    RegionalQuery,
    /// Global tokens provide queries and keys, regional tokens the values.
    /// Only defined when both streams have the same token count.
    GlobalQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaaConfig {
    pub alpha: f64,
    pub heads: usize,
    pub prior_init: PriorInit,
    pub role_order: RoleOrder,
    /// Multiply attention by the prior. Off gives plain linear cross-attention.
    pub modulate: bool,
}

impl Default for SaaConfig {
    fn default() -> Self {
        SaaConfig { alpha: 0.1, heads: 2, prior_init: PriorInit::Distance, role_order: RoleOrder::RegionalQuery, modulate: true }
    }
}

/// Learnable global-regional distribution, one value per global (token) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    pub values: Array2<f64>,
    pub region: RegionSpec,
    pub alpha: f64,
}

impl PriorMatrix {
    /// Closed-form distance-decay initialization on an `rows × cols` grid.
    pub fn init(rows: usize, cols: usize, region: RegionSpec, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(MODULE, format!("decay factor must be positive, got {alpha}")));
        }
        region.validate(rows, cols)?;
        let values = Array2::from_shape_fn((rows, cols), |(i, j)| {
            decay_prior_value(manhattan_region_distance(i, j, &region), alpha)
        });
        Ok(PriorMatrix { values, region, alpha })
    }

    pub fn random(rows: usize, cols: usize, region: RegionSpec, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = PriorMatrix::init(rows, cols, region, alpha)?;
        p.values = truncated_normal_matrix(rng, (rows, cols), 0.5, 0.2, 0.1, 0.9);
        Ok(p)
    }

    pub fn ones(rows: usize, cols: usize, region: RegionSpec, alpha: f64) -> Result<Self> {
        let mut p = PriorMatrix::init(rows, cols, region, alpha)?;
        p.values.fill(1.0);
        Ok(p)
    }

    pub fn with_init(kind: PriorInit, rows: usize, cols: usize, region: RegionSpec, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        match kind {
            PriorInit::Distance => PriorMatrix::init(rows, cols, region, alpha),
            PriorInit::Random => PriorMatrix::random(rows, cols, region, alpha, rng),
            PriorInit::Ones => PriorMatrix::ones(rows, cols, region, alpha),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Distance-decay prior over a grid's cells.
pub fn init_prior(grid: &GridSpec, region: RegionSpec, alpha: f64) -> Result<PriorMatrix> {
    PriorMatrix::init(grid.n_lat(), grid.n_lon(), region, alpha)
}

/// Projection parameters of one cross-attention layer.
#[derive(Debug, Clone)]
pub struct SaaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub width: usize,
    pub heads: usize,
}

impl SaaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::invalid(MODULE, format!("width {width} is not divisible by {heads} heads")));
        }
        let mut lin = |name: &str, scale: f64| {
            let w = store.add(format!("{prefix}.{name}.w"), uniform_init(rng, width, width) * scale);
            let b = store.add(format!("{prefix}.{name}.b"), Array2::zeros((1, width)));
            (w, b)
        };
        let (wq, bq) = lin("q", 1.0);
        let (wk, bk) = lin("k", 1.0);
        let (wv, bv) = lin("v", 1.0);
        let (wo, bo) = lin("o", 0.1);
        Ok(SaaParams { wq, bq, wk, bk, wv, bv, wo, bo, width, heads })
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }

    fn affine(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Fused regional features. `prior` is the `[N_g × 1]` column of prior
    /// values (or `None` for unmodulated attention).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        regional: Var,
        global: Var,
        prior: Option<Var>,
        role: RoleOrder,
    ) -> Result<Var> {
        let (nr, wr) = g.shape(regional);
        let (ng, wg) = g.shape(global);
        if wr != self.width || wg != self.width {
            return Err(Error::shape(MODULE, format!("token width {wr}/{wg}, layer width {}", self.width)));
        }
        if let Some(p) = prior {
            if g.shape(p) != (ng, 1) {
                return Err(Error::shape(MODULE, format!("prior has shape {:?}, expected ({ng}, 1)", g.shape(p))));
            }
        }
        if g.value(regional).iter().chain(g.value(global).iter()).any(|v| !v.is_finite()) {
            return Err(Error::non_finite(MODULE, "NaN or infinity in attention inputs"));
        }
        let (q_src, kv_src, v_src) = match role {
            RoleOrder::RegionalQuery => (regional, global, global),
            RoleOrder::GlobalQuery => {
                if nr != ng {
                    return Err(Error::shape(
                        MODULE,
                        format!("global-query orientation needs equal token counts, got {nr} regional vs {ng} global"),
                    ));
                }
                (global, global, regional)
            }
        };
        let q = self.affine(g, store, q_src, self.wq, self.bq);
        let q = g.relu_plus_one(q);
        let k = self.affine(g, store, kv_src, self.wk, self.bk);
        let k = g.relu_plus_one(k);
        let v = self.affine(g, store, v_src, self.wv, self.bv);
        let prior = match prior {
            Some(p) => p,
            None => g.constant(Mat::ones((ng, 1))),
        };
        let dh = self.width / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kp = g.mul_col(kh, prior);
            let kv = g.matmul_tn(kp, vh);
            let num = g.matmul(qh, kv);
            let ksum = g.matmul_tn(kh, prior);
            let den = g.matmul(qh, ksum);
            let den = g.clamp_min(den, RENORM_FLOOR);
            heads.push(g.div_col(num, den));
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let out = self.affine(g, store, attn, self.wo, self.bo);
        Ok(g.add(regional, out))
    }

    /// Explicit modulated, renormalized attention maps (one per head), with
    /// rows indexed by query tokens and columns by global tokens.
    pub fn attention_maps(&self, store: &ParamStore, regional: &Mat, global: &Mat, prior: &[f64], role: RoleOrder) -> Vec<Mat> {
        let phi = |x: Mat| x.mapv(|v| v.max(0.0) + 1.0);
        let aff = |x: &Mat, w: ParamId, b: ParamId| x.dot(store.value(w)) + store.value(b);
        let q_src = match role {
            RoleOrder::RegionalQuery => regional,
            RoleOrder::GlobalQuery => global,
        };
        let q = phi(aff(q_src, self.wq, self.bq));
        let k = phi(aff(global, self.wk, self.bk));
        let dh = self.width / self.heads;
        (0..self.heads)
            .map(|h| {
                let qh = q.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                let kh = k.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                let mut a = qh.dot(&kh.t());
                for mut row in a.outer_iter_mut() {
                    for (x, p) in row.iter_mut().zip(prior) {
                        *x *= p;
                    }
                    let s = row.sum().max(RENORM_FLOOR);
                    row.mapv_inplace(|x| x / s);
                }
                a
            })
            .collect()
    }
}

/// Row-major reshape of an `[h × w]` node into a `[h·w × 1]` column.
pub fn as_column(g: &mut Graph, m: Var) -> Var {
    let n = g.value(m).len();
    let index: Rc<[usize]> = (0..n).collect();
    g.gather(m, index, (n, 1))
}

/// Gradients of `Σ out ∘ direction` with respect to every projection and the prior.
pub struct SaaGradients {
    pub params: Vec<(String, Mat)>,
    pub prior: Mat,
}

/// Runs `saa_forward` on a recording graph and returns the exact gradients of
/// the scalar `Σ out ∘ direction`.
pub fn saa_gradients(
    store: &ParamStore,
    layer: &SaaParams,
    prior_id: ParamId,
    regional: &Mat,
    global: &Mat,
    direction: &Mat,
    role: RoleOrder,
) -> Result<SaaGradients> {
    let mut g = Graph::new();
    let r = g.constant(regional.clone());
    let gl = g.constant(global.clone());
    let p = g.param(store, prior_id);
    let pc = as_column(&mut g, p);
    let out = layer.forward(&mut g, store, r, gl, Some(pc), role)?;
    let d = g.constant(direction.clone());
    let prod = g.mul(out, d);
    let loss = g.sum(prod);
    let grads = g.backward(loss);
    let params = layer
        .ids()
        .iter()
        .map(|&id| (store.name(id).to_string(), grads.get_or_zeros(g.param_var(id).expect("on graph"), store.value(id).dim())))
        .collect();
    let prior = grads.get_or_zeros(p, store.value(prior_id).dim());
    Ok(SaaGradients { params, prior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn region() -> RegionSpec {
        RegionSpec { center_x: 10, center_y: 10, height: 4, width: 4 }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(manhattan_region_distance(10, 10, &region()), -2.0);
        assert_eq!(manhattan_region_distance(15, 10, &region()), 3.0);
        assert_eq!(manhattan_region_distance(10, 13, &region()), 1.0);
    }

    #[test]
    fn prior_examples() {
        let p = PriorMatrix::init(24, 24, region(), 0.1).unwrap();
        assert_eq!(p.values[[10, 10]], 1.0);
        assert_eq!(p.values[[12, 8]], 1.0);
        assert!((p.values[[15, 10]] - (-0.9f64).exp()).abs() < 1e-15);
        assert!((p.values[[15, 10]] - 0.406_569_659_740_599_1).abs() < 1e-12);
        let hard = PriorMatrix::init(24, 24, region(), 1e6).unwrap();
        let v = hard.values[[10, 13]];
        assert!((0.0..1e-300).contains(&v));
        assert!(PriorMatrix::init(24, 24, region(), 0.0).is_err());
        assert!(PriorMatrix::init(24, 24, region(), -1.0).is_err());
    }

    #[test]
    fn prior_is_monotone_in_distance() {
        let p = PriorMatrix::init(20, 30, RegionSpec { center_x: 7, center_y: 12, height: 3, width: 5 }, 0.05).unwrap();
        let mut pairs: Vec<(f64, f64)> = p
            .values
            .indexed_iter()
            .map(|((i, j), &v)| (manhattan_region_distance(i, j, &p.region), v))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 <= w[0].1);
            if w[0].0 == w[1].0 {
                assert_eq!(w[0].1, w[1].1);
            }
        }
        assert!(p.values.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn random_prior_is_positive_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PriorMatrix::random(8, 8, RegionSpec { center_x: 4, center_y: 4, height: 2, width: 2 }, 0.1, &mut rng).unwrap();
        assert!(p.values.iter().all(|&v| (0.1..=0.9).contains(&v)));
    }

    #[test]
    fn width_must_divide_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SaaParams::new(&mut store, "saa", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn global_query_requires_equal_token_counts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = SaaParams::new(&mut store, "saa", 4, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let r = g.constant(Mat::zeros((3, 4)));
        let gl = g.constant(Mat::zeros((5, 4)));
        assert!(layer.forward(&mut g, &store, r, gl, None, RoleOrder::GlobalQuery).is_err());
        let r = g.constant(Mat::zeros((5, 4)));
        assert!(layer.forward(&mut g, &store, r, gl, None, RoleOrder::GlobalQuery).is_ok());
    }

    #[test]
    fn rejects_nan_inputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = SaaParams::new(&mut store, "saa", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut bad = Mat::zeros((3, 4));
        bad[[1, 1]] = f64::NAN;
        let r = g.constant(bad);
        let gl = g.constant(Mat::zeros((5, 4)));
        assert!(matches!(layer.forward(&mut g, &store, r, gl, None, RoleOrder::RegionalQuery), Err(Error::NonFinite { .. })));
    }
}
