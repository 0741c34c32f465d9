//! Month-conditioned mixture of experts.
//!
//! A discrete Gaussian over the twelve months is rotated so that its peak sits
//! on the current month, encoded to one bias per expert, and added to the gate
//! logits before a full softmax and Top-K truncation.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gaussian_density, softmax_rows, uniform_init, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

const MODULE: &str = "tmoe";

/// Discrete Gaussian over months `1..=12`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonthDistribution {
    pub mu: f64,
    pub sigma: f64,
}

impl MonthDistribution {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::invalid(MODULE, format!("month distribution needs finite mu and sigma > 0, got ({mu}, {sigma})")));
        }
        Ok(MonthDistribution { mu, sigma })
    }
}

/// `f(x) = exp(−(x−μ)²/(2σ²)) / (σ√(2π))` for `x = 1..=12`.
pub fn month_gaussian(dist: &MonthDistribution) -> Result<[f64; 12]> {
    let d = MonthDistribution::new(dist.mu, dist.sigma)?;
    Ok(std::array::from_fn(|k| gaussian_density((k + 1) as f64, d.mu, d.sigma)))
}

/// 1-based position of the first maximum.
pub fn argmax_month(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best + 1
}

fn check_month(m: u32) -> Result<()> {
    if !(1..=12).contains(&m) {
        return Err(Error::invalid(MODULE, format!("month {m} outside 1..=12")));
    }
    Ok(())
}

/// Source positions of a rotation moving 1-based `peak_index` onto month `m`:
/// `out[p] = v[index[p]]`.
pub fn rotation_index(m: u32, peak_index: usize) -> Result<[usize; 12]> {
    check_month(m)?;
    if !(1..=12).contains(&peak_index) {
        return Err(Error::invalid(MODULE, format!("peak index {peak_index} outside 1..=12")));
    }
    let shift = (m as usize + 12 - peak_index) % 12;
    Ok(std::array::from_fn(|p| (p + 12 - shift) % 12))
}

/// Circular shift placing the entry at 1-based `peak_index` at position `m`.
pub fn rotate_to_month(v: &[f64; 12], m: u32, peak_index: usize) -> Result<[f64; 12]> {
    let idx = rotation_index(m, peak_index)?;
    Ok(std::array::from_fn(|p| v[idx[p]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Gate logits biased by the rotated month distribution.
    Temporal,
    /// Top-K routing with no month information.
    NoMonth,
    /// A single feed-forward block the size of one expert.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmoeConfig {
    pub experts: usize,
    pub top_k: usize,
    /// Expert hidden width as a multiple of the model width.
    pub hidden_ratio: usize,
    pub mode: RoutingMode,
    pub init_mu: f64,
    pub init_sigma: f64,
}

impl Default for TmoeConfig {
    fn default() -> Self {
        TmoeConfig { experts: 8, top_k: 2, hidden_ratio: 2, mode: RoutingMode::Temporal, init_mu: 6.0, init_sigma: 1.0 }
    }
}

impl TmoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::invalid(MODULE, format!("need 1 <= K <= E, got K={} E={}", self.top_k, self.experts)));
        }
        if self.hidden_ratio == 0 {
            return Err(Error::invalid(MODULE, "hidden_ratio must be positive"));
        }
        MonthDistribution::new(self.init_mu, self.init_sigma).map(|_| ())
    }
}

/// Selected experts and renormalized weights, one entry per token.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Top-K over each row of `probs`: larger probability first, ties to the
/// lower expert index. Kept weights are renormalized to sum to one.
pub fn top_k(probs: &Mat, k: usize) -> Result<GateDecision> {
    let e = probs.ncols();
    if k == 0 || k > e {
        return Err(Error::invalid(MODULE, format!("K={k} outside 1..={e}")));
    }
    let mut indices = Vec::with_capacity(probs.nrows());
    let mut weights = Vec::with_capacity(probs.nrows());
    for row in probs.outer_iter() {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best = usize::MAX;
            for j in 0..e {
                if chosen.contains(&j) {
                    continue;
                }
                if best == usize::MAX || row[j] > row[best] {
                    best = j;
                }
            }
            chosen.push(best);
        }
        let total: f64 = chosen.iter().map(|&j| row[j]).sum();
        weights.push(chosen.iter().map(|&j| row[j] / total).collect());
        indices.push(chosen);
    }
    Ok(GateDecision { indices, weights })
}

#[derive(Debug, Clone)]
struct Expert {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Expert {
    fn new(store: &mut ParamStore, prefix: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Expert {
            w1: store.add(format!("{prefix}.w1"), uniform_init(rng, width, hidden)),
            b1: store.add(format!("{prefix}.b1"), Array2::zeros((1, hidden))),
            w2: store.add(format!("{prefix}.w2"), uniform_init(rng, hidden, width)),
            b2: store.add(format!("{prefix}.b2"), Array2::zeros((1, width))),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let y = g.matmul(h, w2);
        g.add_row(y, b2)
    }

    fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone)]
struct MonthEncoder {
    mu: ParamId,
    log_sigma: ParamId,
    w: ParamId,
    b: ParamId,
}

/// Experts, gate projection and month encoder of one TMoE layer.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    experts: Vec<Expert>,
    gate: Option<(ParamId, ParamId)>,
    month: Option<MonthEncoder>,
    pub config: TmoeConfig,
    pub width: usize,
}

/// Values produced alongside the layer output.
#[derive(Debug, Clone)]
pub struct TmoeTrace {
    pub decision: Option<GateDecision>,
}

impl ExpertBank {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, config: TmoeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let hidden = width * config.hidden_ratio;
        let n_experts = if config.mode == RoutingMode::Dense { 1 } else { config.experts };
        let experts = (0..n_experts)
            .map(|e| Expert::new(store, &format!("{prefix}.expert{e}"), width, hidden, rng))
            .collect();
        let e = config.experts;
        let gate = (config.mode != RoutingMode::Dense).then(|| {
            (store.add(format!("{prefix}.gate.w"), uniform_init(rng, width, e)), store.add(format!("{prefix}.gate.b"), Array2::zeros((1, e))))
        });
        let month = (config.mode == RoutingMode::Temporal).then(|| MonthEncoder {
            mu: store.add(format!("{prefix}.month.mu"), Array2::from_elem((1, 1), config.init_mu)),
            log_sigma: store.add(format!("{prefix}.month.log_sigma"), Array2::from_elem((1, 1), config.init_sigma.ln())),
            w: store.add(format!("{prefix}.month.w"), uniform_init(rng, 12, e)),
            b: store.add(format!("{prefix}.month.b"), Array2::zeros((1, e))),
        });
        Ok(ExpertBank { experts, gate, month, config, width })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.experts.iter().flat_map(|e| e.ids()).collect();
        if let Some((w, b)) = self.gate {
            out.extend([w, b]);
        }
        if let Some(m) = &self.month {
            out.extend([m.mu, m.log_sigma, m.w, m.b]);
        }
        out
    }

    /// Current month distribution, if this bank is month-conditioned.
    pub fn distribution(&self, store: &ParamStore) -> Option<MonthDistribution> {
        self.month.as_ref().map(|m| MonthDistribution {
            mu: store.value(m.mu)[[0, 0]],
            sigma: store.value(m.log_sigma)[[0, 0]].exp(),
        })
    }

    /// Month bias on the graph: Gaussian, rotation to `month`, then 12→E encoder.
    pub fn month_bias(&self, g: &mut Graph, store: &ParamStore, month: u32) -> Result<Option<Var>> {
        check_month(month)?;
        let Some(enc) = &self.month else { return Ok(None) };
        let mu = g.param(store, enc.mu);
        let ls = g.param(store, enc.log_sigma);
        let sigma = g.scalar(ls).exp();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::non_finite(MODULE, format!("month sigma {sigma}")));
        }
        let dens = g.month_gaussian(mu, ls);
        let peak = argmax_month(g.value(dens).as_slice().expect("row vector"));
        let idx: Rc<[usize]> = rotation_index(month, peak)?.to_vec().into();
        let rotated = g.gather(dens, idx, (1, 12));
        let w = g.param(store, enc.w);
        let b = g.param(store, enc.b);
        let y = g.matmul(rotated, w);
        Ok(Some(g.add(y, b)))
    }

    /// Month bias as plain values.
    pub fn month_bias_values(&self, store: &ParamStore, month: u32) -> Result<Option<Vec<f64>>> {
        let mut g = Graph::inference();
        Ok(self.month_bias(&mut g, store, month)?.map(|v| g.value(v).iter().copied().collect()))
    }

    /// Gate decision for plain token values.
    pub fn gate(&self, store: &ParamStore, tokens: &Mat, month: u32) -> Result<GateDecision> {
        let (w, b) = self.gate.ok_or_else(|| Error::invalid(MODULE, "dense mode has no gate"))?;
        let bias = self.month_bias_values(store, month)?;
        gate(tokens, bias.as_deref(), store.value(w), store.value(b), self.config.top_k)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, month: u32) -> Result<(Var, TmoeTrace)> {
        let (t, w) = g.shape(x);
        if w != self.width {
            return Err(Error::shape(MODULE, format!("token width {w}, layer width {}", self.width)));
        }
        let Some((gw, gb)) = self.gate else {
            check_month(month)?;
            return Ok((self.experts[0].forward(g, store, x), TmoeTrace { decision: None }));
        };
        let bias = self.month_bias(g, store, month)?;
        let gw = g.param(store, gw);
        let gb = g.param(store, gb);
        let logits = g.matmul(x, gw);
        let mut logits = g.add_row(logits, gb);
        if let Some(bias) = bias {
            logits = g.add_row(logits, bias);
        }
        let probs = g.softmax(logits);
        let decision = top_k(g.value(probs), self.config.top_k)?;
        let e = self.config.experts;
        let mut mask = Mat::zeros((t, e));
        for (r, sel) in decision.indices.iter().enumerate() {
            for &j in sel {
                mask[[r, j]] = 1.0;
            }
        }
        let mask = g.constant(mask);
        let kept = g.mul(probs, mask);
        let total = g.row_sum(kept);
        let weights = g.div_col(kept, total);
        let mut out: Option<Var> = None;
        for (j, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..t).filter(|&r| decision.indices[r].contains(&j)).collect();
            if rows.is_empty() {
                continue;
            }
            let flat: Rc<[usize]> = rows.iter().map(|&r| r * e + j).collect();
            let n = rows.len();
            let rows: Rc<[usize]> = rows.into();
            let xe = g.gather_rows(x, rows.clone());
            let ye = expert.forward(g, store, xe);
            let we = g.gather(weights, flat, (n, 1));
            let ye = g.mul_col(ye, we);
            let ye = g.scatter_rows(ye, rows, t);
            out = Some(match out {
                Some(acc) => g.add(acc, ye),
                None => ye,
            });
        }
        let out = out.expect("every token selects at least one expert");
        Ok((out, TmoeTrace { decision: Some(decision) }))
    }
}

/// `softmax(tokens·W + b + bias)` followed by Top-K renormalization.
pub fn gate(tokens: &Mat, month_bias: Option<&[f64]>, w: &Mat, b: &Mat, k: usize) -> Result<GateDecision> {
    let e = w.ncols();
    if tokens.ncols() != w.nrows() || b.dim() != (1, e) {
        return Err(Error::shape(MODULE, "gate projection does not match token width"));
    }
    let mut logits = tokens.dot(w) + b;
    if let Some(bias) = month_bias {
        if bias.len() != e {
            return Err(Error::shape(MODULE, format!("month bias has {} entries, expected {e}", bias.len())));
        }
        for mut row in logits.outer_iter_mut() {
            row.iter_mut().zip(bias).for_each(|(l, m)| *l += m);
        }
    }
    top_k(&softmax_rows(&logits), k)
}

/// Per-month expert-selection counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// `month → counts[expert]`.
    pub months: BTreeMap<u32, Vec<u64>>,
}

impl RoutingStats {
    pub fn record(&mut self, month: u32, decision: &GateDecision, experts: usize) {
        let counts = self.months.entry(month).or_insert_with(|| vec![0; experts]);
        for sel in &decision.indices {
            for &j in sel {
                counts[j] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        for (m, c) in &other.months {
            let dst = self.months.entry(*m).or_insert_with(|| vec![0; c.len()]);
            dst.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_examples() {
        let f = month_gaussian(&MonthDistribution { mu: 6.0, sigma: 2.0 }).unwrap();
        assert!((f[5] - 0.199_471_140_200_716_35).abs() < 1e-12);
        assert_eq!(argmax_month(&f), 6);
        let flat = month_gaussian(&MonthDistribution { mu: 6.0, sigma: 1e6 }).unwrap();
        let (lo, hi) = flat.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo - 1.0 < 1e-9);
        assert!(month_gaussian(&MonthDistribution { mu: 6.0, sigma: 0.0 }).is_err());
    }

    #[test]
    fn rotation_examples() {
        let v: [f64; 12] = std::array::from_fn(|i| i as f64);
        assert_eq!(rotate_to_month(&v, 5, 5).unwrap(), v);
        let r = rotate_to_month(&v, 3, 1).unwrap();
        assert_eq!(r[2], 0.0);
        assert_eq!(r[0], 10.0);
        assert!(rotate_to_month(&v, 13, 1).is_err());
        assert!(rotate_to_month(&v, 0, 1).is_err());
    }

    #[test]
    fn gate_examples() {
        let t = Mat::zeros((3, 4));
        let d = gate(&t, None, &Mat::zeros((4, 2)), &Mat::zeros((1, 2)), 2).unwrap();
        assert!(d.weights.iter().all(|w| w == &vec![0.5, 0.5]));
        let d = gate(&t, Some(&[0.3, 0.1]), &Mat::zeros((4, 2)), &Mat::zeros((1, 2)), 1).unwrap();
        assert!(d.indices.iter().all(|i| i == &vec![0]));
        assert!(d.weights.iter().all(|w| w == &vec![1.0]));
        assert!(gate(&t, None, &Mat::zeros((4, 2)), &Mat::zeros((1, 2)), 3).is_err());
    }

    #[test]
    fn dense_mode_has_one_expert_and_no_gate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TmoeConfig { mode: RoutingMode::Dense, ..Default::default() };
        let bank = ExpertBank::new(&mut store, "ffn", 8, cfg, &mut rng).unwrap();
        assert_eq!(bank.ids().len(), 4);
        assert!(bank.gate(&store, &Mat::zeros((1, 8)), 3).is_err());
    }

    #[test]
    fn routing_stats_accumulate() {
        let d = GateDecision { indices: vec![vec![0, 2], vec![2, 1]], weights: vec![vec![0.5, 0.5]; 2] };
        let mut s = RoutingStats::default();
        s.record(4, &d, 3);
        s.record(4, &d, 3);
        assert_eq!(s.months[&4], vec![2, 2, 4]);
    }
}
