//! Patch encoder, attention/TMoE processor, MLP decoder, and the regional
//! variant coupled to a frozen global model through spatially aligned attention.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{batch_indices, write_loss_csv, Dataset, LossRecord, Pair, RegionalPair, Trainer};

use std::sync::Arc;

use chrono::Duration;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{truncated_normal_matrix, uniform_init, AdamWConfig, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::fields::{FieldTensor, RegionSpec};
use crate::saa::{as_column, PriorInit, PriorMatrix, SaaConfig, SaaParams};
use crate::tmoe::{ExpertBank, GateDecision, RoutingStats, TmoeConfig};

const MODULE: &str = "model";

/// Hours advanced by one forecast step.
pub const STEP_HOURS: i64 = 6;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Attention window side length in tokens, used on even blocks.
    pub window: usize,
    pub tmoe: TmoeConfig,
    /// Weight of the reconstruction objective.
    pub lambda_recon: f64,
    /// Std of the truncated-normal positional embedding (truncated at ±2 std).
    pub pos_std: f64,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            n_lat: 32,
            n_lon: 64,
            patch: 2,
            width: 128,
            blocks: 4,
            heads: 4,
            window: 4,
            tmoe: TmoeConfig::default(),
            lambda_recon: 1.0,
            pos_std: 0.02,
            optimizer: AdamWConfig::default(),
            batch_size: 2,
        }
    }
}

impl ModelConfig {
    pub fn token_grid(&self) -> (usize, usize) {
        (self.n_lat / self.patch, self.n_lon / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.channels, self.n_lat, self.n_lon, self.patch, self.width, self.blocks, self.heads, self.window, self.batch_size];
        if pos.contains(&0) {
            return Err(Error::invalid(MODULE, "model dimensions must be positive"));
        }
        if !self.n_lat.is_multiple_of(self.patch) || !self.n_lon.is_multiple_of(self.patch) {
            return Err(Error::invalid(
                MODULE,
                format!("grid {}x{} is not divisible by patch size {}", self.n_lat, self.n_lon, self.patch),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(MODULE, format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        let (th, tw) = self.token_grid();
        if th % self.window != 0 || tw % self.window != 0 {
            return Err(Error::invalid(MODULE, format!("window {} does not divide the {th}x{tw} token grid", self.window)));
        }
        if !(self.lambda_recon >= 0.0) {
            return Err(Error::invalid(MODULE, "lambda_recon must be >= 0"));
        }
        if !(self.pos_std > 0.0) {
            return Err(Error::invalid(MODULE, "pos_std must be positive"));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::invalid(MODULE, "learning rate must be >= 0"));
        }
        self.tmoe.validate()
    }
}

/// `[C × H × W]` → `[(H/p)(W/p) × C·p·p]`, tokens row-major over the patch
/// grid, features ordered `(channel, dy, dx)`.
pub fn patchify(x: &Array3<f64>, p: usize) -> Result<Mat> {
    let (c, h, w) = x.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(MODULE, format!("{h}x{w} grid is not divisible by patch size {p}")));
    }
    let (th, tw) = (h / p, w / p);
    Ok(Mat::from_shape_fn((th * tw, c * p * p), |(t, f)| {
        let (ti, tj) = (t / tw, t % tw);
        let (ch, r) = (f / (p * p), f % (p * p));
        x[[ch, ti * p + r / p, tj * p + r % p]]
    }))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Mat, c: usize, h: usize, w: usize, p: usize) -> Result<Array3<f64>> {
    if tokens.dim() != ((h / p) * (w / p), c * p * p) || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape(MODULE, format!("{:?} tokens do not match a {c}x{h}x{w} field with patch {p}", tokens.dim())));
    }
    let tw = w / p;
    Ok(Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let t = (i / p) * tw + j / p;
        tokens[[t, ch * p * p + (i % p) * p + j % p]]
    }))
}

/// Additive mask restricting attention to non-overlapping `window × window`
/// token squares.
pub fn window_mask(th: usize, tw: usize, window: usize) -> Mat {
    let n = th * tw;
    Mat::from_shape_fn((n, n), |(a, b)| {
        let same = (a / tw) / window == (b / tw) / window && (a % tw) / window == (b % tw) / window;
        if same {
            0.0
        } else {
            MASKED
        }
    })
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), uniform_init(rng, rows, cols)),
            b: store.add(format!("{name}.b"), Array2::zeros((1, cols))),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.g"), Array2::ones((1, width))),
            beta: store.add(format!("{name}.b"), Array2::zeros((1, width))),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    moe: ExpertBank,
    ln2: Norm,
    windowed: bool,
}

/// How a regional model attaches to a global one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub saa: SaaConfig,
    /// Regional box in global grid cells.
    pub region: RegionSpec,
    /// Configuration of the model that supplies the global tokens.
    pub global: ModelConfig,
}

#[derive(Debug, Clone)]
struct Coupling {
    spec: CouplingSpec,
    config: SaaConfig,
    region: RegionSpec,
    prior: ParamId,
    prior_dims: (usize, usize),
    layers: Vec<SaaParams>,
}

/// Encoder, processor and decoder parameters, optionally with SAA coupling.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub config: ModelConfig,
    pub store: ParamStore,
    patch: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    dec1: Linear,
    dec2: Linear,
    coupling: Option<Coupling>,
    window_mask: Arc<Mat>,
}

/// Graph nodes produced by one forward pass.
pub struct ForwardOutput {
    /// Next-step prediction in token space `[T × C·p·p]`.
    pub prediction: Var,
    /// Reconstruction of the input in token space.
    pub reconstruction: Var,
    /// Token states entering each block.
    pub block_inputs: Vec<Var>,
    /// Gate decisions per block (absent for dense blocks).
    pub routing: Vec<Option<GateDecision>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub obj_pred: f64,
    pub obj_recon: f64,
    pub obj_final: f64,
}

/// `mean((p − y)²) + λ · mean((r − x)²)` on plain values.
pub fn loss_values(prediction: &Array3<f64>, reconstruction: &Array3<f64>, target_next: &Array3<f64>, target_now: &Array3<f64>, lambda: f64) -> Result<LossParts> {
    if prediction.dim() != target_next.dim() || reconstruction.dim() != target_now.dim() {
        return Err(Error::shape(MODULE, "loss operands differ in shape"));
    }
    let mse = |a: &Array3<f64>, b: &Array3<f64>| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let obj_pred = mse(prediction, target_next);
    let obj_recon = mse(reconstruction, target_now);
    Ok(LossParts { obj_pred, obj_recon, obj_final: obj_pred + lambda * obj_recon })
}

impl Forecaster {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let patch = Linear::new(&mut store, "enc.patch", config.patch_dim(), w, &mut rng);
        let s = config.pos_std;
        let pos = store.add("enc.pos", truncated_normal_matrix(&mut rng, (config.tokens(), w), 0.0, s, -2.0 * s, 2.0 * s));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let name = format!("block{b}");
            let q = Linear::new(&mut store, &format!("{name}.attn.q"), w, w, &mut rng);
            let k = Linear::new(&mut store, &format!("{name}.attn.k"), w, w, &mut rng);
            let v = Linear::new(&mut store, &format!("{name}.attn.v"), w, w, &mut rng);
            let o = Linear::new(&mut store, &format!("{name}.attn.o"), w, w, &mut rng);
            let ln1 = Norm::new(&mut store, &format!("{name}.ln1"), w);
            let moe = ExpertBank::new(&mut store, &format!("{name}.moe"), w, config.tmoe, &mut rng)?;
            let ln2 = Norm::new(&mut store, &format!("{name}.ln2"), w);
            blocks.push(Block { q, k, v, o, ln1, moe, ln2, windowed: b % 2 == 0 });
        }
        let dec1 = Linear::new(&mut store, "dec.1", w, w, &mut rng);
        let dec2 = Linear::new(&mut store, "dec.2", w, config.patch_dim(), &mut rng);
        let (th, tw) = config.token_grid();
        let window_mask = Arc::new(window_mask(th, tw, config.window));
        Ok(Forecaster { config, store, patch, pos, blocks, dec1, dec2, coupling: None, window_mask })
    }

    /// Adds SAA layers and a prior on the global model's token grid.
    pub fn attach_coupling(&mut self, spec: CouplingSpec, seed: u64) -> Result<()> {
        let (config, region, global) = (spec.saa, spec.region, &spec.global);
        if self.coupling.is_some() {
            return Err(Error::invalid(MODULE, "model already has a coupling"));
        }
        if global.width != self.config.width {
            return Err(Error::shape(MODULE, format!("global width {} differs from regional width {}", global.width, self.config.width)));
        }
        region.validate(global.n_lat, global.n_lon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5aa0_5aa0);
        let (gh, gw) = global.token_grid();
        let token_region = region.coarsen(global.patch);
        let prior = PriorMatrix::with_init(config.prior_init, gh, gw, token_region, config.alpha, &mut rng)?;
        let prior = self.store.add("saa.prior", prior.values);
        let layers = (0..self.config.blocks)
            .map(|b| SaaParams::new(&mut self.store, &format!("saa.block{b}"), self.config.width, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        if config.heads == 0 || !self.config.width.is_multiple_of(config.heads) {
            return Err(Error::invalid(MODULE, format!("width {} not divisible by {} SAA heads", self.config.width, config.heads)));
        }
        self.coupling = Some(Coupling { spec: spec.clone(), config, region, prior, prior_dims: (gh, gw), layers });
        Ok(())
    }

    pub fn is_coupled(&self) -> bool {
        self.coupling.is_some()
    }

    pub fn coupling_spec(&self) -> Option<&CouplingSpec> {
        self.coupling.as_ref().map(|c| &c.spec)
    }

    /// Current prior values on the global token grid.
    pub fn prior(&self) -> Option<PriorMatrix> {
        self.coupling.as_ref().map(|c| PriorMatrix {
            values: self.store.value(c.prior).clone(),
            region: c.region.coarsen(self.config.patch),
            alpha: c.config.alpha,
        })
    }

    pub fn prior_id(&self) -> Option<ParamId> {
        self.coupling.as_ref().map(|c| c.prior)
    }

    /// Freezes everything except the SAA layers and the prior.
    pub fn freeze_backbone(&mut self) {
        self.store.freeze_except(|n| n.starts_with("saa."));
    }

    /// Copies every backbone tensor from `other` (same architecture).
    pub fn copy_backbone_from(&mut self, other: &Forecaster) -> Result<()> {
        for id in other.store.ids() {
            let name = other.store.name(id);
            let dst = self.store.id(name).ok_or_else(|| Error::shape(MODULE, format!("parameter {name} missing in target model")))?;
            self.store.set(dst, other.store.value(id).clone())?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn expert_banks(&self) -> impl Iterator<Item = &ExpertBank> {
        self.blocks.iter().map(|b| &b.moe)
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        let cfg = &self.config;
        if (c, h, w) != (cfg.channels, cfg.n_lat, cfg.n_lon) {
            return Err(Error::shape(
                MODULE,
                format!("input is {c}x{h}x{w}, model expects {}x{}x{}", cfg.channels, cfg.n_lat, cfg.n_lon),
            ));
        }
        Ok(())
    }

    /// Patch projection plus positional embedding.
    pub fn encode(&self, g: &mut Graph, x: &Array3<f64>) -> Result<Var> {
        self.check_input(x)?;
        let patches = g.constant(patchify(x, self.config.patch)?);
        let t = self.patch.apply(g, &self.store, patches);
        let pos = g.param(&self.store, self.pos);
        Ok(g.add(t, pos))
    }

    fn attention(&self, g: &mut Graph, block: &Block, x: Var) -> Var {
        let s = &self.store;
        let q = block.q.apply(g, s, x);
        let k = block.k.apply(g, s, x);
        let v = block.v.apply(g, s, x);
        let heads = self.config.heads;
        let dh = self.config.width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = block.windowed.then(|| g.constant((*self.window_mask).clone()));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let a = g.softmax(scores);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        block.o.apply(g, s, cat)
    }

    /// `A = LN(Attn(X)) + X; X' = LN(TMoE(A)) + A`.
    pub fn processor_block(&self, g: &mut Graph, x: Var, index: usize, month: u32) -> Result<(Var, Option<GateDecision>)> {
        let block = self.blocks.get(index).ok_or_else(|| Error::invalid(MODULE, format!("no block {index}")))?;
        let (t, w) = g.shape(x);
        if t != self.config.tokens() || w != self.config.width {
            return Err(Error::shape(MODULE, format!("block input {t}x{w}, expected {}x{}", self.config.tokens(), self.config.width)));
        }
        let att = self.attention(g, block, x);
        let att = block.ln1.apply(g, &self.store, att);
        let a = g.add(att, x);
        let (m, trace) = block.moe.forward(g, &self.store, a, month)?;
        let m = block.ln2.apply(g, &self.store, m);
        Ok((g.add(m, a), trace.decision))
    }

    /// `Linear(GELU(Linear(tokens)))` in token space `[T × C·p·p]`.
    pub fn decode(&self, g: &mut Graph, tokens: Var) -> Var {
        let h = self.dec1.apply(g, &self.store, tokens);
        let h = g.gelu(h);
        self.dec2.apply(g, &self.store, h)
    }

    /// Shared-encoder/decoder forward: the prediction goes through the
    /// processor, the reconstruction skips it. `global` supplies the global
    /// model's token state entering each block when the model is coupled.
    pub fn forward(&self, g: &mut Graph, x: &Array3<f64>, month: u32, global: Option<&[Mat]>) -> Result<ForwardOutput> {
        let tokens = self.encode(g, x)?;
        let reconstruction = self.decode(g, tokens);
        let prior = match (&self.coupling, global) {
            (Some(c), Some(states)) => {
                if states.len() != self.blocks.len() {
                    return Err(Error::shape(MODULE, format!("{} global states for {} blocks", states.len(), self.blocks.len())));
                }
                let (gh, gw) = c.prior_dims;
                if let Some(s) = states.iter().find(|s| s.nrows() != gh * gw) {
                    return Err(Error::shape(MODULE, format!("global state has {} tokens, prior covers {}", s.nrows(), gh * gw)));
                }
                let p = g.param(&self.store, c.prior);
                Some((c, if c.config.modulate { Some(as_column(g, p)) } else { None }))
            }
            (Some(_), None) => return Err(Error::invalid(MODULE, "coupled model needs global token states")),
            (None, _) => None,
        };
        let mut x_t = tokens;
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut routing = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            if let (Some((c, pcol)), Some(states)) = (&prior, global) {
                let gs = g.constant(states[b].clone());
                x_t = c.layers[b].forward(g, &self.store, x_t, gs, *pcol, c.config.role_order)?;
            }
            block_inputs.push(x_t);
            let (y, decision) = self.processor_block(g, x_t, b, month)?;
            routing.push(decision);
            x_t = y;
        }
        let prediction = self.decode(g, x_t);
        Ok(ForwardOutput { prediction, reconstruction, block_inputs, routing })
    }

    /// Token states entering each block, for use as another model's global input.
    pub fn block_states(&self, field: &FieldTensor) -> Result<Vec<Mat>> {
        if self.coupling.is_some() {
            return Err(Error::invalid(MODULE, "block states come from an uncoupled global model"));
        }
        let mut g = Graph::inference();
        let out = self.forward(&mut g, field.values(), field.month(), None)?;
        Ok(out.block_inputs.iter().map(|&v| g.value(v).clone()).collect())
    }

    fn to_field(&self, g: &Graph, v: Var, like: &FieldTensor, hours: i64) -> Result<FieldTensor> {
        let c = &self.config;
        let values = unpatchify(g.value(v), c.channels, c.n_lat, c.n_lon, c.patch)?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite(MODULE, "forecast contains NaN or infinity"));
        }
        Ok(like.with_values(values)?.with_timestamp(like.timestamp() + Duration::hours(hours)))
    }

    /// `(prediction, reconstruction)` as fields; the prediction is stamped one step later.
    pub fn forward_with_reconstruction(&self, field: &FieldTensor, global: Option<&FieldTensor>, global_model: Option<&Forecaster>) -> Result<(FieldTensor, FieldTensor)> {
        let states = self.global_states_for(global, global_model)?;
        let mut g = Graph::inference();
        let out = self.forward(&mut g, field.values(), field.month(), states.as_deref())?;
        Ok((self.to_field(&g, out.prediction, field, STEP_HOURS)?, self.to_field(&g, out.reconstruction, field, 0)?))
    }

    fn global_states_for(&self, global: Option<&FieldTensor>, global_model: Option<&Forecaster>) -> Result<Option<Vec<Mat>>> {
        match (&self.coupling, global, global_model) {
            (None, _, _) => Ok(None),
            (Some(_), Some(f), Some(m)) => Ok(Some(m.block_states(f)?)),
            _ => Err(Error::invalid(MODULE, "coupled model needs the global field and the global model")),
        }
    }

    /// One step of the uncoupled model.
    pub fn predict(&self, field: &FieldTensor) -> Result<FieldTensor> {
        Ok(self.forward_with_reconstruction(field, None, None)?.0)
    }

    /// Autoregressive forecast of `steps` states, each 6 hours after the previous.
    pub fn rollout(&self, initial: &FieldTensor, steps: usize) -> Result<Vec<FieldTensor>> {
        let mut out = Vec::with_capacity(steps);
        let mut cur = initial.clone();
        for _ in 0..steps {
            cur = self.predict(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// One regional step from the regional state and the concurrent global state.
    pub fn forecast_regional(&self, regional: &FieldTensor, global: &FieldTensor, global_model: &Forecaster) -> Result<FieldTensor> {
        if self.coupling.is_none() {
            return self.predict(regional);
        }
        if regional.timestamp() != global.timestamp() {
            return Err(Error::Consistency {
                module: MODULE,
                message: format!("regional time {} differs from global time {}", regional.timestamp(), global.timestamp()),
            });
        }
        Ok(self.forward_with_reconstruction(regional, Some(global), Some(global_model))?.0)
    }

    /// Joint rollout: the global model advances the global state and feeds
    /// each regional step.
    pub fn rollout_regional(&self, regional: &FieldTensor, global: &FieldTensor, global_model: &Forecaster, steps: usize) -> Result<Vec<FieldTensor>> {
        let mut out = Vec::with_capacity(steps);
        let (mut r, mut gl) = (regional.clone(), global.clone());
        for _ in 0..steps {
            r = self.forecast_regional(&r, &gl, global_model)?;
            gl = global_model.predict(&gl)?;
            out.push(r.clone());
        }
        Ok(out)
    }

    /// Loss terms for one pair without recording gradients.
    pub fn pair_loss(&self, input: &FieldTensor, target: &FieldTensor, global_states: Option<&[Mat]>) -> Result<LossParts> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, input.values(), input.month(), global_states)?;
        let c = &self.config;
        let pred = unpatchify(g.value(out.prediction), c.channels, c.n_lat, c.n_lon, c.patch)?;
        let recon = unpatchify(g.value(out.reconstruction), c.channels, c.n_lat, c.n_lon, c.patch)?;
        loss_values(&pred, &recon, target.values(), input.values(), c.lambda_recon)
    }

    /// Expert-selection histogram per block over a set of inputs.
    pub fn routing_stats(&self, inputs: &[FieldTensor]) -> Result<Vec<RoutingStats>> {
        let mut stats = vec![RoutingStats::default(); self.blocks.len()];
        let e = self.config.tmoe.experts;
        for f in inputs {
            if self.coupling.is_some() {
                return Err(Error::invalid(MODULE, "routing statistics are collected on the global model"));
            }
            let mut g = Graph::inference();
            let out = self.forward(&mut g, f.values(), f.month(), None)?;
            for (s, d) in stats.iter_mut().zip(&out.routing) {
                if let Some(d) = d {
                    s.record(f.month(), d, e);
                }
            }
        }
        Ok(stats)
    }

    /// Random or distance-decay prior kind in use.
    pub fn prior_init(&self) -> Option<PriorInit> {
        self.coupling.as_ref().map(|c| c.config.prior_init)
    }
}

/// Graph loss `mean((P − Y)²) + λ·mean((R − X)²)` over token-space nodes.
pub fn graph_loss(g: &mut Graph, prediction: Var, reconstruction: Var, target_next: &Mat, target_now: &Mat, lambda: f64) -> (Var, Var, Var) {
    let yn = g.constant(target_next.clone());
    let xn = g.constant(target_now.clone());
    let dp = g.sub(prediction, yn);
    let sp = g.square(dp);
    let lp = g.mean(sp);
    let dr = g.sub(reconstruction, xn);
    let sr = g.square(dr);
    let lr = g.mean(sr);
    let wr = g.scale(lr, lambda);
    let total = g.add(lp, wr);
    (lp, lr, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use chrono::Utc;

    use crate::fields::GridSpec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 2,
            n_lat: 4,
            n_lon: 8,
            width: 8,
            blocks: 2,
            heads: 2,
            window: 2,
            tmoe: TmoeConfig { experts: 4, top_k: 2, ..Default::default() },
            ..Default::default()
        }
    }

    fn field(cfg: &ModelConfig, month: u32, fill: impl Fn(usize, usize, usize) -> f64) -> FieldTensor {
        let v = Array3::from_shape_fn((cfg.channels, cfg.n_lat, cfg.n_lon), |(c, i, j)| fill(c, i, j));
        let vars = (0..cfg.channels).map(|c| format!("v{c}")).collect();
        FieldTensor::new(v, vars, GridSpec::global(cfg.n_lat, cfg.n_lon).unwrap(), Utc.with_ymd_and_hms(2020, month, 3, 0, 0, 0).unwrap()).unwrap()
    }

    #[test]
    fn patchify_round_trip() {
        let x = Array3::from_shape_fn((3, 4, 6), |(c, i, j)| (c * 100 + i * 10 + j) as f64);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.dim(), (6, 12));
        assert_eq!(t[[1, 0]], x[[0, 0, 2]]);
        assert_eq!(t[[3, 5]], x[[1, 2, 1]]);
        assert_eq!(unpatchify(&t, 3, 4, 6, 2).unwrap(), x);
        assert!(patchify(&Array3::zeros((1, 3, 4)), 2).is_err());
    }

    #[test]
    fn token_count_for_four_by_four() {
        let cfg = ModelConfig { n_lat: 4, n_lon: 4, window: 1, ..tiny() };
        let m = Forecaster::new(cfg, 0).unwrap();
        let mut g = Graph::inference();
        let t = m.encode(&mut g, &Array3::zeros((2, 4, 4))).unwrap();
        assert_eq!(g.shape(t), (4, 8));
    }

    #[test]
    fn zero_input_encodes_to_positional_embedding() {
        let m = Forecaster::new(tiny(), 3).unwrap();
        let mut g = Graph::inference();
        let t = m.encode(&mut g, &Array3::zeros((2, 4, 8))).unwrap();
        assert_eq!(g.value(t), m.store.value(m.pos));
        let s = m.config.pos_std;
        assert!(m.store.value(m.pos).iter().all(|v| v.abs() <= 2.0 * s + 1e-9));
    }

    #[test]
    fn window_mask_single_window_is_global() {
        assert!(window_mask(2, 2, 2).iter().all(|&v| v == 0.0));
        let m = window_mask(2, 4, 2);
        assert_eq!(m[[0, 1]], 0.0);
        assert_eq!(m[[0, 2]], MASKED);
        assert_eq!(m[[0, 5]], 0.0);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Forecaster::new(ModelConfig { n_lat: 5, ..tiny() }, 0).is_err());
        assert!(Forecaster::new(ModelConfig { window: 3, ..tiny() }, 0).is_err());
        assert!(Forecaster::new(ModelConfig { heads: 3, ..tiny() }, 0).is_err());
    }

    #[test]
    fn loss_scalar_example() {
        let p = Array3::from_elem((1, 1, 1), 2.0);
        let r = Array3::from_elem((1, 1, 1), 1.0);
        let z = Array3::zeros((1, 1, 1));
        let l = loss_values(&p, &r, &z, &z, 0.5).unwrap();
        assert_eq!(l.obj_final, 4.5);
        assert_eq!(loss_values(&p, &r, &z, &z, 0.0).unwrap().obj_final, 4.0);
    }

    #[test]
    fn zero_processor_output_makes_prediction_equal_reconstruction() {
        let mut m = Forecaster::new(tiny(), 5).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            let n = m.store.name(id).to_string();
            if n.contains(".ln1.") || n.contains(".ln2.") {
                let z = Array2::zeros(m.store.value(id).dim());
                m.store.set(id, z).unwrap();
            }
        }
        let f = field(&m.config, 4, |c, i, j| (c + i * j) as f64 * 0.1);
        let (p, r) = m.forward_with_reconstruction(&f, None, None).unwrap();
        assert_eq!(p.values(), r.values());
    }

    #[test]
    fn rollout_advances_month_across_year_end() {
        let m = Forecaster::new(tiny(), 1).unwrap();
        let mut f = field(&m.config, 12, |_, i, _| i as f64 * 0.01);
        f = f.with_timestamp(Utc.with_ymd_and_hms(2020, 12, 31, 18, 0, 0).unwrap());
        assert!(m.rollout(&f, 0).unwrap().is_empty());
        let r = m.rollout(&f, 2).unwrap();
        assert_eq!(r[1].month(), 1);
        assert_eq!(r[0], m.predict(&f).unwrap());
        assert_eq!(r, m.rollout(&f, 2).unwrap());
    }

    #[test]
    fn coupled_model_requires_global_states() {
        let cfg = tiny();
        let mut m = Forecaster::new(cfg.clone(), 1).unwrap();
        let spec = CouplingSpec { saa: SaaConfig::default(), region: RegionSpec { center_x: 2, center_y: 4, height: 2, width: 4 }, global: cfg.clone() };
        m.attach_coupling(spec, 2).unwrap();
        let f = field(&cfg, 3, |_, _, _| 0.0);
        let mut g = Graph::inference();
        assert!(m.forward(&mut g, f.values(), 3, None).is_err());
        let global = Forecaster::new(cfg, 1).unwrap();
        let p = m.forecast_regional(&f, &f, &global).unwrap();
        assert_eq!(p.values().dim(), f.values().dim());
    }
}
