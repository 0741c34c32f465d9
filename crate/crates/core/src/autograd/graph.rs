//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns the gradient of that scalar with respect to every recorded node.
//! Everything in the crate is expressed as matrices: token grids are
//! `[tokens × width]`, fields are flattened into patch rows, and scalars are
//! `[1 × 1]`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    ClampMin(Var, f64),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    ReluPlusOne(Var),
    Gelu(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Gather { src: Var, index: Rc<[usize]> },
    GatherRows { src: Var, rows: Rc<[usize]> },
    ScatterRows { src: Var, rows: Rc<[usize]> },
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    MonthGaussian { mu: Var, log_sigma: Var },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` received none.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only. Nothing on it requires gradients.
    pub fn inference() -> Self {
        Graph { no_grad: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && !self.no_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input. Constants never receive gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf that receives a gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape. Repeated calls return the same node so
    /// gradients of shared weights accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).t().dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulTN(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row`, with `row` of shape `[1 × n]` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: row must have one row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a ∘ row`, with `row` of shape `[1 × n]` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: row must have one row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row: width mismatch");
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `a ∘ col`, with `col` of shape `[m × 1]` broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col: col must have one column");
        assert_eq!(self.shape(a).0, self.shape(col).0, "mul_col: height mismatch");
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// `a / col`, with `col` of shape `[m × 1]` broadcast over the columns of `a`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "div_col: col must have one column");
        assert_eq!(self.shape(a).0, self.shape(col).0, "div_col: height mismatch");
        let value = self.value(a) / self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::DivCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `max(a, lo)`; the gradient is blocked where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo));
        let ng = self.ng(a);
        self.push(value, Op::ClampMin(a, lo), ng)
    }

    /// Sum over columns: `[m × n] -> [m × 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Mat::from_elem((1, 1), m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Positive linear-attention feature map `max(x, 0) + 1`.
    pub fn relu_plus_one(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0) + 1.0);
        let ng = self.ng(a);
        self.push(value, Op::ReluPlusOne(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1 × n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(self.shape(gamma), (1, cols), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, cols), "layer_norm: beta shape");
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let mut out = xhat.row_mut(r);
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Element gather over the row-major flattening of `src`:
    /// `out.flat[k] = src.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather: index length");
        let s = self.value(src);
        let flat = s.as_slice().expect("graph values are standard layout");
        let data: Vec<f64> = index.iter().map(|&i| flat[i]).collect();
        let value = Mat::from_shape_vec(shape, data).expect("gather shape");
        let ng = self.ng(src);
        self.push(value, Op::Gather { src, index }, ng)
    }

    /// Selects rows of `src` in the given order.
    pub fn gather_rows(&mut self, src: Var, rows: Rc<[usize]>) -> Var {
        let s = self.value(src);
        let mut value = Mat::zeros((rows.len(), s.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            value.row_mut(r).assign(&s.row(i));
        }
        let ng = self.ng(src);
        self.push(value, Op::GatherRows { src, rows }, ng)
    }

    /// Scatters the rows of `src` into a zero matrix with `n_rows` rows:
    /// `out[rows[r]] += src[r]`.
    pub fn scatter_rows(&mut self, src: Var, rows: Rc<[usize]>, n_rows: usize) -> Var {
        let s = self.value(src);
        assert_eq!(s.nrows(), rows.len(), "scatter_rows: row count");
        let mut value = Mat::zeros((n_rows, s.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            let mut dst = value.row_mut(i);
            dst += &s.row(r);
        }
        let ng = self.ng(src);
        self.push(value, Op::ScatterRows { src, rows }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.value(src).slice(ndarray::s![.., start..start + len]).to_owned();
        let ng = self.ng(src);
        self.push(value, Op::SliceCols { src, start }, ng)
    }

    /// Discrete Gaussian over the month support `x = 1..=12`, parameterized
    /// by `mu` and `log_sigma` (both `[1 × 1]`). Output is `[1 × 12]`.
    pub fn month_gaussian(&mut self, mu: Var, log_sigma: Var) -> Var {
        let m = self.scalar(mu);
        let s = self.scalar(log_sigma).exp();
        let value = Mat::from_shape_fn((1, 12), |(_, k)| gaussian_density((k + 1) as f64, m, s));
        let ng = self.ng(mu) || self.ng(log_sigma);
        self.push(value, Op::MonthGaussian { mu, log_sigma }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients with respect to every parameter placed on this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }

    /// Node holding the given parameter, if it was placed on this graph.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let v = |x: Var| &self.nodes[x.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                self.acc(grads, *a, || g.dot(&v(*b).t()));
                self.acc(grads, *b, || v(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                self.acc(grads, *a, || g.dot(v(*b)));
                self.acc(grads, *b, || g.t().dot(v(*a)));
            }
            Op::MatMulTN(a, b) => {
                self.acc(grads, *a, || v(*b).dot(&g.t()));
                self.acc(grads, *b, || v(*a).dot(g));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || -g);
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || g * v(*b));
                self.acc(grads, *b, || g * v(*a));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                self.acc(grads, *a, || g * v(*row));
                self.acc(grads, *row, || (g * v(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                self.acc(grads, *a, || g * v(*col));
                self.acc(grads, *col, || (g * v(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::DivCol(a, col) => {
                self.acc(grads, *a, || g / v(*col));
                self.acc(grads, *col, || {
                    let c = v(*col);
                    let s = (g * v(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    -(s / (c * c))
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, || g * *c),
            Op::ClampMin(a, lo) => self.acc(grads, *a, || {
                let mut out = g.clone();
                Zip::from(&mut out).and(v(*a)).for_each(|o, &x| {
                    if x < *lo {
                        *o = 0.0;
                    }
                });
                out
            }),
            Op::RowSum(a) => self.acc(grads, *a, || {
                let (m, n) = v(*a).dim();
                Mat::from_shape_fn((m, n), |(r, _)| g[[r, 0]])
            }),
            Op::Sum(a) => self.acc(grads, *a, || Mat::from_elem(v(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => self.acc(grads, *a, || {
                let n = v(*a).len() as f64;
                Mat::from_elem(v(*a).dim(), g[[0, 0]] / n)
            }),
            Op::ReluPlusOne(a) => self.acc(grads, *a, || {
                let mut out = g.clone();
                Zip::from(&mut out).and(v(*a)).for_each(|o, &x| {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                });
                out
            }),
            Op::Gelu(a) => self.acc(grads, *a, || {
                let mut out = g.clone();
                Zip::from(&mut out).and(v(*a)).for_each(|o, &x| *o *= gelu_grad(x));
                out
            }),
            Op::Square(a) => self.acc(grads, *a, || g * v(*a) * 2.0),
            Op::Softmax(a) => self.acc(grads, *a, || {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                y * &(g - &dot)
            }),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                self.acc(grads, *gamma, || (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                self.acc(grads, *beta, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                self.acc(grads, *x, || {
                    let gx = g * v(*gamma);
                    let n = gx.ncols() as f64;
                    let mut out = Mat::zeros(gx.dim());
                    for r in 0..gx.nrows() {
                        let gr = gx.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        let is = inv_std[r];
                        Zip::from(out.row_mut(r))
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gi, &xi| *o = is * (gi - mean_g - xi * mean_gx));
                    }
                    out
                });
            }
            Op::Gather { src, index } => self.acc(grads, *src, || {
                let mut out = Mat::zeros(v(*src).dim());
                let dst = out.as_slice_mut().expect("standard layout");
                for (k, gk) in g.iter().enumerate() {
                    dst[index[k]] += gk;
                }
                out
            }),
            Op::GatherRows { src, rows } => self.acc(grads, *src, || {
                let mut out = Mat::zeros(v(*src).dim());
                for (r, &i) in rows.iter().enumerate() {
                    let mut dst = out.row_mut(i);
                    dst += &g.row(r);
                }
                out
            }),
            Op::ScatterRows { src, rows } => self.acc(grads, *src, || {
                let mut out = Mat::zeros(v(*src).dim());
                for (r, &i) in rows.iter().enumerate() {
                    out.row_mut(r).assign(&g.row(i));
                }
                out
            }),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = v(*p).ncols();
                    let s = start;
                    self.acc(grads, *p, || g.slice(ndarray::s![.., s..s + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols { src, start } => self.acc(grads, *src, || {
                let mut out = Mat::zeros(v(*src).dim());
                let w = g.ncols();
                out.slice_mut(ndarray::s![.., *start..*start + w]).assign(g);
                out
            }),
            Op::MonthGaussian { mu, log_sigma } => {
                let m = v(*mu)[[0, 0]];
                let s = v(*log_sigma)[[0, 0]].exp();
                let f = &node.value;
                let mut d_mu = 0.0;
                let mut d_ls = 0.0;
                for k in 0..12 {
                    let dx = (k + 1) as f64 - m;
                    let gf = g[[0, k]] * f[[0, k]];
                    d_mu += gf * dx / (s * s);
                    d_ls += gf * (dx * dx / (s * s) - 1.0);
                }
                self.acc(grads, *mu, || Mat::from_elem((1, 1), d_mu));
                self.acc(grads, *log_sigma, || Mat::from_elem((1, 1), d_ls));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], target: Var, f: impl FnOnce() -> Mat) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let delta = f();
        match &mut grads[target.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn gaussian_density(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(out ∘ dir))/d(input) for a unary graph builder.
    fn check_unary(x0: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let dir = Mat::from_shape_fn(g.shape(y), |(i, j)| 0.3 + 0.1 * i as f64 - 0.07 * j as f64);
        let d = g.constant(dir.clone());
        let p = g.mul(y, d);
        let loss = g.sum(p);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let f = |xv: &Mat| {
            let mut g = Graph::inference();
            let x = g.constant(xv.clone());
            let y = build(&mut g, x);
            (g.value(y) * &dir).sum()
        };
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!((num - a).abs() <= 1e-6 * (1.0 + num.abs()), "idx {idx}: numeric {num} vs analytic {a}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]]
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(sample(), |g, x| g.gelu(x));
        check_unary(sample(), |g, x| g.softmax(x));
        check_unary(sample(), |g, x| g.square(x));
        check_unary(sample(), |g, x| g.row_sum(x));
        check_unary(sample(), |g, x| g.mean(x));
        check_unary(sample(), |g, x| g.relu_plus_one(x));
        check_unary(sample(), |g, x| g.slice_cols(x, 1, 2));
        check_unary(sample(), |g, x| g.gather(x, Rc::from(vec![5, 0, 0, 3]), (2, 2)));
        check_unary(sample(), |g, x| g.gather_rows(x, Rc::from(vec![1, 1, 0])));
        check_unary(sample(), |g, x| g.scatter_rows(x, Rc::from(vec![2, 0]), 3));
        check_unary(sample(), |g, x| {
            let gamma = g.constant(array![[1.5, 0.5, -1.0]]);
            let beta = g.constant(array![[0.1, 0.0, 0.2]]);
            g.layer_norm(x, gamma, beta, 1e-5)
        });
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let other = array![[0.7, 0.1, -0.3], [0.2, -0.9, 0.4]];
        let o = other.clone();
        check_unary(sample(), move |g, x| {
            let b = g.constant(o.clone());
            g.matmul_nt(x, b)
        });
        let o = other.clone();
        check_unary(sample(), move |g, x| {
            let b = g.constant(o.clone());
            g.matmul_tn(x, b)
        });
        let o = other.t().to_owned();
        check_unary(sample(), move |g, x| {
            let b = g.constant(o.clone());
            g.matmul(x, b)
        });
        check_unary(array![[0.5], [1.5]], |g, c| {
            let a = g.constant(array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]]);
            g.div_col(a, c)
        });
        check_unary(array![[0.5], [1.5]], |g, c| {
            let a = g.constant(array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]]);
            g.mul_col(a, c)
        });
        check_unary(array![[0.5, -0.2, 2.0]], |g, r| {
            let a = g.constant(array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]]);
            let m = g.mul_row(a, r);
            g.add_row(m, r)
        });
        check_unary(sample(), |g, x| {
            let y = g.slice_cols(x, 0, 1);
            let z = g.slice_cols(x, 1, 2);
            g.concat_cols(&[z, y])
        });
    }

    #[test]
    fn month_gaussian_matches_finite_differences() {
        check_unary(array![[6.3, 0.4]], |g, x| {
            let mu = g.slice_cols(x, 0, 1);
            let ls = g.slice_cols(x, 1, 1);
            g.month_gaussian(mu, ls)
        });
    }

    #[test]
    fn clamp_blocks_gradient_below_floor() {
        let mut g = Graph::new();
        let x = g.input(array![[-1.0, 2.0]]);
        let c = g.clamp_min(x, 0.5);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn gelu_identities() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-4);
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let mut g = Graph::inference();
        let x = g.input(array![[1.0]]);
        let s = g.sum(x);
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
    }
}
