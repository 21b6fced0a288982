//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! Each forward pass records operations onto a fresh [`Tape`]; the tape is
//! append-only, so reverse index order is a valid reverse-topological order.
//! Values are `f64` matrices (scalars are 1x1, row vectors 1xd). Shape
//! violations are programming errors and panic. Gradients accumulate
//! additively: calling `backward` twice without `reset_grads` doubles them.
//!
//! A tape belongs to the worker that created it and is never shared.

use std::sync::Arc;

use ndarray::{s, Array2};

use crate::alignment;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    ConcatCols(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Row(usize, usize),
    StackRows(Vec<usize>),
    MaskedSoftmax {
        logits: usize,
        neighbors: Arc<Vec<Vec<usize>>>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    MaxPool2 {
        x: usize,
        /// Winning source row per (window, column), row-major.
        argmax: Vec<usize>,
    },
    AvgPool2(usize),
    DtwCost {
        x: usize,
        y: usize,
        path: Vec<(usize, usize)>,
    },
    SoftDtw {
        x: usize,
        y: usize,
        gamma: f64,
    },
}

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recording tape. One per training example.
pub struct Tape {
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    ops: Vec<Op>,
    kink_gap: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            kink_gap: f64::INFINITY,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.values.push(value);
        self.grads.push(grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.grads[v.0]
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.values[v.0];
        assert_eq!(m.dim(), (1, 1), "node is not scalar");
        m[[0, 0]]
    }

    /// Smallest margin to a non-differentiable kink (relu zero crossing,
    /// pooling tie, alignment path tie) observed while recording. Finite
    /// difference checks should re-draw inputs when this is tiny.
    pub fn kink_gap(&self) -> f64 {
        self.kink_gap
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.values[a.0].dim();
        let (br, bc) = self.values[b.0].dim();
        assert_eq!(ac, br, "matmul shape mismatch: {ar}x{ac} . {br}x{bc}");
        let value = self.values[a.0].dot(&self.values[b.0]);
        self.push(value, Op::Matmul(a.0, b.0))
    }

    /// Elementwise addition; `b` may also be a 1xd row vector broadcast over
    /// the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let da = self.values[a.0].dim();
        let db = self.values[b.0].dim();
        let value = if da == db {
            &self.values[a.0] + &self.values[b.0]
        } else if db.0 == 1 && da.1 == db.1 {
            let mut out = self.values[a.0].clone();
            let row = self.values[b.0].row(0).to_owned();
            for mut r in out.rows_mut() {
                r += &row;
            }
            out
        } else {
            panic!("add shape mismatch: {da:?} + {db:?}");
        };
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].dim(),
            self.values[b.0].dim(),
            "elementwise multiply shape mismatch"
        );
        let value = &self.values[a.0] * &self.values[b.0];
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        for &x in self.values[a.0].iter() {
            self.kink_gap = self.kink_gap.min(x.abs());
        }
        let value = self.values[a.0].mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.values[a.0].dim();
        let (br, bc) = self.values[b.0].dim();
        assert_eq!(ar, br, "concat rows mismatch: {ar} vs {br}");
        let mut value = Array2::zeros((ar, ac + bc));
        value.slice_mut(s![.., ..ac]).assign(&self.values[a.0]);
        value.slice_mut(s![.., ac..]).assign(&self.values[b.0]);
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.values[a.0].t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].mapv(|x| c * x);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.values[a.0].sum());
        self.push(value, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let value = Array2::from_elem((1, 1), self.values[a.0].sum() / n);
        self.push(value, Op::Mean(a.0))
    }

    /// Extracts row `i` as a 1xd node.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let value = self.values[a.0].row(i).to_owned().insert_axis(ndarray::Axis(0));
        self.push(value, Op::Row(a.0, i))
    }

    /// Stacks 1xd nodes into an Lxd node.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "cannot stack zero rows");
        let d = self.values[rows[0].0].ncols();
        let mut value = Array2::zeros((rows.len(), d));
        for (r, v) in rows.iter().enumerate() {
            assert_eq!(self.values[v.0].dim(), (1, d), "stack_rows wants 1x{d} rows");
            value.row_mut(r).assign(&self.values[v.0].row(0));
        }
        self.push(value, Op::StackRows(rows.iter().map(|v| v.0).collect()))
    }

    /// `1 - v`, built from the primitive set.
    pub fn one_minus(&mut self, v: Var) -> Var {
        let ones = self.constant(Array2::ones(self.values[v.0].raw_dim()));
        let neg = self.scale(v, -1.0);
        self.add(ones, neg)
    }

    /// Row-wise softmax restricted to each row's neighbor set; entries
    /// outside the structure are exactly zero. Every row must have at least
    /// one neighbor.
    pub fn masked_softmax(&mut self, logits: Var, neighbors: Arc<Vec<Vec<usize>>>) -> Var {
        let (n, m) = self.values[logits.0].dim();
        assert_eq!(n, neighbors.len(), "mask rows mismatch");
        let mut value = Array2::zeros((n, m));
        for i in 0..n {
            let nb = &neighbors[i];
            assert!(!nb.is_empty(), "masked_softmax: row {i} has no neighbors");
            let mut max = f64::NEG_INFINITY;
            for &j in nb {
                max = max.max(self.values[logits.0][[i, j]]);
            }
            let mut denom = 0.0;
            for &j in nb {
                let e = (self.values[logits.0][[i, j]] - max).exp();
                value[[i, j]] = e;
                denom += e;
            }
            for &j in nb {
                value[[i, j]] /= denom;
            }
        }
        self.push(value, Op::MaskedSoftmax { logits: logits.0, neighbors })
    }

    /// Row-wise normalization to zero mean and unit (population) variance
    /// with an affine gain/bias, both 1xd.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (n, d) = self.values[x.0].dim();
        assert_eq!(self.values[gain.0].dim(), (1, d), "layer_norm gain must be 1x{d}");
        assert_eq!(self.values[bias.0].dim(), (1, d), "layer_norm bias must be 1x{d}");
        let mut value = Array2::zeros((n, d));
        for i in 0..n {
            let row = self.values[x.0].row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                value[[i, j]] =
                    self.values[gain.0][[0, j]] * xhat + self.values[bias.0][[0, j]];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        )
    }

    /// Stride-2 max pooling along the rows; an odd tail row passes through.
    /// Ties pick the earlier row so the backward routing is deterministic.
    pub fn max_pool_stride2(&mut self, x: Var) -> Var {
        let (n, d) = self.values[x.0].dim();
        assert!(n >= 1);
        let out_rows = n.div_ceil(2);
        let mut value = Array2::zeros((out_rows, d));
        let mut argmax = vec![0usize; out_rows * d];
        for w in 0..out_rows {
            let r0 = 2 * w;
            for c in 0..d {
                if r0 + 1 < n {
                    let a = self.values[x.0][[r0, c]];
                    let b = self.values[x.0][[r0 + 1, c]];
                    self.kink_gap = self.kink_gap.min((a - b).abs());
                    let (best, from) = if b > a { (b, r0 + 1) } else { (a, r0) };
                    value[[w, c]] = best;
                    argmax[w * d + c] = from;
                } else {
                    value[[w, c]] = self.values[x.0][[r0, c]];
                    argmax[w * d + c] = r0;
                }
            }
        }
        self.push(value, Op::MaxPool2 { x: x.0, argmax })
    }

    /// Stride-2 average pooling along the rows; an odd tail row passes
    /// through unscaled.
    pub fn avg_pool_stride2(&mut self, x: Var) -> Var {
        let (n, d) = self.values[x.0].dim();
        assert!(n >= 1);
        let out_rows = n.div_ceil(2);
        let mut value = Array2::zeros((out_rows, d));
        for w in 0..out_rows {
            let r0 = 2 * w;
            for c in 0..d {
                value[[w, c]] = if r0 + 1 < n {
                    0.5 * (self.values[x.0][[r0, c]] + self.values[x.0][[r0 + 1, c]])
                } else {
                    self.values[x.0][[r0, c]]
                };
            }
        }
        self.push(value, Op::AvgPool2(x.0))
    }

    /// Exact alignment cost as a scalar node; the backward pass spreads the
    /// subgradient along the path frozen at forward time.
    pub fn dtw_cost(&mut self, x: Var, y: Var) -> Var {
        let res = alignment::dtw_distance(&self.values[x.0], &self.values[y.0]);
        self.kink_gap = self.kink_gap.min(res.tie_gap);
        let value = Array2::from_elem((1, 1), res.cost);
        self.push(
            value,
            Op::DtwCost {
                x: x.0,
                y: y.0,
                path: res.path,
            },
        )
    }

    /// Smoothed alignment cost as a scalar node.
    pub fn soft_dtw(&mut self, x: Var, y: Var, gamma: f64) -> Var {
        assert!(gamma > 0.0, "gamma must be positive");
        let cost = alignment::soft_dtw(&self.values[x.0], &self.values[y.0], gamma);
        let value = Array2::from_elem((1, 1), cost);
        self.push(value, Op::SoftDtw { x: x.0, y: y.0, gamma })
    }

    // ---- reverse pass ----

    /// Accumulates gradients of a scalar node into every recorded node.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.values[root.0].dim(),
            (1, 1),
            "backward root must be scalar"
        );
        self.backward_seeded(&[(root, Array2::ones((1, 1)))]);
    }

    /// Reverse pass from externally supplied output gradients. Used to chain
    /// a per-example tape behind a loss computed on a separate tape.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Array2<f64>)]) {
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        for (v, g) in seeds {
            assert_eq!(self.values[v.0].dim(), g.dim(), "seed gradient shape mismatch");
            match &mut adj[v.0] {
                Some(a) => *a += g,
                slot => *slot = Some(g.clone()),
            }
        }
        for idx in (0..self.values.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.apply_backward(idx, &g, &mut adj);
            match &mut adj[idx] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }
        for (idx, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                self.grads[idx] += &a;
            }
        }
    }

    fn apply_backward(&self, idx: usize, g: &Array2<f64>, adj: &mut Vec<Option<Array2<f64>>>) {
        fn acc(adj: &mut Vec<Option<Array2<f64>>>, target: usize, contrib: Array2<f64>) {
            match &mut adj[target] {
                Some(a) => *a += &contrib,
                slot => *slot = Some(contrib),
            }
        }
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                acc(adj, *a, g.dot(&self.values[*b].t()));
                acc(adj, *b, self.values[*a].t().dot(g));
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                let db = self.values[*b].dim();
                if db == g.dim() {
                    acc(adj, *b, g.clone());
                } else {
                    // row-broadcast add: fold the gradient over rows
                    let mut folded = Array2::zeros((1, db.1));
                    for r in g.rows() {
                        let mut row = folded.row_mut(0);
                        row += &r;
                    }
                    acc(adj, *b, folded);
                }
            }
            Op::Mul(a, b) => {
                acc(adj, *a, g * &self.values[*b]);
                acc(adj, *b, g * &self.values[*a]);
            }
            Op::Sigmoid(a) => {
                let s = &self.values[idx];
                acc(adj, *a, g * &(s * &s.mapv(|v| 1.0 - v)));
            }
            Op::Tanh(a) => {
                let t = &self.values[idx];
                acc(adj, *a, g * &t.mapv(|v| 1.0 - v * v));
            }
            Op::Relu(a) => {
                let mask = self.values[*a].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                acc(adj, *a, g * &mask);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.values[*a].ncols();
                acc(adj, *a, g.slice(s![.., ..ac]).to_owned());
                acc(adj, *b, g.slice(s![.., ac..]).to_owned());
            }
            Op::Transpose(a) => {
                acc(adj, *a, g.t().to_owned());
            }
            Op::Scale(a, c) => {
                acc(adj, *a, g.mapv(|v| c * v));
            }
            Op::Sum(a) => {
                acc(adj, *a, Array2::from_elem(self.values[*a].raw_dim(), g[[0, 0]]));
            }
            Op::Mean(a) => {
                let n = self.values[*a].len() as f64;
                acc(adj, *a, Array2::from_elem(self.values[*a].raw_dim(), g[[0, 0]] / n));
            }
            Op::Row(a, i) => {
                let mut d = Array2::zeros(self.values[*a].raw_dim());
                d.row_mut(*i).assign(&g.row(0));
                acc(adj, *a, d);
            }
            Op::StackRows(parents) => {
                for (r, p) in parents.iter().enumerate() {
                    acc(adj, *p, g.row(r).to_owned().insert_axis(ndarray::Axis(0)));
                }
            }
            Op::MaskedSoftmax { logits, neighbors } => {
                let sm = &self.values[idx];
                let mut d = Array2::zeros(sm.raw_dim());
                for (i, nb) in neighbors.iter().enumerate() {
                    let mut dot = 0.0;
                    for &j in nb {
                        dot += g[[i, j]] * sm[[i, j]];
                    }
                    for &j in nb {
                        d[[i, j]] = sm[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                acc(adj, *logits, d);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (n, dcols) = self.values[*x].dim();
                let df = dcols as f64;
                let mut dx = Array2::zeros((n, dcols));
                let mut dgain = Array2::zeros((1, dcols));
                let mut dbias = Array2::zeros((1, dcols));
                for i in 0..n {
                    let row = self.values[*x].row(i);
                    let mean = row.sum() / df;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut gsum = 0.0;
                    let mut gxsum = 0.0;
                    for j in 0..dcols {
                        let xhat = (row[j] - mean) * inv;
                        let gj = g[[i, j]] * self.values[*gain][[0, j]];
                        dgain[[0, j]] += g[[i, j]] * xhat;
                        dbias[[0, j]] += g[[i, j]];
                        gsum += gj;
                        gxsum += gj * xhat;
                    }
                    for j in 0..dcols {
                        let xhat = (row[j] - mean) * inv;
                        let gj = g[[i, j]] * self.values[*gain][[0, j]];
                        dx[[i, j]] = inv * (gj - gsum / df - xhat * gxsum / df);
                    }
                }
                acc(adj, *x, dx);
                acc(adj, *gain, dgain);
                acc(adj, *bias, dbias);
            }
            Op::MaxPool2 { x, argmax } => {
                let d = self.values[idx].ncols();
                let mut dx = Array2::zeros(self.values[*x].raw_dim());
                for w in 0..self.values[idx].nrows() {
                    for c in 0..d {
                        dx[[argmax[w * d + c], c]] += g[[w, c]];
                    }
                }
                acc(adj, *x, dx);
            }
            Op::AvgPool2(x) => {
                let n = self.values[*x].nrows();
                let mut dx = Array2::zeros(self.values[*x].raw_dim());
                for w in 0..self.values[idx].nrows() {
                    let r0 = 2 * w;
                    for c in 0..self.values[idx].ncols() {
                        if r0 + 1 < n {
                            dx[[r0, c]] += 0.5 * g[[w, c]];
                            dx[[r0 + 1, c]] += 0.5 * g[[w, c]];
                        } else {
                            dx[[r0, c]] += g[[w, c]];
                        }
                    }
                }
                acc(adj, *x, dx);
            }
            Op::DtwCost { x, y, path } => {
                let (dx, dy) =
                    alignment::path_grad(&self.values[*x], &self.values[*y], path, g[[0, 0]]);
                acc(adj, *x, dx);
                acc(adj, *y, dy);
            }
            Op::SoftDtw { x, y, gamma } => {
                let (_, dx, dy) =
                    alignment::soft_dtw_grad(&self.values[*x], &self.values[*y], *gamma);
                acc(adj, *x, dx.mapv(|v| v * g[[0, 0]]));
                acc(adj, *y, dy.mapv(|v| v * g[[0, 0]]));
            }
        }
    }
}
