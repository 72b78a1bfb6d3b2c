//! Minimal reverse-mode autodiff over 2-D f64 arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes; parents always
//! precede children, so a single reverse sweep propagates gradients. The op
//! set is exactly what the detection model needs: matrix products, residual
//! adds, row softmax, layer norm, sinusoidal position features, the distance
//! bias, and the two set-loss reductions. Every backward formula is checked
//! against central finite differences in the tests below.
//!
//! Nodes created from [`Tape::constant`] are treated as gradient sinks:
//! whole subtrees without differentiable leaves are skipped during the
//! reverse sweep, which is also how frozen parameters are expressed.

use ndarray::{s, Array2, ArrayView2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Raw tape index; valid for indexing the vector from [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Matched positive entries for the focal set loss: (row, class) pairs.
pub type Positives = Vec<(usize, usize)>;

enum Op {
    Leaf,
    /// A · B
    MatMul(NodeId, NodeId),
    /// A · Bᵀ
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// matrix + broadcast row (1×d)
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// n×2 coords -> n×4K sinusoid features.
    Sinusoid {
        coords: NodeId,
        freqs: Vec<f64>,
    },
    /// alpha * dist + beta, with alpha and beta 1×1 nodes and dist constant.
    BiasAffine {
        alpha: NodeId,
        beta: NodeId,
        dist: Array2<f64>,
    },
    /// Sigmoid focal loss summed over every logit entry, normalized.
    FocalSet {
        logits: NodeId,
        positives: Positives,
        gamma: f64,
        alpha: f64,
        norm: f64,
    },
    /// Mean absolute error between selected prediction rows and targets.
    L1Set {
        preds: NodeId,
        targets: Array2<f64>,
        rows: Vec<usize>,
        norm: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Gradient-sink input; backward never descends into it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    /// A · Bᵀ
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let v = self.value(a) + self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let v = self.value(a) - self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    /// `a` (n×d) plus a broadcast row `b` (1×d).
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(b).nrows(), 1, "add_row: rhs must be 1×d");
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "add_row dims");
        let v = self.value(a) + &self.value(b).row(0);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), needs)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        let needs = self.ng(a);
        self.push(v, Op::Scale(a, k), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.ng(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|t| (t - m).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|t| t / sum);
        }
        let needs = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), needs)
    }

    /// Row-wise layer norm with learned gain and bias (both 1×d).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let d = self.value(x).ncols();
        assert_eq!(self.value(gain).dim(), (1, d), "layer_norm gain");
        assert_eq!(self.value(bias).dim(), (1, d), "layer_norm bias");
        let xv = self.value(x);
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut v = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|t| (t - mean) * (t - mean)).mean().unwrap();
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                v[[i, j]] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(v, Op::LayerNorm { x, gain, bias }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Array2::zeros((total, d));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.ncols(), d, "concat_rows width");
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.nrows(), n, "concat_cols height");
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let needs = self.ng(x);
        self.push(v, Op::SliceCols { x, start, len }, needs)
    }

    /// Sinusoidal features of n×2 BEV coordinates.
    ///
    /// Column layout per frequency k: `[sin(w_k x), cos(w_k x), sin(w_k y),
    /// cos(w_k y)]`, so the output width is `4 * freqs.len()`.
    pub fn sinusoid(&mut self, coords: NodeId, freqs: &[f64]) -> NodeId {
        let v = sinusoid_features(&self.value(coords).view(), freqs);
        let needs = self.ng(coords);
        self.push(
            v,
            Op::Sinusoid {
                coords,
                freqs: freqs.to_vec(),
            },
            needs,
        )
    }

    /// `alpha * dist + beta` with scalar (1×1) nodes `alpha`, `beta`.
    ///
    /// `dist` is treated as a constant: gradients flow to the scalars only.
    pub fn bias_affine(&mut self, alpha: NodeId, beta: NodeId, dist: Array2<f64>) -> NodeId {
        assert_eq!(self.value(alpha).dim(), (1, 1));
        assert_eq!(self.value(beta).dim(), (1, 1));
        let a = self.scalar(alpha);
        let b = self.scalar(beta);
        let v = dist.mapv(|d| a * d + b);
        let needs = self.ng(alpha) || self.ng(beta);
        self.push(v, Op::BiasAffine { alpha, beta, dist }, needs)
    }

    /// Sigmoid focal loss over an n×c logit matrix.
    ///
    /// Entries listed in `positives` are supervised toward 1 with weight
    /// `alpha`, every other entry toward 0 with weight `1 - alpha`. The sum
    /// is divided by `norm`.
    pub fn focal_set(
        &mut self,
        logits: NodeId,
        positives: Positives,
        gamma: f64,
        alpha: f64,
        norm: f64,
    ) -> NodeId {
        assert!(norm > 0.0);
        let x = self.value(logits);
        let mut is_pos = Array2::<bool>::from_elem(x.dim(), false);
        for &(r, c) in &positives {
            is_pos[[r, c]] = true;
        }
        let mut total = 0.0;
        for (idx, &t) in x.indexed_iter() {
            // negatives are the positive form mirrored through x -> -x
            total += if is_pos[idx] {
                focal_positive_cost(t, gamma, alpha)
            } else {
                focal_positive_cost(-t, gamma, 1.0 - alpha)
            };
        }
        let v = Array2::from_elem((1, 1), total / norm);
        let needs = self.ng(logits);
        self.push(
            v,
            Op::FocalSet {
                logits,
                positives,
                gamma,
                alpha,
                norm,
            },
            needs,
        )
    }

    /// Mean absolute error between `preds[rows[k], :]` and `targets[k, :]`,
    /// summed and divided by `norm`.
    pub fn l1_set(
        &mut self,
        preds: NodeId,
        targets: Array2<f64>,
        rows: Vec<usize>,
        norm: f64,
    ) -> NodeId {
        assert!(norm > 0.0);
        assert_eq!(targets.nrows(), rows.len());
        assert_eq!(targets.ncols(), self.value(preds).ncols());
        let p = self.value(preds);
        let mut total = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            for j in 0..targets.ncols() {
                total += (p[[r, j]] - targets[[k, j]]).abs();
            }
        }
        let v = Array2::from_elem((1, 1), total / norm);
        let needs = self.ng(preds);
        self.push(
            v,
            Op::L1Set {
                preds,
                targets,
                rows,
                norm,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node;
    /// only differentiable leaves are guaranteed to be populated.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Array2<f64>>> {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        grads
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let col = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *b, col);
                }
            }
            Op::Scale(a, k) => acc(grads, *a, g * *k),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).row(0).to_owned();
                let d = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.dim());
                let mut dgain = Array2::zeros((1, xv.ncols()));
                let mut dbias = Array2::zeros((1, xv.ncols()));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|t| (t - mean) * (t - mean)).mean().unwrap();
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|t| (t - mean) * inv).collect();
                    let gr = g.row(r);
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(gv.iter())
                        .map(|(gg, gain)| gg * gain)
                        .collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                    for j in 0..xv.ncols() {
                        dx[[r, j]] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[[0, j]] += gr[j] * xhat[j];
                        dbias[[0, j]] += gr[j];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.ng(*p) {
                        acc(grads, *p, g.slice(s![at..at + n, ..]).to_owned());
                    }
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.ng(*p) {
                        acc(grads, *p, g.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                dx.slice_mut(s![.., *start..*start + *len]).assign(g);
                acc(grads, *x, dx);
            }
            Op::Sinusoid { coords, freqs } => {
                let c = self.value(*coords);
                let mut dc = Array2::zeros(c.dim());
                for r in 0..c.nrows() {
                    let (x, y) = (c[[r, 0]], c[[r, 1]]);
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for (k, w) in freqs.iter().enumerate() {
                        let base = 4 * k;
                        gx += w * (g[[r, base]] * (w * x).cos() - g[[r, base + 1]] * (w * x).sin());
                        gy += w
                            * (g[[r, base + 2]] * (w * y).cos()
                                - g[[r, base + 3]] * (w * y).sin());
                    }
                    dc[[r, 0]] = gx;
                    dc[[r, 1]] = gy;
                }
                acc(grads, *coords, dc);
            }
            Op::BiasAffine { alpha, beta, dist } => {
                let da: f64 = (g * dist).sum();
                let db: f64 = g.sum();
                acc(grads, *alpha, Array2::from_elem((1, 1), da));
                acc(grads, *beta, Array2::from_elem((1, 1), db));
            }
            Op::FocalSet {
                logits,
                positives,
                gamma,
                alpha,
                norm,
            } => {
                let x = self.value(*logits);
                let mut is_pos = Array2::<bool>::from_elem(x.dim(), false);
                for &(r, c) in positives {
                    is_pos[[r, c]] = true;
                }
                let scale = g[[0, 0]] / norm;
                let mut dx = Array2::zeros(x.dim());
                for (idx, &t) in x.indexed_iter() {
                    let p = sigmoid(t);
                    dx[idx] = if is_pos[idx] {
                        // d/dt [-a (1-p)^g ln p] = a (1-p)^g (g p ln p - (1-p))
                        let one_minus_p_g = (-gamma * softplus(t)).exp();
                        let ln_p = -softplus(-t);
                        alpha * one_minus_p_g * (gamma * p * ln_p - (1.0 - p)) * scale
                    } else {
                        // d/dt [-(1-a) p^g ln(1-p)] = (1-a) p^g (p - g (1-p) ln(1-p))
                        let p_g = (-gamma * softplus(-t)).exp();
                        let ln_1mp = -softplus(t);
                        (1.0 - alpha) * p_g * (p - gamma * (1.0 - p) * ln_1mp) * scale
                    };
                }
                acc(grads, *logits, dx);
            }
            Op::L1Set {
                preds,
                targets,
                rows,
                norm,
            } => {
                let p = self.value(*preds);
                let scale = g[[0, 0]] / norm;
                let mut dp = Array2::zeros(p.dim());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..targets.ncols() {
                        let diff = p[[r, j]] - targets[[k, j]];
                        // subgradient 0 at the kink
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dp[[r, j]] += scale * sign;
                    }
                }
                acc(grads, *preds, dp);
            }
        }
    }
}

/// Focal positive-example cost of a logit: `-alpha * (1-p)^gamma * ln p`
/// with `p = sigmoid(x)`, in overflow-safe form. Used both by the focal set
/// loss and as the classification term of the matching cost.
pub fn focal_positive_cost(logit: f64, gamma: f64, alpha: f64) -> f64 {
    alpha * (-gamma * softplus(logit)).exp() * softplus(-logit)
}

/// Plain (non-tape) sinusoid features; the op shares this implementation.
pub fn sinusoid_features(coords: &ArrayView2<'_, f64>, freqs: &[f64]) -> Array2<f64> {
    assert_eq!(coords.ncols(), 2, "sinusoid expects n×2 coords");
    let mut out = Array2::zeros((coords.nrows(), 4 * freqs.len()));
    for r in 0..coords.nrows() {
        let (x, y) = (coords[[r, 0]], coords[[r, 1]]);
        for (k, w) in freqs.iter().enumerate() {
            let base = 4 * k;
            out[[r, base]] = (w * x).sin();
            out[[r, base + 1]] = (w * x).cos();
            out[[r, base + 2]] = (w * y).sin();
            out[[r, base + 3]] = (w * y).cos();
        }
    }
    out
}

/// Geometric frequency ladder for a dimension `d` divisible by 4, spanning
/// wavelengths `[lambda_min, lambda_max]` meters.
pub fn pe_frequencies(d: usize, lambda_min: f64, lambda_max: f64) -> Vec<f64> {
    assert_eq!(d % 4, 0, "pe dimension must be divisible by 4");
    let k = d / 4;
    (0..k)
        .map(|i| {
            let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            let lambda = lambda_max * (lambda_min / lambda_max).powf(t);
            2.0 * std::f64::consts::PI / lambda
        })
        .collect()
}
