//! Parameter storage, graph-building blocks, and the optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted paths
//! (`dec.3.cross.wq`, `pme.alpha`, ...). A [`Graph`] wraps a [`Tape`]
//! together with a store reference; model code asks for parameters by key
//! and gets tape nodes back, either differentiable or frozen. After the
//! backward sweep the per-key gradients are collected in key order, which
//! keeps every reduction deterministic.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::rng;
use crate::tensor::{NodeId, Tape};

/// Named f64 parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, value: Array2<f64>) {
        self.map.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> &Array2<f64> {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter '{key}'"))
    }

    pub fn try_get(&self, key: &str) -> Option<&Array2<f64>> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> &mut Array2<f64> {
        self.map
            .get_mut(key)
            .unwrap_or_else(|| panic!("missing parameter '{key}'"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.map.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Xavier-uniform init seeded independently per key, so parameter values
    /// do not depend on creation order.
    pub fn init_xavier(&mut self, key: &str, rows: usize, cols: usize, seed: u64) {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let mut r = rng::stream(seed, key, 0);
        let w = Array2::from_shape_fn((rows, cols), |_| r.random_range(-a..a));
        self.insert(key, w);
    }

    pub fn init_zeros(&mut self, key: &str, rows: usize, cols: usize) {
        self.insert(key, Array2::zeros((rows, cols)));
    }

    pub fn init_const(&mut self, key: &str, rows: usize, cols: usize, value: f64) {
        self.insert(key, Array2::from_elem((rows, cols), value));
    }
}

/// A tape plus the parameter store feeding it.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: BTreeMap<String, NodeId>,
    trainable: Box<dyn Fn(&str) -> bool + Send + 'p>,
}

impl<'p> Graph<'p> {
    /// Graph in which every parameter is differentiable.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: Box::new(|_| true),
        }
    }

    /// Graph in which only keys accepted by `trainable` receive gradients;
    /// everything else enters the tape as a frozen constant.
    pub fn with_trainable(
        params: &'p ParamStore,
        trainable: impl Fn(&str) -> bool + Send + 'p,
    ) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: Box::new(trainable),
        }
    }

    /// Bind a parameter onto the tape (cached per key).
    pub fn param(&mut self, key: &str) -> NodeId {
        if let Some(id) = self.bound.get(key) {
            return *id;
        }
        let value = self.params.get(key).clone();
        let id = if (self.trainable)(key) {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(key.to_string(), id);
        id
    }

    /// Keys bound so far (whether trainable or frozen).
    pub fn touched_keys(&self) -> Vec<String> {
        self.bound.keys().cloned().collect()
    }

    /// The backing parameter store.
    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Run backward from `root` and collect gradients per bound trainable key.
    pub fn param_grads(&self, root: NodeId) -> BTreeMap<String, Array2<f64>> {
        let grads = self.tape.backward(root);
        let mut out = BTreeMap::new();
        for (key, id) in &self.bound {
            if let Some(g) = grads[id.index()].clone() {
                out.insert(key.clone(), g);
            }
        }
        out
    }
}

/// `x · W + b` with keys `{prefix}.w`, `{prefix}.b`.
pub fn linear(g: &mut Graph<'_>, x: NodeId, prefix: &str) -> NodeId {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let xw = g.tape.matmul(x, w);
    g.tape.add_row(xw, b)
}

/// Two-layer feed-forward map with a ReLU between.
pub fn mlp2(g: &mut Graph<'_>, x: NodeId, prefix: &str) -> NodeId {
    let h = linear(g, x, &format!("{prefix}.l1"));
    let h = g.tape.relu(h);
    linear(g, h, &format!("{prefix}.l2"))
}

/// Row-wise layer norm with keys `{prefix}.g`, `{prefix}.b`.
pub fn layer_norm(g: &mut Graph<'_>, x: NodeId, prefix: &str) -> NodeId {
    let gain = g.param(&format!("{prefix}.g"));
    let bias = g.param(&format!("{prefix}.b"));
    g.tape.layer_norm(x, gain, bias)
}

/// Attention over already-projected q/k/v: head split, scaled dot products,
/// optional additive logit bias, softmax, and the output projection
/// `{prefix}.o`.
pub fn attention_core(
    g: &mut Graph<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    bias: Option<NodeId>,
    prefix: &str,
) -> NodeId {
    let d = g.tape.value(q).ncols();
    assert_eq!(d % heads, 0, "attention dim not divisible by heads");
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice_cols(q, h * hd, hd);
        let kh = g.tape.slice_cols(k, h * hd, hd);
        let vh = g.tape.slice_cols(v, h * hd, hd);
        let logits = g.tape.matmul_t(qh, kh);
        let logits = g.tape.scale(logits, scale);
        let logits = match bias {
            Some(m) => g.tape.add(logits, m),
            None => logits,
        };
        let weights = g.tape.softmax_rows(logits);
        outs.push(g.tape.matmul(weights, vh));
    }
    let cat = g.tape.concat_cols(&outs);
    linear(g, cat, &format!("{prefix}.o"))
}

/// Multi-head attention with optional additive logit bias.
///
/// `q_in`, `k_in`, `v_in` are n×d / m×d / m×d; position embeddings are the
/// caller's responsibility (added into `q_in` / `k_in` beforehand). The bias
/// matrix, when present, is added to the pre-softmax logits of every head.
pub fn attention(
    g: &mut Graph<'_>,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    heads: usize,
    bias: Option<NodeId>,
    prefix: &str,
) -> NodeId {
    let q = linear(g, q_in, &format!("{prefix}.q"));
    let k = linear(g, k_in, &format!("{prefix}.k"));
    let v = linear(g, v_in, &format!("{prefix}.v"));
    attention_core(g, q, k, v, heads, bias, prefix)
}

/// Attention weights (softmax rows of head 0) for inspection in tests.
pub fn attention_weights(
    g: &mut Graph<'_>,
    q_in: NodeId,
    k_in: NodeId,
    heads: usize,
    bias: Option<NodeId>,
    prefix: &str,
) -> NodeId {
    let d = g.tape.value(q_in).ncols();
    let hd = d / heads;
    let q = linear(g, q_in, &format!("{prefix}.q"));
    let k = linear(g, k_in, &format!("{prefix}.k"));
    let qh = g.tape.slice_cols(q, 0, hd);
    let kh = g.tape.slice_cols(k, 0, hd);
    let logits = g.tape.matmul_t(qh, kh);
    let logits = g.tape.scale(logits, 1.0 / (hd as f64).sqrt());
    let logits = match bias {
        Some(m) => g.tape.add(logits, m),
        None => logits,
    };
    g.tape.softmax_rows(logits)
}

/// Register xavier/zero parameters for a linear layer.
pub fn init_linear(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, seed: u64) {
    store.init_xavier(&format!("{prefix}.w"), din, dout, seed);
    store.init_zeros(&format!("{prefix}.b"), 1, dout);
}

pub fn init_mlp2(store: &mut ParamStore, prefix: &str, din: usize, dh: usize, dout: usize, seed: u64) {
    init_linear(store, &format!("{prefix}.l1"), din, dh, seed);
    init_linear(store, &format!("{prefix}.l2"), dh, dout, seed);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.init_const(&format!("{prefix}.g"), 1, d, 1.0);
    store.init_zeros(&format!("{prefix}.b"), 1, d);
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, seed);
    }
}

/// Decoupled-weight-decay adaptive optimizer.
///
/// Weight decay applies only to matrix weights (keys ending in `.w`);
/// biases, norm parameters, anchors and scalars are not decayed.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Only keys present in `grads` are touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (key, grad) in grads {
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self
                .v
                .entry(key.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let theta = params.get_mut(key);
            let decay = if key.ends_with(".w") {
                self.weight_decay
            } else {
                0.0
            };
            for ((t, (m, v)), g) in theta
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(grad.iter())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *t -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *t);
            }
        }
    }
}

/// Clip a gradient set by global L2 norm; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Accumulate `delta` into `into`, key-wise.
pub fn accumulate_grads(
    into: &mut BTreeMap<String, Array2<f64>>,
    delta: &BTreeMap<String, Array2<f64>>,
) {
    for (k, g) in delta {
        match into.get_mut(k) {
            Some(acc) => *acc += g,
            None => {
                into.insert(k.clone(), g.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn param_binding_is_cached_and_respects_freezing() {
        let mut store = ParamStore::new();
        store.init_xavier("a.w", 2, 2, 0);
        store.init_xavier("pme.w", 2, 2, 0);
        let mut g = Graph::with_trainable(&store, |k| k.starts_with("pme."));
        let x = g.tape.constant(array![[1.0, 2.0]]);
        let a1 = g.param("a.w");
        let a2 = g.param("a.w");
        assert_eq!(a1, a2);
        let p = g.param("pme.w");
        let h = g.tape.matmul(x, a1);
        let y = g.tape.matmul(h, p);
        let s = g.tape.matmul_t(y, y);
        let grads = g.param_grads(s);
        assert!(grads.contains_key("pme.w"));
        assert!(!grads.contains_key("a.w"));
    }

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let mut store = ParamStore::new();
        store.insert("x", array![[2.0, -3.0]]);
        let mut opt = AdamW::new(0.0);
        let loss = |p: &ParamStore| -> f64 { p.get("x").iter().map(|v| v * v).sum() };
        let start = loss(&store);
        for _ in 0..200 {
            let g = store.get("x").mapv(|v| 2.0 * v);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), g);
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(loss(&store) < start * 0.01);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut store = ParamStore::new();
        store.insert("lin.w", array![[1.0]]);
        store.insert("lin.b", array![[1.0]]);
        let mut opt = AdamW::new(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("lin.w".to_string(), array![[0.0]]);
        grads.insert("lin.b".to_string(), array![[0.0]]);
        opt.step(&mut store, &grads, 0.1);
        assert!(store.get("lin.w")[[0, 0]] < 1.0);
        assert_eq!(store.get("lin.b")[[0, 0]], 1.0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), array![[3.0, 4.0]]);
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = grads["a"].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
