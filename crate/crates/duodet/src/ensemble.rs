//! Proximity-based modality ensemble and the baseline ensemble strategies.
//!
//! The ensemble takes the three branches' box features, projects each with
//! its own linear map, and runs one cross-attention layer in which the
//! joint-branch features query the concatenation `[LC; L; C]`. Attention
//! logits carry an additive bias `alpha * dist + beta`, where `dist` is the
//! BEV center distance between the query's box and each key's box: a
//! negative `alpha` suppresses interaction between far-apart boxes, which is
//! what keeps a corrupted branch's unrelated candidates from polluting a
//! good one. A dedicated box head decodes the ensembled features against the
//! joint branch's anchors.
//!
//! `beta` shifts every logit in a row equally and therefore cancels in the
//! row softmax; it is kept for fidelity to the bias's affine form and its
//! inertness is pinned by tests.
//!
//! Baselines for comparison: top-k and distance-NMS over the pooled branch
//! predictions, and the ensemble without the proximity bias.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::config::{LossWeights, ModelConfig};
use crate::decoder::{
    box_head_nodes, init_box_head, BoxFeatures, BoxPredictionSet, BranchTag, PredictionNodes,
};
use crate::error::{Error, Result};
use crate::matching::{self, MatchResult};
use crate::nn::{self, Graph, ParamStore};
use crate::tensor::{pe_frequencies, sinusoid_features, NodeId};
use crate::world::GroundTruthBox;

/// Learnable scalars of the proximity bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximityBiasParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Register every ensemble parameter under the `pme.` prefix.
pub fn init_pme_params(store: &mut ParamStore, cfg: &ModelConfig, classes: usize, seed: u64) {
    let d = cfg.dim;
    for p in ["pme.g_lc", "pme.g_l", "pme.g_c"] {
        nn::init_linear(store, p, d, d, seed);
    }
    nn::init_attention(store, "pme.attn", d, seed);
    nn::init_layer_norm(store, "pme.norm", d);
    nn::init_mlp2(store, "pme.pe", d, d, d, seed);
    init_box_head(store, "pme.head", d, classes, seed);
    store.init_const("pme.alpha", 1, 1, -0.5);
    store.init_zeros("pme.beta", 1, 1);
}

/// True when a store already carries ensemble parameters.
pub fn has_pme_params(store: &ParamStore) -> bool {
    store.contains("pme.alpha")
}

/// N×3N center-distance matrix: rows follow the joint branch's centers,
/// columns the concatenation [LC | L | C].
pub fn center_distances(
    centers_lc: &Array2<f64>,
    centers_l: &Array2<f64>,
    centers_c: &Array2<f64>,
) -> Array2<f64> {
    let n = centers_lc.nrows();
    assert_eq!(centers_l.nrows(), n);
    assert_eq!(centers_c.nrows(), n);
    let mut dist = Array2::zeros((n, 3 * n));
    for i in 0..n {
        for (block, c) in [centers_lc, centers_l, centers_c].into_iter().enumerate() {
            for j in 0..n {
                let dx = centers_lc[[i, 0]] - c[[j, 0]];
                let dy = centers_lc[[i, 1]] - c[[j, 1]];
                dist[[i, block * n + j]] = (dx * dx + dy * dy).sqrt();
            }
        }
    }
    dist
}

/// The attention bias `alpha * dist + beta` as plain values.
pub fn proximity_bias(
    centers_lc: &Array2<f64>,
    centers_l: &Array2<f64>,
    centers_c: &Array2<f64>,
    p: ProximityBiasParams,
) -> Array2<f64> {
    center_distances(centers_lc, centers_l, centers_c).mapv(|d| p.alpha * d + p.beta)
}

/// Apply a branch's projection to its box features (plain values).
pub fn project_branch(
    params: &ParamStore,
    z: &BoxFeatures,
    branch: BranchTag,
) -> Result<Array2<f64>> {
    let mut g = Graph::new(params);
    let x = g.tape.constant(z.features.clone());
    let out = project_branch_node(&mut g, x, branch)?;
    Ok(g.tape.value(out).clone())
}

fn project_branch_node(g: &mut Graph<'_>, z: NodeId, branch: BranchTag) -> Result<NodeId> {
    let prefix = match branch {
        BranchTag::Lc => "pme.g_lc",
        BranchTag::L => "pme.g_l",
        BranchTag::C => "pme.g_c",
        BranchTag::Ensemble => {
            return Err(Error::Unknown {
                what: "projection branch".into(),
                value: "E".into(),
            })
        }
    };
    Ok(nn::linear(g, z, prefix))
}

/// Tape-level ensemble inputs: branch features as nodes, centers as values.
pub struct PmeNodeInputs {
    pub z_lc: NodeId,
    pub z_l: NodeId,
    pub z_c: NodeId,
    pub centers_lc: Array2<f64>,
    pub centers_l: Array2<f64>,
    pub centers_c: Array2<f64>,
    pub anchors: NodeId,
}

/// One projected key block and the box centers its positional embedding and
/// bias columns derive from.
struct KeyBlock {
    projected: NodeId,
    centers: Array2<f64>,
}

/// The ensemble attention tail: query block attends over ordered key blocks
/// with center-derived embeddings and the optional proximity bias.
fn attend_tail(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    query: &KeyBlock,
    keys: &[KeyBlock],
    use_bias: bool,
) -> NodeId {
    let freqs = pe_frequencies(cfg.dim, cfg.pe_wavelength_min, cfg.pe_wavelength_max);
    let pe_q_sin = g
        .tape
        .constant(sinusoid_features(&query.centers.view(), &freqs));
    let pe_q = nn::mlp2(g, pe_q_sin, "pme.pe");
    let key_centers = {
        let total: usize = keys.iter().map(|k| k.centers.nrows()).sum();
        let mut cat = Array2::zeros((total, 2));
        let mut at = 0;
        for k in keys {
            cat.slice_mut(ndarray::s![at..at + k.centers.nrows(), ..])
                .assign(&k.centers);
            at += k.centers.nrows();
        }
        cat
    };
    let pe_k_sin = g
        .tape
        .constant(sinusoid_features(&key_centers.view(), &freqs));
    let pe_k = nn::mlp2(g, pe_k_sin, "pme.pe");

    let key_nodes: Vec<NodeId> = keys.iter().map(|k| k.projected).collect();
    let keys_cat = g.tape.concat_rows(&key_nodes);
    let q_in = g.tape.add(query.projected, pe_q);
    let k_in = g.tape.add(keys_cat, pe_k);

    let bias = if use_bias {
        let n = query.centers.nrows();
        let m = key_centers.nrows();
        let mut dist = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let dx = query.centers[[i, 0]] - key_centers[[j, 0]];
                let dy = query.centers[[i, 1]] - key_centers[[j, 1]];
                dist[[i, j]] = (dx * dx + dy * dy).sqrt();
            }
        }
        let alpha = g.param("pme.alpha");
        let beta = g.param("pme.beta");
        Some(g.tape.bias_affine(alpha, beta, dist))
    } else {
        None
    };

    let attn = nn::attention(g, q_in, k_in, keys_cat, cfg.pme_heads, bias, "pme.attn");
    let res = g.tape.add(query.projected, attn);
    nn::layer_norm(g, res, "pme.norm")
}

/// Ensemble forward on the tape: projected branches, biased cross-attention,
/// and the dedicated head decoding against the joint branch's anchors.
pub fn pme_forward_nodes(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    inputs: &PmeNodeInputs,
    use_bias: bool,
) -> Result<(NodeId, PredictionNodes)> {
    let n = inputs.centers_lc.nrows();
    for (name, z) in [("LC", inputs.z_lc), ("L", inputs.z_l), ("C", inputs.z_c)] {
        let dim = g.tape.value(z).dim();
        if dim != (n, cfg.dim) {
            return Err(Error::ShapeMismatch {
                context: format!("ensemble features {name}"),
                expected: format!("({n}, {})", cfg.dim),
                got: format!("{dim:?}"),
            });
        }
    }
    let q_lc = project_branch_node(g, inputs.z_lc, BranchTag::Lc)?;
    let q_l = project_branch_node(g, inputs.z_l, BranchTag::L)?;
    let q_c = project_branch_node(g, inputs.z_c, BranchTag::C)?;
    let query = KeyBlock {
        projected: q_lc,
        centers: inputs.centers_lc.clone(),
    };
    let keys = [
        KeyBlock {
            projected: q_lc,
            centers: inputs.centers_lc.clone(),
        },
        KeyBlock {
            projected: q_l,
            centers: inputs.centers_l.clone(),
        },
        KeyBlock {
            projected: q_c,
            centers: inputs.centers_c.clone(),
        },
    ];
    let z_e = attend_tail(g, cfg, &query, &keys, use_bias);
    let preds = box_head_nodes(g, cfg, z_e, inputs.anchors, BranchTag::Ensemble, "pme.head");
    Ok((z_e, preds))
}

/// Plain-value ensemble inputs.
#[derive(Debug, Clone)]
pub struct PmeInputs {
    pub z_lc: Array2<f64>,
    pub z_l: Array2<f64>,
    pub z_c: Array2<f64>,
    pub centers_lc: Array2<f64>,
    pub centers_l: Array2<f64>,
    pub centers_c: Array2<f64>,
    pub anchors: Array2<f64>,
}

impl PmeInputs {
    /// Assemble ensemble inputs from a full three-branch forward pass.
    pub fn from_branches(
        branches: &BTreeMap<BranchTag, (BoxFeatures, BoxPredictionSet)>,
    ) -> Result<Self> {
        let get = |tag: BranchTag| {
            branches
                .get(&tag)
                .ok_or_else(|| Error::MissingTokens("ensemble".into(), tag.to_string()))
        };
        let (f_lc, p_lc) = get(BranchTag::Lc)?;
        let (f_l, p_l) = get(BranchTag::L)?;
        let (f_c, p_c) = get(BranchTag::C)?;
        Ok(PmeInputs {
            z_lc: f_lc.features.clone(),
            z_l: f_l.features.clone(),
            z_c: f_c.features.clone(),
            centers_lc: p_lc.centers.clone(),
            centers_l: p_l.centers.clone(),
            centers_c: p_c.centers.clone(),
            anchors: p_lc.anchors.clone(),
        })
    }
}

/// Bind plain ensemble inputs onto a tape as frozen constants.
pub fn node_inputs(g: &mut Graph<'_>, inputs: &PmeInputs) -> PmeNodeInputs {
    PmeNodeInputs {
        z_lc: g.tape.constant(inputs.z_lc.clone()),
        z_l: g.tape.constant(inputs.z_l.clone()),
        z_c: g.tape.constant(inputs.z_c.clone()),
        centers_lc: inputs.centers_lc.clone(),
        centers_l: inputs.centers_l.clone(),
        centers_c: inputs.centers_c.clone(),
        anchors: g.tape.constant(inputs.anchors.clone()),
    }
}

/// Plain-value ensemble forward.
pub fn pme_forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &PmeInputs,
    use_bias: bool,
) -> Result<(BoxFeatures, BoxPredictionSet)> {
    let mut g = Graph::new(params);
    let nodes = node_inputs(&mut g, inputs);
    let (z_e, preds) = pme_forward_nodes(&mut g, cfg, &nodes, use_bias)?;
    let features = BoxFeatures {
        branch: BranchTag::Ensemble,
        features: g.tape.value(z_e).clone(),
    };
    let values = crate::decoder::extract_predictions(&g, &preds, &inputs.anchors);
    Ok((features, values))
}

/// Head-0 ensemble attention weights (N×3N), for inspection.
pub fn pme_attention_weights(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &PmeInputs,
    use_bias: bool,
) -> Result<Array2<f64>> {
    let mut g = Graph::new(params);
    let nodes = node_inputs(&mut g, inputs);
    let q_lc = project_branch_node(&mut g, nodes.z_lc, BranchTag::Lc)?;
    let q_l = project_branch_node(&mut g, nodes.z_l, BranchTag::L)?;
    let q_c = project_branch_node(&mut g, nodes.z_c, BranchTag::C)?;
    let freqs = pe_frequencies(cfg.dim, cfg.pe_wavelength_min, cfg.pe_wavelength_max);
    let pe_q_sin = g
        .tape
        .constant(sinusoid_features(&inputs.centers_lc.view(), &freqs));
    let pe_q = nn::mlp2(&mut g, pe_q_sin, "pme.pe");
    let n = inputs.centers_lc.nrows();
    let mut key_centers = Array2::zeros((3 * n, 2));
    for (b, c) in [&inputs.centers_lc, &inputs.centers_l, &inputs.centers_c]
        .into_iter()
        .enumerate()
    {
        key_centers
            .slice_mut(ndarray::s![b * n..(b + 1) * n, ..])
            .assign(c);
    }
    let pe_k_sin = g
        .tape
        .constant(sinusoid_features(&key_centers.view(), &freqs));
    let pe_k = nn::mlp2(&mut g, pe_k_sin, "pme.pe");
    let keys_cat = g.tape.concat_rows(&[q_lc, q_l, q_c]);
    let q_in = g.tape.add(q_lc, pe_q);
    let k_in = g.tape.add(keys_cat, pe_k);
    let bias = if use_bias {
        let dist = center_distances(&inputs.centers_lc, &inputs.centers_l, &inputs.centers_c);
        let alpha = g.param("pme.alpha");
        let beta = g.param("pme.beta");
        Some(g.tape.bias_affine(alpha, beta, dist))
    } else {
        None
    };
    let w = nn::attention_weights(&mut g, q_in, k_in, cfg.pme_heads, bias, "pme.attn");
    Ok(g.tape.value(w).clone())
}

/// Ensemble loss: Hungarian matching on the ensembled predictions, then
/// `w_reg * L1 + w_cls * focal`, exactly as for a decoding branch.
pub fn pme_loss(
    preds: &BoxPredictionSet,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Result<(f64, MatchResult)> {
    let cost = matching::pairwise_cost(preds, gts, w);
    let m = matching::hungarian_assign(&cost)?;
    let l1 = matching::l1_reg_loss(preds, gts, &m);
    let positives: Vec<(usize, usize)> = m
        .pairs
        .iter()
        .map(|(q, g)| (*q, gts[*g].class_id))
        .collect();
    let focal = matching::focal_loss(&preds.logits, &positives, w.focal_gamma, w.focal_alpha);
    Ok((w.w_reg * l1 + w.w_cls * focal, m))
}

/// Per-row confidence: the maximum class sigmoid score.
pub fn confidence(logits: &Array2<f64>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .map(|x| 1.0 / (1.0 + (-x).exp()))
                .fold(f64::MIN, f64::max)
        })
        .collect()
}

/// Pool the three branches' predictions into one 3N-row set, ordered
/// [LC | L | C].
fn pool_branches(
    branch_preds: &BTreeMap<BranchTag, BoxPredictionSet>,
) -> Result<BoxPredictionSet> {
    let mut boxes = Vec::new();
    let mut logits = Vec::new();
    let mut centers = Vec::new();
    let mut anchors = Vec::new();
    let mut cols_boxes = 0;
    let mut cols_logits = 0;
    for tag in [BranchTag::Lc, BranchTag::L, BranchTag::C] {
        let p = branch_preds
            .get(&tag)
            .ok_or_else(|| Error::MissingTokens("ensemble pool".into(), tag.to_string()))?;
        cols_boxes = p.boxes.ncols();
        cols_logits = p.logits.ncols();
        boxes.extend(p.boxes.iter().copied());
        logits.extend(p.logits.iter().copied());
        centers.extend(p.centers.iter().copied());
        anchors.extend(p.anchors.iter().copied());
    }
    let rows = boxes.len() / cols_boxes;
    Ok(BoxPredictionSet {
        branch: BranchTag::Ensemble,
        boxes: Array2::from_shape_vec((rows, cols_boxes), boxes).expect("pool shape"),
        logits: Array2::from_shape_vec((rows, cols_logits), logits).expect("pool shape"),
        centers: Array2::from_shape_vec((rows, 2), centers).expect("pool shape"),
        anchors: Array2::from_shape_vec((rows, 2), anchors).expect("pool shape"),
    })
}

fn take_rows(p: &BoxPredictionSet, rows: &[usize]) -> BoxPredictionSet {
    let pick =
        |a: &Array2<f64>| Array2::from_shape_fn((rows.len(), a.ncols()), |(i, j)| a[[rows[i], j]]);
    BoxPredictionSet {
        branch: BranchTag::Ensemble,
        boxes: pick(&p.boxes),
        logits: pick(&p.logits),
        centers: pick(&p.centers),
        anchors: pick(&p.anchors),
    }
}

/// Confidence-ordered row indices (ties broken by pool index).
fn by_confidence(p: &BoxPredictionSet) -> Vec<usize> {
    let conf = confidence(&p.logits);
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|a, b| conf[*b].partial_cmp(&conf[*a]).unwrap().then(a.cmp(b)));
    idx
}

/// Keep the k most confident pooled predictions.
pub fn ensemble_topk(
    branch_preds: &BTreeMap<BranchTag, BoxPredictionSet>,
    k: usize,
) -> Result<BoxPredictionSet> {
    let pooled = pool_branches(branch_preds)?;
    let mut idx = by_confidence(&pooled);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(take_rows(&pooled, &idx))
}

/// Greedy confidence-ordered suppression by center distance.
pub fn ensemble_nms(
    branch_preds: &BTreeMap<BranchTag, BoxPredictionSet>,
    dist_threshold: f64,
) -> Result<BoxPredictionSet> {
    let pooled = pool_branches(branch_preds)?;
    let order = by_confidence(&pooled);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let close = kept.iter().any(|&j| {
            let dx = pooled.centers[[i, 0]] - pooled.centers[[j, 0]];
            let dy = pooled.centers[[i, 1]] - pooled.centers[[j, 1]];
            (dx * dx + dy * dy).sqrt() <= dist_threshold
        });
        if !close {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(take_rows(&pooled, &kept))
}

/// The ensemble without the proximity bias (M = 0).
pub fn ensemble_nme(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &PmeInputs,
) -> Result<(BoxFeatures, BoxPredictionSet)> {
    pme_forward(params, cfg, inputs, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn randn(rng: &mut ChaCha12Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
    }

    fn random_inputs(seed: u64, n: usize, d: usize) -> PmeInputs {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        PmeInputs {
            z_lc: randn(&mut rng, n, d, 1.0),
            z_l: randn(&mut rng, n, d, 1.0),
            z_c: randn(&mut rng, n, d, 1.0),
            centers_lc: randn(&mut rng, n, 2, 10.0),
            centers_l: randn(&mut rng, n, 2, 10.0),
            centers_c: randn(&mut rng, n, 2, 10.0),
            anchors: randn(&mut rng, n, 2, 10.0),
        }
    }

    fn pme_store(c: &ModelConfig, classes: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_pme_params(&mut s, c, classes, seed);
        s
    }

    #[test]
    fn bias_zero_params_give_zero_matrix() {
        let c = array![[0.0, 0.0], [1.0, 2.0]];
        let m = proximity_bias(
            &c,
            &c,
            &c,
            ProximityBiasParams {
                alpha: 0.0,
                beta: 0.0,
            },
        );
        assert_eq!(m.dim(), (2, 6));
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bias_three_four_five_triangle() {
        let lc = array![[0.0, 0.0]];
        let other = array![[3.0, 4.0]];
        let m = proximity_bias(
            &lc,
            &other,
            &lc,
            ProximityBiasParams {
                alpha: 1.0,
                beta: 0.0,
            },
        );
        assert_eq!(m.dim(), (1, 3));
        assert_eq!(m[[0, 1]], 5.0);
    }

    #[test]
    fn bias_shape_is_n_by_3n() {
        let c = Array2::zeros((4, 2));
        let m = proximity_bias(
            &c,
            &c,
            &c,
            ProximityBiasParams {
                alpha: 0.3,
                beta: 0.1,
            },
        );
        assert_eq!(m.dim(), (4, 12));
    }

    #[test]
    fn bias_matches_closed_form_on_random_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..=6);
            let lc = randn(&mut rng, n, 2, 20.0);
            let l = randn(&mut rng, n, 2, 20.0);
            let c = randn(&mut rng, n, 2, 20.0);
            let p = ProximityBiasParams {
                alpha: rng.random_range(-2.0..2.0),
                beta: rng.random_range(-2.0..2.0),
            };
            let m = proximity_bias(&lc, &l, &c, p);
            for i in 0..n {
                for (b, blk) in [&lc, &l, &c].into_iter().enumerate() {
                    for j in 0..n {
                        let dx = lc[[i, 0]] - blk[[j, 0]];
                        let dy = lc[[i, 1]] - blk[[j, 1]];
                        let expected = p.alpha * (dx * dx + dy * dy).sqrt() + p.beta;
                        assert!((m[[i, b * n + j]] - expected).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn projection_contracts() {
        let c = cfg();
        let mut store = pme_store(&c, 4, 7);
        // identity-initialized projection: output equals input
        let eye = Array2::from_shape_fn((c.dim, c.dim), |(i, j)| if i == j { 1.0 } else { 0.0 });
        store.insert("pme.g_l.w", eye);
        store.insert("pme.g_l.b", Array2::zeros((1, c.dim)));
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let z = BoxFeatures {
            branch: BranchTag::L,
            features: randn(&mut rng, 5, c.dim, 1.0),
        };
        let out = project_branch(&store, &z, BranchTag::L).unwrap();
        assert_eq!(out, z.features);

        // zero input: bias row broadcast
        let mut rng2 = ChaCha12Rng::seed_from_u64(2);
        store.insert("pme.g_c.b", randn(&mut rng2, 1, c.dim, 0.5));
        let zero = BoxFeatures {
            branch: BranchTag::C,
            features: Array2::zeros((3, c.dim)),
        };
        let out = project_branch(&store, &zero, BranchTag::C).unwrap();
        for r in 0..3 {
            for d in 0..c.dim {
                assert_eq!(out[[r, d]], store.get("pme.g_c.b")[[0, d]]);
            }
        }

        // different branches project differently
        let z2 = BoxFeatures {
            branch: BranchTag::L,
            features: randn(&mut rng, 4, c.dim, 1.0),
        };
        let a = project_branch(&store, &z2, BranchTag::L).unwrap();
        let b = project_branch(&store, &z2, BranchTag::C).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_bias_matrix_equals_unbiased_attention() {
        let c = cfg();
        let mut store = pme_store(&c, 4, 3);
        store.insert("pme.alpha", array![[0.0]]);
        store.insert("pme.beta", array![[0.0]]);
        let inputs = random_inputs(5, 6, c.dim);
        let biased = pme_forward(&store, &c, &inputs, true).unwrap();
        let unbiased = pme_forward(&store, &c, &inputs, false).unwrap();
        let max_diff = biased
            .0
            .features
            .iter()
            .zip(unbiased.0.features.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "{max_diff}");
    }

    #[test]
    fn beta_cancels_in_attention_weights() {
        let c = cfg();
        let inputs = random_inputs(11, 5, c.dim);
        let mut reference = None;
        for beta in [-10.0, 0.0, 10.0] {
            let mut store = pme_store(&c, 4, 3);
            store.insert("pme.alpha", array![[-0.7]]);
            store.insert("pme.beta", array![[beta]]);
            let w = pme_attention_weights(&store, &c, &inputs, true).unwrap();
            match &reference {
                None => reference = Some(w),
                Some(r) => {
                    let max_diff = r
                        .iter()
                        .zip(w.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max);
                    assert!(max_diff <= 1e-6, "beta {beta}: {max_diff}");
                }
            }
        }
    }

    #[test]
    fn strongly_negative_alpha_concentrates_on_nearest_key() {
        let c = cfg();
        let mut store = pme_store(&c, 4, 3);
        store.insert("pme.alpha", array![[-1e6]]);
        store.insert("pme.beta", array![[0.0]]);
        let inputs = random_inputs(13, 4, c.dim);
        let w = pme_attention_weights(&store, &c, &inputs, true).unwrap();
        let dist = center_distances(&inputs.centers_lc, &inputs.centers_l, &inputs.centers_c);
        for i in 0..4 {
            let nearest = (0..12)
                .min_by(|a, b| dist[[i, *a]].partial_cmp(&dist[[i, *b]]).unwrap())
                .unwrap();
            assert!(
                w[[i, nearest]] > 0.999,
                "row {i}: weight {} on nearest",
                w[[i, nearest]]
            );
        }
    }

    #[test]
    fn nearest_key_weight_nondecreasing_as_alpha_drops() {
        let c = cfg();
        let inputs = random_inputs(17, 4, c.dim);
        let dist = center_distances(&inputs.centers_lc, &inputs.centers_l, &inputs.centers_c);
        let mut last = vec![0.0f64; 4];
        let mut first = true;
        for alpha in [0.0, -0.5, -1.0, -2.0, -5.0, -20.0] {
            let mut store = pme_store(&c, 4, 3);
            store.insert("pme.alpha", array![[alpha]]);
            let w = pme_attention_weights(&store, &c, &inputs, true).unwrap();
            for i in 0..4 {
                let nearest = (0..12)
                    .min_by(|a, b| dist[[i, *a]].partial_cmp(&dist[[i, *b]]).unwrap())
                    .unwrap();
                let cur = w[[i, nearest]];
                if !first {
                    assert!(
                        cur >= last[i] - 1e-9,
                        "alpha {alpha}, row {i}: {cur} < {}",
                        last[i]
                    );
                }
                last[i] = cur;
            }
            first = false;
        }
    }

    #[test]
    fn key_block_swap_leaves_output_unchanged() {
        let c = cfg();
        let store = pme_store(&c, 4, 9);
        let inputs = random_inputs(23, 5, c.dim);
        let base = pme_forward(&store, &c, &inputs, true).unwrap();

        // Same computation with the L and C key blocks swapped (projected
        // features and centers move together).
        let mut g = Graph::new(&store);
        let nodes = node_inputs(&mut g, &inputs);
        let q_lc = project_branch_node(&mut g, nodes.z_lc, BranchTag::Lc).unwrap();
        let q_l = project_branch_node(&mut g, nodes.z_l, BranchTag::L).unwrap();
        let q_c = project_branch_node(&mut g, nodes.z_c, BranchTag::C).unwrap();
        let query = KeyBlock {
            projected: q_lc,
            centers: inputs.centers_lc.clone(),
        };
        let keys = [
            KeyBlock {
                projected: q_lc,
                centers: inputs.centers_lc.clone(),
            },
            KeyBlock {
                projected: q_c,
                centers: inputs.centers_c.clone(),
            },
            KeyBlock {
                projected: q_l,
                centers: inputs.centers_l.clone(),
            },
        ];
        let z_e = attend_tail(&mut g, &c, &query, &keys, true);
        let swapped = g.tape.value(z_e).clone();
        let max_diff = base
            .0
            .features
            .iter()
            .zip(swapped.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-9, "{max_diff}");
    }

    #[test]
    fn nme_equals_pme_with_zero_scalars() {
        let c = cfg();
        let mut store = pme_store(&c, 4, 31);
        let inputs = random_inputs(29, 6, c.dim);
        let nme = ensemble_nme(&store, &c, &inputs).unwrap();
        store.insert("pme.alpha", array![[0.0]]);
        store.insert("pme.beta", array![[0.0]]);
        let pme = pme_forward(&store, &c, &inputs, true).unwrap();
        let max_diff = nme
            .0
            .features
            .iter()
            .zip(pme.0.features.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-6, "{max_diff}");
    }

    #[test]
    fn ensemble_head_params_disjoint_from_shared_head() {
        let c = cfg();
        let mut store = pme_store(&c, 4, 3);
        crate::decoder::init_box_head(&mut store, "head", c.dim, 4, 3);
        let pme_keys: Vec<String> = store.keys_with_prefix("pme.head.").cloned().collect();
        assert!(!pme_keys.is_empty());
        let shared: Vec<String> = store
            .keys()
            .filter(|k| k.starts_with("head."))
            .cloned()
            .collect();
        assert!(!shared.is_empty());
        for k in &shared {
            assert!(!pme_keys.contains(k));
        }
        // mutating the shared head leaves the ensemble head output unchanged
        let inputs = random_inputs(3, 4, c.dim);
        let a = pme_forward(&store, &c, &inputs, true).unwrap();
        store.get_mut("head.reg.l2.w").fill(7.0);
        let b = pme_forward(&store, &c, &inputs, true).unwrap();
        assert_eq!(a.1.boxes, b.1.boxes);
    }

    #[test]
    fn ensemble_head_zero_final_layers_decode_to_anchors() {
        let c = cfg();
        let mut store = pme_store(&c, 4, 3);
        store.get_mut("pme.head.reg.l2.w").fill(0.0);
        store.get_mut("pme.head.reg.l2.b").fill(0.0);
        let inputs = random_inputs(37, 5, c.dim);
        let (_, preds) = pme_forward(&store, &c, &inputs, true).unwrap();
        assert!(preds.boxes.iter().all(|v| *v == 0.0));
        assert_eq!(preds.centers, inputs.anchors);
        // centers re-decode exactly from boxes + anchors
        for i in 0..preds.len() {
            for d in 0..2 {
                assert_eq!(
                    preds.centers[[i, d]],
                    preds.anchors[[i, d]] + preds.boxes[[i, d]]
                );
            }
        }
    }

    fn gtb(cx: f64, cy: f64, w: f64, l: f64, class: usize) -> GroundTruthBox {
        GroundTruthBox {
            center: (cx, cy),
            size: (w, l),
            class_id: class,
            yaw: 0.0,
        }
    }

    #[test]
    fn pme_loss_contracts() {
        let w = LossWeights::default();
        // perfect predictions: loss near zero
        let gts = vec![gtb(1.0, 2.0, 2.0, 4.0, 1)];
        let perfect = BoxPredictionSet {
            branch: BranchTag::Ensemble,
            boxes: array![[0.0, 0.0, 2.0f64.ln(), 4.0f64.ln()]],
            logits: array![[-30.0, 30.0, -30.0, -30.0]],
            centers: array![[1.0, 2.0]],
            anchors: array![[1.0, 2.0]],
        };
        let (loss, m) = pme_loss(&perfect, &gts, &w).unwrap();
        assert!(loss < 1e-9, "{loss}");
        assert_eq!(m.pairs, vec![(0, 0)]);

        // equals the recomputed two-term form
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let preds = BoxPredictionSet {
            branch: BranchTag::Ensemble,
            boxes: randn(&mut rng, 5, 4, 1.0),
            logits: randn(&mut rng, 5, 4, 2.0),
            centers: randn(&mut rng, 5, 2, 6.0),
            anchors: Array2::zeros((5, 2)),
        };
        let gts2 = vec![gtb(0.0, 1.0, 1.0, 2.0, 0), gtb(3.0, -2.0, 2.0, 2.0, 3)];
        let (loss2, m2) = pme_loss(&preds, &gts2, &w).unwrap();
        let recomputed = w.w_reg * matching::l1_reg_loss(&preds, &gts2, &m2)
            + w.w_cls
                * matching::focal_loss(
                    &preds.logits,
                    &m2.pairs
                        .iter()
                        .map(|(q, g)| (*q, gts2[*g].class_id))
                        .collect::<Vec<_>>(),
                    w.focal_gamma,
                    w.focal_alpha,
                );
        assert!((loss2 - recomputed).abs() <= 1e-9);

        // no gts: classification-only term
        let (loss3, m3) = pme_loss(&preds, &[], &w).unwrap();
        assert!(m3.pairs.is_empty());
        let cls_only =
            w.w_cls * matching::focal_loss(&preds.logits, &[], w.focal_gamma, w.focal_alpha);
        assert!((loss3 - cls_only).abs() <= 1e-12);
    }

    fn pooled_fixture() -> BTreeMap<BranchTag, BoxPredictionSet> {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut map = BTreeMap::new();
        for tag in [BranchTag::Lc, BranchTag::L, BranchTag::C] {
            map.insert(
                tag,
                BoxPredictionSet {
                    branch: tag,
                    boxes: randn(&mut rng, 4, 4, 1.0),
                    logits: randn(&mut rng, 4, 3, 2.0),
                    centers: randn(&mut rng, 4, 2, 8.0),
                    anchors: Array2::zeros((4, 2)),
                },
            );
        }
        map
    }

    #[test]
    fn topk_with_full_budget_returns_all() {
        let pool = pooled_fixture();
        let out = ensemble_topk(&pool, 12).unwrap();
        assert_eq!(out.len(), 12);
        let capped = ensemble_topk(&pool, 5).unwrap();
        assert_eq!(capped.len(), 5);
    }

    #[test]
    fn nms_suppresses_duplicates() {
        let mut pool = pooled_fixture();
        // Make the L branch an exact copy of LC: every prediction duplicated.
        let lc = pool[&BranchTag::Lc].clone();
        pool.insert(
            BranchTag::L,
            BoxPredictionSet {
                branch: BranchTag::L,
                ..lc
            },
        );
        let out = ensemble_nms(&pool, 0.5).unwrap();
        // duplicates collapse: every kept pair is farther apart than the threshold
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                let dx = out.centers[[i, 0]] - out.centers[[j, 0]];
                let dy = out.centers[[i, 1]] - out.centers[[j, 1]];
                assert!((dx * dx + dy * dy).sqrt() > 0.5);
            }
        }
        // two identical predictions: exactly one survivor among each pair
        assert!(out.len() <= 8);
    }
}
