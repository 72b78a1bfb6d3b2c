//! Bipartite set matching and the detection losses.
//!
//! Each decoding branch's predictions are matched to ground truth with a
//! minimum-cost Hungarian assignment over `w_reg * L1 + w_cls * focal` pair
//! costs, then supervised with an L1 regression loss over matched pairs and
//! a sigmoid focal classification loss over every (query, class) entry. The
//! composite loss weights the three branch losses and is what stage-1
//! training minimizes.
//!
//! The assignment is canonical: among all minimum-cost assignments the one
//! with the lexicographically smallest (query, gt) pair list is returned, so
//! tie-bearing inputs still produce reproducible matches.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::config::LossWeights;
use crate::decoder::{BoxPredictionSet, BranchTag, PredictionNodes};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::tensor::{focal_positive_cost, NodeId, Tape};
use crate::world::GroundTruthBox;

/// Result of assigning predictions to ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// (query index, gt index) pairs, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Query indices left unmatched, ascending.
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    pub fn empty(n_queries: usize) -> Self {
        MatchResult {
            pairs: Vec::new(),
            unmatched_queries: (0..n_queries).collect(),
        }
    }
}

/// Absolute regression target `[cx, cy, log w, log l]` for each gt box.
pub fn gt_targets(gts: &[GroundTruthBox]) -> Array2<f64> {
    let mut t = Array2::zeros((gts.len(), 4));
    for (i, b) in gts.iter().enumerate() {
        t[[i, 0]] = b.center.0;
        t[[i, 1]] = b.center.1;
        t[[i, 2]] = b.size.0.ln();
        t[[i, 3]] = b.size.1.ln();
    }
    t
}

/// N×G matching cost: `w_reg * L1 + w_cls * focal positive cost`.
///
/// The L1 term is the mean absolute difference over the four box
/// dimensions; the classification term is the focal positive-example cost
/// of the gt class under the prediction's sigmoid score.
pub fn pairwise_cost(
    preds: &BoxPredictionSet,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Array2<f64> {
    let n = preds.len();
    let g = gts.len();
    let repr = preds.box_repr();
    let targets = gt_targets(gts);
    let mut cost = Array2::zeros((n, g));
    for i in 0..n {
        for j in 0..g {
            let mut l1 = 0.0;
            for d in 0..4 {
                l1 += (repr[[i, d]] - targets[[j, d]]).abs();
            }
            l1 /= 4.0;
            let cls = focal_positive_cost(
                preds.logits[[i, gts[j].class_id]],
                w.focal_gamma,
                w.focal_alpha,
            );
            cost[[i, j]] = w.w_reg * l1 + w.w_cls * cls;
        }
    }
    cost
}

/// Solve the rectangular assignment by shortest augmenting paths, assigning
/// every row. Requires `rows <= cols`. Returns col index per row.
fn solve_rows(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut assigned_row = vec![0usize; m + 1]; // 1-based row occupying col j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for (j, &row) in assigned_row.iter().enumerate().skip(1) {
        if row != 0 {
            row_to_col[row - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum assignment cost of `cost` restricted to `rows` × `cols`,
/// matching min(|rows|, |cols|) pairs. Total summed in ascending row order.
fn restricted_optimum(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let k = rows.len().min(cols.len());
    if k == 0 {
        return 0.0;
    }
    let sub = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| cost[[rows[a], cols[b]]]);
    let mut items: Vec<(usize, usize)> = if rows.len() <= cols.len() {
        solve_rows(&sub).into_iter().enumerate().collect()
    } else {
        let t = Array2::from_shape_fn((cols.len(), rows.len()), |(a, b)| sub[[b, a]]);
        solve_rows(&t)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    items.sort_unstable();
    items
        .into_iter()
        .map(|(r, c)| cost[[rows[r], cols[c]]])
        .sum()
}

/// Minimum-cost assignment with deterministic lexicographic tie-breaking.
///
/// Exactly `min(N, G)` pairs are produced. Among all optimal assignments the
/// lexicographically smallest pair list (compared as sorted (query, gt)
/// sequences) is selected by fixing pairs greedily and re-solving the
/// remainder.
pub fn hungarian_assign(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n, g) = cost.dim();
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    if n == 0 || g == 0 {
        return Ok(MatchResult::empty(n));
    }
    let k = n.min(g);
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..g).collect();
    let best = restricted_optimum(cost, &all_rows, &all_cols);
    let eps = 1e-9 * (1.0 + best.abs());

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut used_cols = vec![false; g];
    let mut fixed_cost = 0.0;
    for i in 0..n {
        if pairs.len() == k {
            break;
        }
        let rows_left: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in 0..g {
            if used_cols[j] {
                continue;
            }
            let cols_left: Vec<usize> = (0..g).filter(|c| !used_cols[*c] && *c != j).collect();
            let completion = restricted_optimum(cost, &rows_left, &cols_left);
            if fixed_cost + cost[[i, j]] + completion <= best + eps {
                chosen = Some(j);
                break;
            }
        }
        if let Some(j) = chosen {
            pairs.push((i, j));
            used_cols[j] = true;
            fixed_cost += cost[[i, j]];
        }
    }
    debug_assert_eq!(pairs.len(), k);
    let matched: Vec<bool> = {
        let mut m = vec![false; n];
        for (q, _) in &pairs {
            m[*q] = true;
        }
        m
    };
    Ok(MatchResult {
        pairs,
        unmatched_queries: (0..n).filter(|q| !matched[*q]).collect(),
    })
}

/// Focal loss node over logits for a fixed assignment.
///
/// Matched queries are supervised toward their gt class, everything else
/// toward zero; the sum is normalized by max(1, matched).
pub fn focal_loss_node(
    tape: &mut Tape,
    logits: NodeId,
    m: &MatchResult,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> NodeId {
    let positives: Vec<(usize, usize)> = m
        .pairs
        .iter()
        .map(|(q, g)| (*q, gts[*g].class_id))
        .collect();
    let norm = positives.len().max(1) as f64;
    tape.focal_set(logits, positives, w.focal_gamma, w.focal_alpha, norm)
}

/// L1 regression loss node over matched pairs for a fixed assignment:
/// mean absolute error over the matched pairs' four box dimensions.
pub fn l1_loss_node(
    tape: &mut Tape,
    box_repr: NodeId,
    m: &MatchResult,
    gts: &[GroundTruthBox],
) -> NodeId {
    if m.pairs.is_empty() {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let targets_all = gt_targets(gts);
    let rows: Vec<usize> = m.pairs.iter().map(|(q, _)| *q).collect();
    let targets =
        Array2::from_shape_fn((m.pairs.len(), 4), |(k, d)| targets_all[[m.pairs[k].1, d]]);
    let norm = (m.pairs.len() * 4) as f64;
    tape.l1_set(box_repr, targets, rows, norm)
}

/// Scalar focal loss for a fixed sparse class assignment.
pub fn focal_loss(
    logits: &Array2<f64>,
    positives: &[(usize, usize)],
    gamma: f64,
    alpha: f64,
) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let norm = positives.len().max(1) as f64;
    let node = tape.focal_set(l, positives.to_vec(), gamma, alpha, norm);
    tape.scalar(node)
}

/// Scalar mean-absolute regression loss over matched pairs.
pub fn l1_reg_loss(preds: &BoxPredictionSet, gts: &[GroundTruthBox], m: &MatchResult) -> f64 {
    let mut tape = Tape::new();
    let repr = tape.constant(preds.box_repr());
    let node = l1_loss_node(&mut tape, repr, m, gts);
    tape.scalar(node)
}

/// Per-branch loss pieces and their tape node.
pub struct BranchLoss {
    pub node: NodeId,
    pub value: f64,
    pub l1_value: f64,
    pub focal_value: f64,
    pub match_result: MatchResult,
}

/// Match one branch against ground truth and build its loss node:
/// `w_reg * L1 + w_cls * focal`.
pub fn branch_loss(
    g: &mut Graph<'_>,
    preds: &PredictionNodes,
    preds_values: &BoxPredictionSet,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Result<BranchLoss> {
    let cost = pairwise_cost(preds_values, gts, w);
    let m = hungarian_assign(&cost)?;
    let l1 = l1_loss_node(&mut g.tape, preds.box_repr, &m, gts);
    let focal = focal_loss_node(&mut g.tape, preds.logits, &m, gts, w);
    let l1_w = g.tape.scale(l1, w.w_reg);
    let focal_w = g.tape.scale(focal, w.w_cls);
    let node = g.tape.add(l1_w, focal_w);
    Ok(BranchLoss {
        node,
        value: g.tape.scalar(node),
        l1_value: g.tape.scalar(l1),
        focal_value: g.tape.scalar(focal),
        match_result: m,
    })
}

/// Per-branch loss values for logging.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MoadLossBreakdown {
    pub l_lc: f64,
    pub l_l: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Composite loss node over the three branches, weighted by `w_lc`, `w_l`,
/// `w_c`. Every branch is matched independently against the same gts.
pub fn moad_loss_nodes(
    g: &mut Graph<'_>,
    branch_preds: &BTreeMap<BranchTag, (PredictionNodes, BoxPredictionSet)>,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Result<(NodeId, MoadLossBreakdown)> {
    let mut values = BTreeMap::new();
    let mut weighted: Option<NodeId> = None;
    for (tag, weight) in [
        (BranchTag::Lc, w.w_lc),
        (BranchTag::L, w.w_l),
        (BranchTag::C, w.w_c),
    ] {
        let (nodes, vals) = branch_preds
            .get(&tag)
            .ok_or_else(|| Error::MissingTokens("moad_loss".into(), tag.to_string()))?;
        let bl = branch_loss(g, nodes, vals, gts, w)?;
        values.insert(tag, bl.value);
        // zero-weight branches are logged but stay off the gradient path
        if weight > 0.0 {
            let term = g.tape.scale(bl.node, weight);
            weighted = Some(match weighted {
                Some(acc) => g.tape.add(acc, term),
                None => term,
            });
        }
    }
    let node = weighted.unwrap_or_else(|| g.tape.constant(Array2::zeros((1, 1))));
    let breakdown = MoadLossBreakdown {
        l_lc: values[&BranchTag::Lc],
        l_l: values[&BranchTag::L],
        l_c: values[&BranchTag::C],
        total: g.tape.scalar(node),
    };
    Ok((node, breakdown))
}

/// Scalar composite loss over plain prediction sets.
pub fn moad_loss(
    branch_preds: &BTreeMap<BranchTag, BoxPredictionSet>,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Result<MoadLossBreakdown> {
    let store = crate::nn::ParamStore::new();
    let mut g = Graph::new(&store);
    let mut with_nodes = BTreeMap::new();
    for (tag, preds) in branch_preds {
        let boxes = g.tape.constant(preds.boxes.clone());
        let logits = g.tape.constant(preds.logits.clone());
        let centers = g.tape.constant(preds.centers.clone());
        let box_repr = g.tape.constant(preds.box_repr());
        with_nodes.insert(
            *tag,
            (
                PredictionNodes {
                    branch: *tag,
                    boxes,
                    logits,
                    centers,
                    box_repr,
                },
                preds.clone(),
            ),
        );
    }
    let (_, breakdown) = moad_loss_nodes(&mut g, &with_nodes, gts, w)?;
    Ok(breakdown)
}
