//! Tokenization of sensor grids and object-query initialization.
//!
//! A [`SensorGrid`] becomes a [`TokenSet`]: a learned linear map lifts each
//! cell's features to the model width, row `i` of every matrix referring to
//! cell `i` in row-major order. Modality positional embeddings pass a
//! sinusoidal encoding of the cell coordinates through a small per-modality
//! feed-forward map, so the same location is embedded differently by the GEO
//! and SEM branches.
//!
//! Queries are learnable BEV anchor points drawn uniformly over the world
//! extent; their content vectors start at zero and their positional
//! embeddings reuse the modality maps. The both-modalities branch uses the
//! elementwise sum of the two per-modality query embeddings, exactly.

use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Graph, ParamStore};
use crate::rng;
use crate::tensor::{pe_frequencies, NodeId};
use crate::world::{Modality, SensorGrid};

/// A modality's flattened tokens with aligned coordinates and embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub modality: Modality,
    /// T×D lifted features.
    pub tokens: Array2<f64>,
    /// T×2 BEV coordinates, aligned row-for-row with `tokens`.
    pub coords: Array2<f64>,
    /// T×D modality positional embedding, aligned row-for-row.
    pub modality_pe: Array2<f64>,
    pub missing: bool,
}

/// Learnable object queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// N×2 anchor positions (snapshot of the learnable parameter).
    pub anchors: Array2<f64>,
    /// N×D per-modality query positional embeddings.
    pub pe_geo: Array2<f64>,
    pub pe_sem: Array2<f64>,
    /// N×D embedding for the both-modalities branch: `pe_geo + pe_sem`.
    pub pe_both: Array2<f64>,
    /// N×D content vectors, zero at initialization.
    pub content: Array2<f64>,
}

/// Tape-resident tokens for one modality.
pub struct TokenNodes {
    pub modality: Modality,
    pub tokens: NodeId,
    pub pe: NodeId,
    pub coords: Array2<f64>,
    pub missing: bool,
}

fn lift_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Geo => "lift.geo",
        Modality::Sem => "lift.sem",
    }
}

fn pe_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Geo => "pe.geo",
        Modality::Sem => "pe.sem",
    }
}

/// Register tokenizer parameters: per-modality lifts and embedding maps.
pub fn init_token_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    feature_channels: usize,
    seed: u64,
) {
    for m in [Modality::Geo, Modality::Sem] {
        nn::init_linear(store, lift_prefix(m), feature_channels, cfg.dim, seed);
        nn::init_mlp2(store, pe_prefix(m), cfg.dim, cfg.dim, cfg.dim, seed);
    }
}

/// Draw query anchors uniformly over the world extent and register them as
/// the learnable parameter `query.anchors`.
pub fn init_queries(
    store: &mut ParamStore,
    n_queries: usize,
    world_extent: (f64, f64, f64, f64),
    seed: u64,
) {
    let (x0, x1, y0, y1) = world_extent;
    let mut r = rng::stream(seed, "query.anchors", 0);
    let anchors = Array2::from_shape_fn((n_queries, 2), |(_, ax)| {
        if ax == 0 {
            r.random_range(x0..x1)
        } else {
            r.random_range(y0..y1)
        }
    });
    store.insert("query.anchors", anchors);
}

/// Sample anchors without touching a store (exposed for tests and tooling).
pub fn sample_anchors(n: usize, extent: (f64, f64, f64, f64), seed: u64) -> Array2<f64> {
    let mut store = ParamStore::new();
    init_queries(&mut store, n, extent, seed);
    store.get("query.anchors").clone()
}

/// Sinusoidal core followed by the per-modality learned map, on the tape.
///
/// `coords` must be an n×2 node. Errors if the model width is not divisible
/// by four (two sin/cos pairs per axis).
pub fn modality_pe_nodes(
    g: &mut Graph<'_>,
    coords: NodeId,
    modality: Modality,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    if cfg.dim % 4 != 0 {
        return Err(Error::config(format!(
            "embedding dim {} not divisible by 4",
            cfg.dim
        )));
    }
    let freqs = pe_frequencies(cfg.dim, cfg.pe_wavelength_min, cfg.pe_wavelength_max);
    let sin = g.tape.sinusoid(coords, &freqs);
    Ok(nn::mlp2(g, sin, pe_prefix(modality)))
}

/// Plain-value modality positional embedding of a coordinate matrix.
pub fn modality_positional_embedding(
    coords: &Array2<f64>,
    modality: Modality,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    let mut g = Graph::new(params);
    let c = g.tape.constant(coords.clone());
    let pe = modality_pe_nodes(&mut g, c, modality, cfg)?;
    Ok(g.tape.value(pe).clone())
}

/// Lift a grid onto the tape: tokens, positional embedding, coordinates.
pub fn tokenize_nodes(
    g: &mut Graph<'_>,
    grid: &SensorGrid,
    cfg: &ModelConfig,
) -> Result<TokenNodes> {
    let (h, w, f) = grid.values.dim();
    let lift_key = format!("{}.w", lift_prefix(grid.modality));
    let lift_rows = g
        .params()
        .try_get(&lift_key)
        .ok_or_else(|| Error::config(format!("missing parameter {lift_key}")))?
        .nrows();
    if lift_rows != f {
        return Err(Error::ShapeMismatch {
            context: format!("tokenize {}", grid.modality),
            expected: format!("{lift_rows} feature channels"),
            got: format!("{f}"),
        });
    }
    if !grid.values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{} grid", grid.modality)));
    }
    let flat = Array2::from_shape_fn((h * w, f), |(t, c)| grid.values[[t / w, t % w, c]] as f64);
    let flat = g.tape.constant(flat);
    let tokens = nn::linear(g, flat, lift_prefix(grid.modality));
    let coords_node = g.tape.constant(grid.cell_coords.clone());
    let pe = modality_pe_nodes(g, coords_node, grid.modality, cfg)?;
    Ok(TokenNodes {
        modality: grid.modality,
        tokens,
        pe,
        coords: grid.cell_coords.clone(),
        missing: grid.is_missing(),
    })
}

/// Put an existing token set onto a tape as constants.
pub fn token_nodes_from_set(g: &mut Graph<'_>, set: &TokenSet) -> TokenNodes {
    TokenNodes {
        modality: set.modality,
        tokens: g.tape.constant(set.tokens.clone()),
        pe: g.tape.constant(set.modality_pe.clone()),
        coords: set.coords.clone(),
        missing: set.missing,
    }
}

/// A zero-token set (T = 0) for a modality; useful for degenerate checks.
pub fn empty_token_nodes(g: &mut Graph<'_>, modality: Modality, dim: usize) -> TokenNodes {
    TokenNodes {
        modality,
        tokens: g.tape.constant(Array2::zeros((0, dim))),
        pe: g.tape.constant(Array2::zeros((0, dim))),
        coords: Array2::zeros((0, 2)),
        missing: false,
    }
}

/// Plain-value tokenization of a grid.
pub fn tokenize(grid: &SensorGrid, params: &ParamStore, cfg: &ModelConfig) -> Result<TokenSet> {
    let mut g = Graph::new(params);
    let nodes = tokenize_nodes(&mut g, grid, cfg)?;
    Ok(TokenSet {
        modality: nodes.modality,
        tokens: g.tape.value(nodes.tokens).clone(),
        coords: nodes.coords,
        modality_pe: g.tape.value(nodes.pe).clone(),
        missing: nodes.missing,
    })
}

/// Tape-resident query bundle.
pub struct QueryNodes {
    pub anchors: NodeId,
    pub pe_geo: NodeId,
    pub pe_sem: NodeId,
    pub pe_both: NodeId,
    pub content: NodeId,
    pub n: usize,
}

/// Bind query anchors and derive all three query embeddings on the tape.
pub fn query_nodes(g: &mut Graph<'_>, cfg: &ModelConfig) -> Result<QueryNodes> {
    let anchors = g.param("query.anchors");
    let n = g.tape.value(anchors).nrows();
    let pe_geo = modality_pe_nodes(g, anchors, Modality::Geo, cfg)?;
    let pe_sem = modality_pe_nodes(g, anchors, Modality::Sem, cfg)?;
    let pe_both = g.tape.add(pe_geo, pe_sem);
    let content = g.tape.constant(Array2::zeros((n, cfg.dim)));
    Ok(QueryNodes {
        anchors,
        pe_geo,
        pe_sem,
        pe_both,
        content,
        n,
    })
}

/// Plain-value query set for the current parameters.
pub fn query_set(params: &ParamStore, cfg: &ModelConfig) -> Result<QuerySet> {
    let mut g = Graph::new(params);
    let q = query_nodes(&mut g, cfg)?;
    Ok(QuerySet {
        anchors: g.tape.value(q.anchors).clone(),
        pe_geo: g.tape.value(q.pe_geo).clone(),
        pe_sem: g.tape.value(q.pe_sem).clone(),
        pe_both: g.tape.value(q.pe_both).clone(),
        content: g.tape.value(q.content).clone(),
    })
}
