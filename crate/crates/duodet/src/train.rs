//! Two-stage training, checkpoint orchestration, and inference routing.
//!
//! Stage 1 optimizes every tokenizer, query, decoder and shared-head
//! parameter under the composite branch loss, with paste augmentation active
//! for the leading fraction of epochs. Stage 2 freezes all of that, caches
//! the frozen branch outputs per scene once, and trains only the ensemble
//! parameters under the ensemble loss. Freezing is structural: frozen
//! parameters enter the tape as constants and the optimizer never sees a
//! gradient for them, so their bytes cannot change.
//!
//! Gradients are computed per scene in parallel and reduced in scene index
//! order, which keeps every run bit-reproducible for a fixed (config, seed,
//! build) triple regardless of worker count.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ScheduleKind};
use crate::dataset::{Dataset, SceneRecord, Split};
use crate::decoder::{
    extract_predictions, forward_moad_nodes, init_stage1_params, BoxPredictionSet, BranchTag,
    ForwardMode,
};
use crate::ensemble::{
    self, confidence, ensemble_nms, ensemble_topk, has_pme_params, init_pme_params, pme_forward,
    PmeInputs,
};
use crate::error::{Error, Result};
use crate::matching::{self, MoadLossBreakdown};
use crate::nn::{accumulate_grads, clip_grad_norm, AdamW, Graph, ParamStore};
use crate::rng;
use crate::tokens::{query_nodes, tokenize_nodes};
use crate::world::{paste_augment, render_geo_view, render_sem_view, GroundTruthBox, SensorGrid};

/// Per-step stage-1 log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Step {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_lc: f64,
    pub l_l: f64,
    pub l_c: f64,
    pub l_total: f64,
}

/// Per-step stage-2 log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Step {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_pme: f64,
}

pub struct TrainedStage1 {
    pub params: ParamStore,
    pub log: Vec<Stage1Step>,
    pub steps: u64,
}

pub struct TrainedStage2 {
    pub params: ParamStore,
    pub log: Vec<Stage2Step>,
    pub steps: u64,
}

/// Learning rate at `step` of `total` for a schedule peaking at `peak`.
pub fn learning_rate(
    kind: ScheduleKind,
    peak: f64,
    step: usize,
    total: usize,
    warmup: usize,
) -> f64 {
    match kind {
        ScheduleKind::Constant => peak,
        ScheduleKind::CyclicTriangular => {
            let base = peak / 10.0;
            let denom = total.saturating_sub(1).max(1) as f64;
            let frac = (step as f64 / denom).clamp(0.0, 1.0);
            let tri = 1.0 - (2.0 * frac - 1.0).abs();
            base + (peak - base) * tri
        }
        ScheduleKind::CosineWarmup => {
            if step < warmup {
                peak * (step + 1) as f64 / warmup as f64
            } else {
                let denom = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / denom).clamp(0.0, 1.0);
                peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

fn shuffled_indices(n: usize, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, tag, epoch as u64);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Per-scene training inputs for one stage-1 step.
struct SceneBatchItem {
    geo: SensorGrid,
    sem: SensorGrid,
    gts: Vec<GroundTruthBox>,
}

fn scene_item(
    cfg: &Config,
    data: &Dataset,
    rec: &SceneRecord,
    bank: &[GroundTruthBox],
    augment: bool,
    paste_seed: u64,
) -> Result<SceneBatchItem> {
    if augment {
        let scene = paste_augment(
            &rec.scene,
            bank,
            paste_seed,
            cfg.train.augment_max_paste,
            cfg.world.min_separation,
        );
        let classes = cfg.world.num_classes;
        let geo = render_geo_view(&scene, &cfg.geo, classes, rec.geo_seed);
        let sem = render_sem_view(&scene, &cfg.sem, classes, rec.sem_seed);
        Ok(SceneBatchItem {
            geo,
            sem,
            gts: scene.boxes,
        })
    } else {
        Ok(SceneBatchItem {
            geo: data.grid(rec, crate::world::Modality::Geo)?,
            sem: data.grid(rec, crate::world::Modality::Sem)?,
            gts: rec.scene.boxes.clone(),
        })
    }
}

/// Forward + composite loss for one scene; returns parameter gradients and
/// the per-branch loss values.
fn stage1_scene_grads(
    params: &ParamStore,
    cfg: &Config,
    item: &SceneBatchItem,
) -> Result<(BTreeMap<String, Array2<f64>>, MoadLossBreakdown)> {
    let mut g = Graph::new(params);
    let tok_geo = tokenize_nodes(&mut g, &item.geo, &cfg.model)?;
    let tok_sem = tokenize_nodes(&mut g, &item.sem, &cfg.model)?;
    let queries = query_nodes(&mut g, &cfg.model)?;
    let branches = forward_moad_nodes(
        &mut g,
        &cfg.model,
        &queries,
        Some(&tok_geo),
        Some(&tok_sem),
        ForwardMode::Train,
    )?;
    let anchors = g.tape.value(queries.anchors).clone();
    let mut preds = BTreeMap::new();
    for (tag, bn) in branches {
        let values = extract_predictions(&g, &bn.preds, &anchors);
        preds.insert(tag, (bn.preds, values));
    }
    let (total, breakdown) = matching::moad_loss_nodes(&mut g, &preds, &item.gts, &cfg.loss)?;
    let grads = g.param_grads(total);
    Ok((grads, breakdown))
}

/// Composite loss values only (no gradients) for one scene; used by tests
/// probing the loss surface directly.
pub fn stage1_scene_loss(
    params: &ParamStore,
    cfg: &Config,
    geo: &SensorGrid,
    sem: &SensorGrid,
    gts: &[GroundTruthBox],
) -> Result<MoadLossBreakdown> {
    let item = SceneBatchItem {
        geo: geo.clone(),
        sem: sem.clone(),
        gts: gts.to_vec(),
    };
    stage1_scene_grads(params, cfg, &item).map(|(_, b)| b)
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Stage 1: optimize all detector parameters under the composite branch loss.
pub fn train_stage1(cfg: &Config, data: &Dataset, workers: usize) -> Result<TrainedStage1> {
    cfg.validate()?;
    let records = data.split_records(Split::Train);
    if records.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut params = ParamStore::new();
    init_stage1_params(&mut params, cfg, rng::child_seed(cfg.train.seed, "init", 0));
    let bank: Vec<GroundTruthBox> = records
        .iter()
        .flat_map(|r| r.scene.boxes.iter().copied())
        .collect();
    let n = records.len();
    let steps_per_epoch = n.div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.stage1_epochs;
    let augment_epochs =
        (cfg.train.augment_fraction * cfg.train.stage1_epochs as f64).ceil() as usize;
    let mut opt = AdamW::new(cfg.train.weight_decay);
    let pool = build_pool(workers)?;
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0u64;
    for epoch in 0..cfg.train.stage1_epochs {
        let order = shuffled_indices(n, cfg.train.seed, "shuffle1", epoch);
        let augment = epoch < augment_epochs && cfg.train.augment_max_paste > 0;
        for batch in order.chunks(cfg.train.batch_size) {
            let lr = learning_rate(
                cfg.train.stage1_schedule,
                cfg.train.stage1_lr,
                step as usize,
                total_steps,
                cfg.train.warmup_steps,
            );
            let results: Vec<Result<(BTreeMap<String, Array2<f64>>, MoadLossBreakdown)>> = pool
                .install(|| {
                    batch
                        .par_iter()
                        .map(|&idx| {
                            let rec = records[idx];
                            let paste_seed = rng::child_seed(
                                cfg.train.seed,
                                "paste",
                                (epoch * n + idx) as u64,
                            );
                            let item = scene_item(cfg, data, rec, &bank, augment, paste_seed)?;
                            stage1_scene_grads(&params, cfg, &item)
                        })
                        .collect()
                });
            let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            let (mut s_lc, mut s_l, mut s_c, mut s_total) = (0.0, 0.0, 0.0, 0.0);
            for r in results {
                let (g, b) = r?;
                accumulate_grads(&mut grads, &g);
                s_lc += b.l_lc;
                s_l += b.l_l;
                s_c += b.l_c;
                s_total += b.total;
            }
            let bsz = batch.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x / bsz);
            }
            let mean_total = s_total / bsz;
            if !mean_total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: mean_total,
                });
            }
            clip_grad_norm(&mut grads, cfg.train.grad_clip);
            opt.step(&mut params, &grads, lr);
            log.push(Stage1Step {
                step,
                epoch,
                lr,
                l_lc: s_lc / bsz,
                l_l: s_l / bsz,
                l_c: s_c / bsz,
                l_total: mean_total,
            });
            step += 1;
        }
    }
    Ok(TrainedStage1 {
        params,
        log,
        steps: step,
    })
}

/// Frozen three-branch outputs for every training scene, computed once.
fn precompute_pme_inputs(
    params: &ParamStore,
    cfg: &Config,
    data: &Dataset,
    records: &[&SceneRecord],
    pool: &rayon::ThreadPool,
) -> Result<Vec<PmeInputs>> {
    pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let geo = data.grid(rec, crate::world::Modality::Geo)?;
                let sem = data.grid(rec, crate::world::Modality::Sem)?;
                let mut g = Graph::with_trainable(params, |_| false);
                let tok_geo = tokenize_nodes(&mut g, &geo, &cfg.model)?;
                let tok_sem = tokenize_nodes(&mut g, &sem, &cfg.model)?;
                let queries = query_nodes(&mut g, &cfg.model)?;
                let branches = forward_moad_nodes(
                    &mut g,
                    &cfg.model,
                    &queries,
                    Some(&tok_geo),
                    Some(&tok_sem),
                    ForwardMode::Train,
                )?;
                let anchors = g.tape.value(queries.anchors).clone();
                let mut map = BTreeMap::new();
                for (tag, bn) in branches {
                    let features = crate::decoder::BoxFeatures {
                        branch: tag,
                        features: g.tape.value(bn.features).clone(),
                    };
                    let values = extract_predictions(&g, &bn.preds, &anchors);
                    map.insert(tag, (features, values));
                }
                PmeInputs::from_branches(&map)
            })
            .collect()
    })
}

fn stage2_scene_grads(
    params: &ParamStore,
    cfg: &Config,
    inputs: &PmeInputs,
    gts: &[GroundTruthBox],
    use_bias: bool,
) -> Result<(BTreeMap<String, Array2<f64>>, f64)> {
    let mut g = Graph::with_trainable(params, |k| k.starts_with("pme."));
    let nodes = ensemble::node_inputs(&mut g, inputs);
    let (_, preds) = ensemble::pme_forward_nodes(&mut g, &cfg.model, &nodes, use_bias)?;
    let values = extract_predictions(&g, &preds, &inputs.anchors);
    let bl = matching::branch_loss(&mut g, &preds, &values, gts, &cfg.loss)?;
    let grads = g.param_grads(bl.node);
    Ok((grads, bl.value))
}

/// Stage 2: train the ensemble only, on frozen stage-1 outputs.
///
/// `use_bias = false` trains the no-bias variant. `stage2_epochs` may be 0,
/// which returns the stage-1 parameters plus freshly initialized ensemble
/// parameters.
pub fn train_stage2(
    cfg: &Config,
    stage1_params: &ParamStore,
    data: &Dataset,
    workers: usize,
    use_bias: bool,
) -> Result<TrainedStage2> {
    cfg.validate()?;
    let records = data.split_records(Split::Train);
    if records.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut params = stage1_params.clone();
    init_pme_params(
        &mut params,
        &cfg.model,
        cfg.world.num_classes,
        rng::child_seed(cfg.train.seed, "pme-init", 0),
    );
    let pool = build_pool(workers)?;
    let cache = precompute_pme_inputs(&params, cfg, data, &records, &pool)?;
    let n = records.len();
    let steps_per_epoch = n.div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.stage2_epochs;
    let mut opt = AdamW::new(cfg.train.weight_decay);
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0u64;
    for epoch in 0..cfg.train.stage2_epochs {
        let order = shuffled_indices(n, cfg.train.seed, "shuffle2", epoch);
        for batch in order.chunks(cfg.train.batch_size) {
            let lr = learning_rate(
                cfg.train.stage2_schedule,
                cfg.train.stage2_lr,
                step as usize,
                total_steps,
                cfg.train.warmup_steps,
            );
            let results: Vec<Result<(BTreeMap<String, Array2<f64>>, f64)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&idx| {
                        stage2_scene_grads(
                            &params,
                            cfg,
                            &cache[idx],
                            &records[idx].scene.boxes,
                            use_bias,
                        )
                    })
                    .collect()
            });
            let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            let mut s_loss = 0.0;
            for r in results {
                let (g, v) = r?;
                accumulate_grads(&mut grads, &g);
                s_loss += v;
            }
            let bsz = batch.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x / bsz);
            }
            let mean_loss = s_loss / bsz;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: mean_loss,
                });
            }
            debug_assert!(grads.keys().all(|k| k.starts_with("pme.")));
            clip_grad_norm(&mut grads, cfg.train.grad_clip);
            opt.step(&mut params, &grads, lr);
            log.push(Stage2Step {
                step,
                epoch,
                lr,
                l_pme: mean_loss,
            });
            step += 1;
        }
    }
    Ok(TrainedStage2 {
        params,
        log,
        steps: step,
    })
}

/// Write a JSONL training log.
pub fn write_log<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Inference routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    Full,
    CameraOnly,
    LidarOnly,
}

impl std::str::FromStr for InferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(InferMode::Full),
            "camera_only" | "camera-only" => Ok(InferMode::CameraOnly),
            "lidar_only" | "lidar-only" => Ok(InferMode::LidarOnly),
            other => Err(Error::Unknown {
                what: "inference mode".into(),
                value: other.into(),
            }),
        }
    }
}

/// Ensemble strategy applied on top of the decoding branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    None,
    Pme,
    Nme,
    TopK,
    Nms,
}

impl std::str::FromStr for EnsembleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EnsembleKind::None),
            "pme" => Ok(EnsembleKind::Pme),
            "nme" => Ok(EnsembleKind::Nme),
            "topk" => Ok(EnsembleKind::TopK),
            "nms" => Ok(EnsembleKind::Nms),
            other => Err(Error::Unknown {
                what: "ensemble kind".into(),
                value: other.into(),
            }),
        }
    }
}

impl std::fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnsembleKind::None => write!(f, "none"),
            EnsembleKind::Pme => write!(f, "pme"),
            EnsembleKind::Nme => write!(f, "nme"),
            EnsembleKind::TopK => write!(f, "topk"),
            EnsembleKind::Nms => write!(f, "nms"),
        }
    }
}

fn filter_by_score(preds: BoxPredictionSet, floor: f64) -> BoxPredictionSet {
    if floor <= 0.0 {
        return preds;
    }
    let conf = confidence(&preds.logits);
    let keep: Vec<usize> = (0..preds.len()).filter(|i| conf[*i] >= floor).collect();
    let pick = |a: &Array2<f64>| {
        Array2::from_shape_fn((keep.len(), a.ncols()), |(i, j)| a[[keep[i], j]])
    };
    BoxPredictionSet {
        branch: preds.branch,
        boxes: pick(&preds.boxes),
        logits: pick(&preds.logits),
        centers: pick(&preds.centers),
        anchors: pick(&preds.anchors),
    }
}

/// Run inference on one scene's grids.
///
/// `Full` mode runs the joint branch (or the requested ensemble on top of
/// all three branches); the single-sensor modes bypass any ensemble and
/// return the surviving branch. Predictions below the score floor are
/// dropped.
pub fn infer(
    params: &ParamStore,
    cfg: &Config,
    geo: Option<&SensorGrid>,
    sem: Option<&SensorGrid>,
    mode: InferMode,
    ensemble: EnsembleKind,
) -> Result<BoxPredictionSet> {
    let mut g = Graph::with_trainable(params, |_| false);
    let tok_geo = geo
        .map(|grid| tokenize_nodes(&mut g, grid, &cfg.model))
        .transpose()?;
    let tok_sem = sem
        .map(|grid| tokenize_nodes(&mut g, grid, &cfg.model))
        .transpose()?;
    let queries = query_nodes(&mut g, &cfg.model)?;
    let forward_mode = match (mode, ensemble) {
        (InferMode::CameraOnly, _) => ForwardMode::TestC,
        (InferMode::LidarOnly, _) => ForwardMode::TestL,
        (InferMode::Full, EnsembleKind::None) => ForwardMode::TestLc,
        (InferMode::Full, _) => ForwardMode::Train,
    };
    let branches = forward_moad_nodes(
        &mut g,
        &cfg.model,
        &queries,
        tok_geo.as_ref(),
        tok_sem.as_ref(),
        forward_mode,
    )?;
    let anchors = g.tape.value(queries.anchors).clone();
    let mut values = BTreeMap::new();
    for (tag, bn) in &branches {
        let features = crate::decoder::BoxFeatures {
            branch: *tag,
            features: g.tape.value(bn.features).clone(),
        };
        values.insert(*tag, (features, extract_predictions(&g, &bn.preds, &anchors)));
    }
    let preds = match (mode, ensemble) {
        (InferMode::CameraOnly, _) => values.remove(&BranchTag::C).expect("C branch").1,
        (InferMode::LidarOnly, _) => values.remove(&BranchTag::L).expect("L branch").1,
        (InferMode::Full, EnsembleKind::None) => {
            values.remove(&BranchTag::Lc).expect("LC branch").1
        }
        (InferMode::Full, EnsembleKind::Pme) | (InferMode::Full, EnsembleKind::Nme) => {
            if !has_pme_params(params) {
                return Err(Error::config(
                    "checkpoint has no ensemble parameters; train stage 2 first or use --ensemble none",
                ));
            }
            let inputs = PmeInputs::from_branches(&values)?;
            let use_bias = ensemble == EnsembleKind::Pme;
            pme_forward(params, &cfg.model, &inputs, use_bias)?.1
        }
        (InferMode::Full, EnsembleKind::TopK) => {
            let only: BTreeMap<BranchTag, BoxPredictionSet> =
                values.into_iter().map(|(k, v)| (k, v.1)).collect();
            ensemble_topk(&only, cfg.eval.ensemble_topk_k)?
        }
        (InferMode::Full, EnsembleKind::Nms) => {
            let only: BTreeMap<BranchTag, BoxPredictionSet> =
                values.into_iter().map(|(k, v)| (k, v.1)).collect();
            ensemble_nms(&only, cfg.eval.ensemble_nms_dist)?
        }
    };
    Ok(filter_by_score(preds, cfg.eval.score_floor))
}
