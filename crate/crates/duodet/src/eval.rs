//! Center-distance detection metrics, the robustness scenario runner, and
//! the ablation suite.
//!
//! A prediction is a true positive at threshold `t` when an unmatched
//! ground-truth box of the same class lies within `t` meters of its center;
//! matching is greedy in descending confidence. Average precision uses
//! 101-point interpolated precision over the recall grid {0, 0.01, ..., 1}.
//! The composite `nds_lite` score folds mean translation and scale errors of
//! true positives in with mAP:
//!
//! ```text
//! nds_lite = (5 * mAP + (1 - min(1, mATE / t_max)) + (1 - min(1, mASE))) / 7
//! ```
//!
//! which is a reduced analog of a full detection score: the synthetic world
//! has no velocity or attributes, so only translation and scale terms
//! remain. Values are not comparable to any external benchmark in absolute
//! terms; the scenario runners only consume orderings and relative drops.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, EvalConfig};
use crate::dataset::{Dataset, SceneRecord, Split};
use crate::decoder::BoxPredictionSet;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng;
use crate::train::{self, EnsembleKind, InferMode};
use crate::world::{
    apply_corruption, CorruptionSpec, GroundTruthBox, Modality, TargetModality,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One decoded detection entering the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub class_id: usize,
    pub score: f64,
}

/// Expand per-query class scores into per-class detections.
pub fn detections_from_predictions(preds: &BoxPredictionSet, score_floor: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for i in 0..preds.len() {
        let w = preds.boxes[[i, 2]].exp();
        let l = preds.boxes[[i, 3]].exp();
        for c in 0..preds.logits.ncols() {
            let score = 1.0 / (1.0 + (-preds.logits[[i, c]]).exp());
            if score >= score_floor {
                out.push(Detection {
                    center: (preds.centers[[i, 0]], preds.centers[[i, 1]]),
                    size: (w, l),
                    class_id: c,
                    score,
                });
            }
        }
    }
    out
}

/// Translation / scale errors of one true positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpError {
    pub translation: f64,
    pub scale: f64,
}

fn center_distance(d: &Detection, g: &GroundTruthBox) -> f64 {
    let dx = d.center.0 - g.center.0;
    let dy = d.center.1 - g.center.1;
    (dx * dx + dy * dy).sqrt()
}

/// 1 - IoU of the two size rectangles aligned at the origin.
fn scale_error(d: &Detection, g: &GroundTruthBox) -> f64 {
    let inter = d.size.0.min(g.size.0) * d.size.1.min(g.size.1);
    let union = d.size.0 * d.size.1 + g.size.0 * g.size.1 - inter;
    1.0 - inter / union
}

/// Greedy confidence-ordered matching of one class's detections in one
/// scene. `preds` must be sorted by descending score. Each gt matches at
/// most once; a detection is a TP when its nearest unmatched gt lies within
/// `threshold` meters.
pub fn match_by_distance(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    threshold: f64,
) -> (Vec<bool>, Vec<TpError>) {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    let mut errors = Vec::new();
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = center_distance(p, g);
            let closer = match best {
                None => true,
                Some((_, bd)) => d < bd,
            };
            if closer {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) if d <= threshold => {
                taken[j] = true;
                flags.push(true);
                errors.push(TpError {
                    translation: d,
                    scale: scale_error(p, &gts[j]),
                });
            }
            _ => flags.push(false),
        }
    }
    (flags, errors)
}

/// 101-point interpolated average precision.
///
/// `scored_flags` must be sorted by descending score; `num_gt` must be
/// positive.
pub fn average_precision(scored_flags: &[(f64, bool)], num_gt: usize) -> f64 {
    assert!(num_gt > 0, "average_precision needs gts");
    if scored_flags.is_empty() {
        return 0.0;
    }
    // precision/recall after each prefix
    let mut points = Vec::with_capacity(scored_flags.len());
    let mut tp = 0usize;
    for (k, (_, flag)) in scored_flags.iter().enumerate() {
        if *flag {
            tp += 1;
        }
        let precision = tp as f64 / (k + 1) as f64;
        let recall = tp as f64 / num_gt as f64;
        points.push((recall, precision));
    }
    // interpolated precision: running max from the high-recall end
    let mut interp = vec![0.0; points.len()];
    let mut run = 0.0f64;
    for k in (0..points.len()).rev() {
        run = run.max(points[k].1);
        interp[k] = run;
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        // first prefix with recall >= r (recall is non-decreasing)
        let found = points.partition_point(|(recall, _)| *recall < r);
        if found < points.len() {
            total += interp[found];
        }
    }
    total / 101.0
}

/// Per-class evaluation details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub num_gt: usize,
    /// AP per distance threshold; absent for classes with no ground truth.
    pub ap_per_threshold: Option<Vec<f64>>,
    pub mean_ap: Option<f64>,
}

/// PR curve samples for plotting: interpolated precision at the 101 recalls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub threshold: f64,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub scenario: String,
    /// Wall-clock stamp; excluded from determinism comparisons.
    pub generated_at_unix: u64,
    pub num_scenes: usize,
    pub map: f64,
    /// Mean translation error of TPs at the designated threshold, meters.
    pub mate: f64,
    /// Mean scale error (1 - aligned IoU) of the same TPs.
    pub mase: f64,
    pub nds_lite: f64,
    pub per_class: BTreeMap<String, ClassReport>,
    pub pr_curves: Vec<PrCurve>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::DatasetVersion {
                got: report.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(report)
    }
}

/// One scene's detections and ground truth.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruthBox>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Evaluate detections against ground truth over a scene collection.
pub fn evaluate(
    samples: &[EvalSample],
    cfg: &EvalConfig,
    num_classes: usize,
    scenario: &str,
) -> EvalReport {
    let thresholds = &cfg.distance_thresholds;
    let tp_threshold = thresholds[cfg.tp_error_threshold_index];
    let t_max = *thresholds.last().expect("validated non-empty");
    let mut per_class = BTreeMap::new();
    let mut pr_curves = Vec::new();
    let mut class_means = Vec::new();
    let mut tp_errors: Vec<TpError> = Vec::new();
    for class_id in 0..num_classes {
        let num_gt: usize = samples
            .iter()
            .map(|s| s.gts.iter().filter(|g| g.class_id == class_id).count())
            .sum();
        if num_gt == 0 {
            per_class.insert(
                class_id.to_string(),
                ClassReport {
                    num_gt: 0,
                    ap_per_threshold: None,
                    mean_ap: None,
                },
            );
            continue;
        }
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut pooled: Vec<(f64, bool)> = Vec::new();
            for s in samples {
                let mut preds: Vec<Detection> = s
                    .detections
                    .iter()
                    .filter(|d| d.class_id == class_id)
                    .copied()
                    .collect();
                preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let gts: Vec<GroundTruthBox> = s
                    .gts
                    .iter()
                    .filter(|g| g.class_id == class_id)
                    .copied()
                    .collect();
                let (flags, errors) = match_by_distance(&preds, &gts, t);
                for (p, f) in preds.iter().zip(flags.iter()) {
                    pooled.push((p.score, *f));
                }
                if t == tp_threshold {
                    tp_errors.extend(errors);
                }
            }
            pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let ap = average_precision(&pooled, num_gt);
            aps.push(ap);
            // store the interpolated envelope for plots
            let mut curve = Vec::with_capacity(101);
            {
                let mut points = Vec::with_capacity(pooled.len());
                let mut tp = 0usize;
                for (k, (_, flag)) in pooled.iter().enumerate() {
                    if *flag {
                        tp += 1;
                    }
                    points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
                }
                let mut interp = vec![0.0; points.len()];
                let mut run = 0.0f64;
                for k in (0..points.len()).rev() {
                    run = run.max(points[k].1);
                    interp[k] = run;
                }
                for i in 0..=100 {
                    let r = i as f64 / 100.0;
                    let found = points.partition_point(|(recall, _)| *recall < r);
                    curve.push(if found < points.len() { interp[found] } else { 0.0 });
                }
            }
            pr_curves.push(PrCurve {
                class_id,
                threshold: t,
                precision: curve,
            });
        }
        let mean_ap = aps.iter().sum::<f64>() / aps.len() as f64;
        class_means.push(mean_ap);
        per_class.insert(
            class_id.to_string(),
            ClassReport {
                num_gt,
                ap_per_threshold: Some(aps),
                mean_ap: Some(mean_ap),
            },
        );
    }
    let map = if class_means.is_empty() {
        0.0
    } else {
        class_means.iter().sum::<f64>() / class_means.len() as f64
    };
    let (mate, mase) = if tp_errors.is_empty() {
        (t_max, 1.0)
    } else {
        let n = tp_errors.len() as f64;
        (
            tp_errors.iter().map(|e| e.translation).sum::<f64>() / n,
            tp_errors.iter().map(|e| e.scale).sum::<f64>() / n,
        )
    };
    let nds_lite =
        (5.0 * map + (1.0 - (mate / t_max).min(1.0)) + (1.0 - mase.min(1.0))) / 7.0;
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: scenario.to_string(),
        generated_at_unix: now_unix(),
        num_scenes: samples.len(),
        map,
        mate,
        mase,
        nds_lite,
        per_class,
        pr_curves,
    }
}

/// An evaluation condition: which corruption is applied and how inference
/// is routed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Full,
    CameraOnly,
    LidarOnly,
    Noise { sigma: f64 },
    Occlusion { fraction: f64 },
    /// The corrupted evaluation split: scenes cycle through SEM noise, GEO
    /// noise, and a SEM occlusion patch.
    CorruptedMix,
}

impl Scenario {
    pub fn tag(&self) -> String {
        match self {
            Scenario::Full => "full".into(),
            Scenario::CameraOnly => "camera_only".into(),
            Scenario::LidarOnly => "lidar_only".into(),
            Scenario::Noise { sigma } => format!("noise_{sigma}"),
            Scenario::Occlusion { fraction } => format!("occlusion_{fraction}"),
            Scenario::CorruptedMix => "corrupted".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Scenario::Full);
        }
        if s == "camera_only" || s == "camera-only" {
            return Ok(Scenario::CameraOnly);
        }
        if s == "lidar_only" || s == "lidar-only" {
            return Ok(Scenario::LidarOnly);
        }
        if s == "corrupted" {
            return Ok(Scenario::CorruptedMix);
        }
        if let Some(v) = s.strip_prefix("noise:") {
            let sigma: f64 = v
                .parse()
                .map_err(|_| Error::config(format!("bad noise sigma '{v}'")))?;
            return Ok(Scenario::Noise { sigma });
        }
        if let Some(v) = s.strip_prefix("occlusion:") {
            let fraction: f64 = v
                .parse()
                .map_err(|_| Error::config(format!("bad occlusion fraction '{v}'")))?;
            return Ok(Scenario::Occlusion { fraction });
        }
        Err(Error::Unknown {
            what: "scenario".into(),
            value: s.into(),
        })
    }
}

/// Build one scene's evaluation sample under a scenario.
fn scenario_sample(
    params: &ParamStore,
    cfg: &Config,
    data: &Dataset,
    rec: &SceneRecord,
    scenario: Scenario,
    ensemble: EnsembleKind,
) -> Result<EvalSample> {
    let rob = &cfg.robustness;
    let geo = data.grid(rec, Modality::Geo)?;
    let sem = data.grid(rec, Modality::Sem)?;
    let seed = rng::child_seed(rob.seed, &scenario.tag(), rec.id as u64);
    let preds = match scenario {
        Scenario::Full => train::infer(params, cfg, Some(&geo), Some(&sem), InferMode::Full, ensemble)?,
        Scenario::CameraOnly => {
            train::infer(params, cfg, None, Some(&sem), InferMode::CameraOnly, ensemble)?
        }
        Scenario::LidarOnly => {
            train::infer(params, cfg, Some(&geo), None, InferMode::LidarOnly, ensemble)?
        }
        Scenario::Noise { sigma } => {
            let geo_n = apply_corruption(&geo, &CorruptionSpec::noise(sigma, TargetModality::Geo, seed))?;
            let sem_n = apply_corruption(
                &sem,
                &CorruptionSpec::noise(sigma, TargetModality::Sem, seed.wrapping_add(1)),
            )?;
            train::infer(params, cfg, Some(&geo_n), Some(&sem_n), InferMode::Full, ensemble)?
        }
        Scenario::Occlusion { fraction } => {
            let sem_o =
                apply_corruption(&sem, &CorruptionSpec::occlusion(fraction, TargetModality::Sem, seed))?;
            train::infer(params, cfg, Some(&geo), Some(&sem_o), InferMode::Full, ensemble)?
        }
        Scenario::CorruptedMix => match rec.id % 3 {
            0 => {
                let sem_n = apply_corruption(
                    &sem,
                    &CorruptionSpec::noise(rob.corrupted_noise_sigma, TargetModality::Sem, seed),
                )?;
                train::infer(params, cfg, Some(&geo), Some(&sem_n), InferMode::Full, ensemble)?
            }
            1 => {
                let geo_n = apply_corruption(
                    &geo,
                    &CorruptionSpec::noise(rob.corrupted_noise_sigma, TargetModality::Geo, seed),
                )?;
                train::infer(params, cfg, Some(&geo_n), Some(&sem), InferMode::Full, ensemble)?
            }
            _ => {
                let sem_o = apply_corruption(
                    &sem,
                    &CorruptionSpec::occlusion(
                        rob.corrupted_occlusion_fraction,
                        TargetModality::Sem,
                        seed,
                    ),
                )?;
                train::infer(params, cfg, Some(&geo), Some(&sem_o), InferMode::Full, ensemble)?
            }
        },
    };
    Ok(EvalSample {
        detections: detections_from_predictions(&preds, cfg.eval.score_floor),
        gts: rec.scene.boxes.clone(),
    })
}

/// Evaluate a model over one split under one scenario.
pub fn evaluate_model(
    params: &ParamStore,
    cfg: &Config,
    data: &Dataset,
    split: Split,
    scenario: Scenario,
    ensemble: EnsembleKind,
    workers: usize,
) -> Result<EvalReport> {
    let records = data.split_records(split);
    if records.is_empty() {
        return Err(Error::config(format!("{split} split is empty")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let samples: Vec<Result<EvalSample>> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| scenario_sample(params, cfg, data, rec, scenario, ensemble))
            .collect()
    });
    let samples: Vec<EvalSample> = samples.into_iter().collect::<Result<_>>()?;
    Ok(evaluate(
        &samples,
        &cfg.eval,
        cfg.world.num_classes,
        &scenario.tag(),
    ))
}

/// One row of the robustness sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub map: f64,
    pub nds_lite: f64,
    /// (full mAP - scenario mAP) / full mAP.
    pub relative_drop: f64,
    pub report: EvalReport,
}

/// Evaluate a model across the scenario battery. The full-input row comes
/// first and anchors the relative drops.
pub fn robustness_sweep(
    params: &ParamStore,
    cfg: &Config,
    data: &Dataset,
    ensemble: EnsembleKind,
    workers: usize,
) -> Result<Vec<ScenarioOutcome>> {
    let mut scenarios = vec![Scenario::Full, Scenario::CameraOnly, Scenario::LidarOnly];
    for &sigma in &cfg.robustness.noise_sigmas {
        scenarios.push(Scenario::Noise { sigma });
    }
    for &fraction in &cfg.robustness.occlusion_fractions {
        scenarios.push(Scenario::Occlusion { fraction });
    }
    let mut outcomes = Vec::with_capacity(scenarios.len());
    let mut full_map = None;
    for s in scenarios {
        let report = evaluate_model(params, cfg, data, Split::Eval, s, ensemble, workers)?;
        let base = *full_map.get_or_insert(report.map);
        let relative_drop = if base > 0.0 {
            (base - report.map) / base
        } else {
            0.0
        };
        outcomes.push(ScenarioOutcome {
            scenario: s.tag(),
            map: report.map,
            nds_lite: report.nds_lite,
            relative_drop,
            report,
        });
    }
    Ok(outcomes)
}

/// One ablation configuration's metrics, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub description: String,
    pub nds_lite: f64,
    pub map: f64,
    pub nds_lite_corrupted: f64,
    pub map_corrupted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Per-seed mAP on the corrupted split, keyed by row label; kept for
    /// dispersion analysis.
    pub per_seed_map_corrupted: BTreeMap<String, Vec<f64>>,
}

/// Train and evaluate the four configurations:
/// (a) joint-branch-only training, (b) a + ensemble, (c) full three-branch
/// training, (d) c + ensemble. Rows are emitted in that order.
pub fn ablation_suite(
    cfg: &Config,
    data: &Dataset,
    seeds: &[u64],
    workers: usize,
) -> Result<AblationTable> {
    let mut acc: BTreeMap<&str, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
    let mut per_seed_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in seeds {
        let mut cfg_a = cfg.clone();
        cfg_a.train.seed = seed;
        cfg_a.loss.w_l = 0.0;
        cfg_a.loss.w_c = 0.0;
        let mut cfg_full = cfg.clone();
        cfg_full.train.seed = seed;

        let s1_a = train::train_stage1(&cfg_a, data, workers)?;
        let s2_b = train::train_stage2(&cfg_a, &s1_a.params, data, workers, true)?;
        let s1_c = train::train_stage1(&cfg_full, data, workers)?;
        let s2_d = train::train_stage2(&cfg_full, &s1_c.params, data, workers, true)?;

        let runs: [(&str, &ParamStore, &Config, EnsembleKind); 4] = [
            ("a", &s1_a.params, &cfg_a, EnsembleKind::None),
            ("b", &s2_b.params, &cfg_a, EnsembleKind::Pme),
            ("c", &s1_c.params, &cfg_full, EnsembleKind::None),
            ("d", &s2_d.params, &cfg_full, EnsembleKind::Pme),
        ];
        for (label, params, run_cfg, ensemble) in runs {
            let clean =
                evaluate_model(params, run_cfg, data, Split::Eval, Scenario::Full, ensemble, workers)?;
            let corrupted = evaluate_model(
                params,
                run_cfg,
                data,
                Split::Eval,
                Scenario::CorruptedMix,
                ensemble,
                workers,
            )?;
            acc.entry(label).or_default().push((
                clean.nds_lite,
                clean.map,
                corrupted.nds_lite,
                corrupted.map,
            ));
            per_seed_map
                .entry(label.to_string())
                .or_default()
                .push(corrupted.map);
        }
    }
    let describe = |label: &str| -> String {
        match label {
            "a" => "joint branch only".into(),
            "b" => "joint branch + ensemble".into(),
            "c" => "three-branch decoding".into(),
            "d" => "three-branch decoding + ensemble".into(),
            _ => String::new(),
        }
    };
    let mut rows = Vec::with_capacity(4);
    for label in ["a", "b", "c", "d"] {
        let values = &acc[label];
        let n = values.len() as f64;
        let sum = values.iter().fold((0.0, 0.0, 0.0, 0.0), |s, v| {
            (s.0 + v.0, s.1 + v.1, s.2 + v.2, s.3 + v.3)
        });
        rows.push(AblationRow {
            label: label.to_string(),
            description: describe(label),
            nds_lite: sum.0 / n,
            map: sum.1 / n,
            nds_lite_corrupted: sum.2 / n,
            map_corrupted: sum.3 / n,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
        per_seed_map_corrupted: per_seed_map,
    })
}

/// Render an aligned plain-text table of ablation rows.
pub fn ablation_table_text(table: &AblationTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<4} {:<36} {:>9} {:>9} {:>14} {:>14}\n",
        "row", "configuration", "nds_lite", "mAP", "nds_lite_corr", "mAP_corr"
    ));
    for r in &table.rows {
        out.push_str(&format!(
            "{:<4} {:<36} {:>9.4} {:>9.4} {:>14.4} {:>14.4}\n",
            r.label, r.description, r.nds_lite, r.map, r.nds_lite_corrupted, r.map_corrupted
        ));
    }
    out
}

/// Render an aligned plain-text table of sweep outcomes.
pub fn sweep_table_text(outcomes: &[ScenarioOutcome]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>9} {:>9} {:>8}\n",
        "scenario", "mAP", "nds_lite", "drop%"
    ));
    for o in outcomes {
        out.push_str(&format!(
            "{:<16} {:>9.4} {:>9.4} {:>8.2}\n",
            o.scenario,
            o.map,
            o.nds_lite,
            o.relative_drop * 100.0
        ));
    }
    out
}
