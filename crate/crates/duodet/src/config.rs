//! Configuration for the whole pipeline.
//!
//! Everything is plain data with serde support so a single TOML file can
//! drive dataset generation, training, evaluation and the scenario runners.
//! CLI flags override individual keys via [`Config::apply_override`] using
//! dotted paths (for example `train.stage1_epochs=4`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World geometry and object population.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WorldConfig {
    /// BEV extent in meters: (x_min, x_max, y_min, y_max).
    pub extent: (f64, f64, f64, f64),
    /// Number of object classes, `C >= 2`.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Minimum center-to-center distance between any two boxes, meters.
    pub min_separation: f64,
    /// Per-class (width, length) ranges in meters, sampled uniformly.
    /// Length must equal `num_classes`.
    pub class_size_ranges: Vec<((f64, f64), (f64, f64))>,
    /// Placement attempts per object before giving up on the scene.
    pub max_placement_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            extent: (-16.0, 16.0, -16.0, 16.0),
            num_classes: 4,
            min_objects: 1,
            max_objects: 6,
            min_separation: 4.0,
            class_size_ranges: vec![
                ((1.6, 2.2), (3.8, 5.0)),  // car-like
                ((0.5, 0.9), (0.5, 0.9)),  // pedestrian-like
                ((0.5, 0.9), (1.6, 2.2)),  // cyclist-like
                ((2.2, 2.8), (6.0, 8.0)),  // truck-like
            ],
            max_placement_attempts: 200,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let (x0, x1, y0, y1) = self.extent;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::config("world extent must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects must be <= max_objects"));
        }
        if self.class_size_ranges.len() != self.num_classes {
            return Err(Error::config(format!(
                "class_size_ranges has {} entries for {} classes",
                self.class_size_ranges.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn extent_width(&self) -> f64 {
        self.extent.1 - self.extent.0
    }

    pub fn extent_height(&self) -> f64 {
        self.extent.3 - self.extent.2
    }
}

/// One synthetic sensor view.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SensorConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Gaussian footprint of an object in grid cells.
    pub blob_sigma_cells: f64,
    /// Bounded uniform background noise amplitude; cells carry
    /// `U(-floor, floor)` noise on every channel.
    pub noise_floor: f64,
    /// Label-smoothing mass moved off the true class in the class channels.
    pub class_confusion: f64,
    /// Probability that an object's class channels encode a random wrong
    /// class entirely.
    pub class_swap_prob: f64,
    /// Std-dev of the per-object center jitter, in cells (SEM only).
    pub jitter_sigma_cells: f64,
    /// Probability that a rendered scene carries an occlusion band (SEM only).
    pub occlusion_prob: f64,
    /// Width of the occlusion band as a fraction of the grid (SEM only).
    pub occlusion_fraction: f64,
    /// Number of pseudo-cameras; carried for shape fidelity. The SEM view
    /// renders a single grid, so values other than 1 are rejected.
    pub num_cameras: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            grid_h: 16,
            grid_w: 16,
            blob_sigma_cells: 0.6,
            noise_floor: 0.02,
            class_confusion: 0.0,
            class_swap_prob: 0.0,
            jitter_sigma_cells: 0.0,
            occlusion_prob: 0.0,
            occlusion_fraction: 0.0,
            num_cameras: 1,
        }
    }
}

impl SensorConfig {
    /// GEO defaults: accurate position, ambiguous class channels.
    pub fn default_geo() -> Self {
        SensorConfig {
            class_confusion: 0.55,
            class_swap_prob: 0.30,
            ..SensorConfig::default()
        }
    }

    /// SEM defaults: sharp class channels, jittered positions and
    /// occasional occlusion bands.
    pub fn default_sem() -> Self {
        SensorConfig {
            class_confusion: 0.05,
            jitter_sigma_cells: 0.45,
            occlusion_prob: 0.35,
            occlusion_fraction: 0.25,
            ..SensorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::config("sensor grid dims must be positive"));
        }
        if self.blob_sigma_cells <= 0.0 {
            return Err(Error::config("blob_sigma_cells must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(Error::config("occlusion_fraction must be in [0, 1]"));
        }
        if self.num_cameras != 1 {
            return Err(Error::config(
                "num_cameras is carried for shape fidelity only; must be 1",
            ));
        }
        Ok(())
    }

    /// Number of feature channels: intensity, width, length, one per class.
    pub fn num_channels(&self, num_classes: usize) -> usize {
        3 + num_classes
    }
}

/// Transformer and head dimensions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    /// Heads in the ensemble cross-attention layer.
    pub pme_heads: usize,
    /// Positional-encoding wavelength range in meters.
    pub pe_wavelength_min: f64,
    pub pe_wavelength_max: f64,
    /// Meters of center offset per unit of raw regression output; keeps the
    /// head's raw outputs near unit scale.
    pub offset_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_queries: 30,
            dim: 64,
            num_heads: 4,
            num_layers: 6,
            ffn_dim: 256,
            pme_heads: 1,
            pe_wavelength_min: 1.0,
            pe_wavelength_max: 64.0,
            offset_scale: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::config("num_queries must be >= 1"));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config(
                "model dim must be divisible by 4 (sin/cos pairs per axis)",
            ));
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::config("dim must be divisible by num_heads"));
        }
        if self.dim % self.pme_heads != 0 {
            return Err(Error::config("dim must be divisible by pme_heads"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        Ok(())
    }
}

/// Loss weights and focal hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub w_reg: f64,
    pub w_cls: f64,
    pub w_lc: f64,
    pub w_l: f64,
    pub w_c: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_reg: 2.0,
            w_cls: 0.25,
            w_lc: 1.0,
            w_l: 1.0,
            w_c: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_reg,
            self.w_cls,
            self.w_lc,
            self.w_l,
            self.w_c,
            self.focal_gamma,
            self.focal_alpha,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Learning-rate schedule tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Triangular cycle over the stage, peaking at the configured rate.
    CyclicTriangular,
    /// Linear warmup followed by cosine decay.
    CosineWarmup,
    /// Constant rate.
    Constant,
}

/// Two-stage training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    /// Stage 2 may be 0 epochs, which leaves the ensemble at initialization.
    pub stage2_epochs: usize,
    /// Fraction of stage-1 epochs with paste augmentation active (first
    /// `ceil(fraction * epochs)` epochs).
    pub augment_fraction: f64,
    /// Maximum boxes pasted per scene while augmentation is active.
    pub augment_max_paste: usize,
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage1_schedule: ScheduleKind,
    pub stage2_schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 20,
            stage2_epochs: 6,
            augment_fraction: 0.75,
            augment_max_paste: 2,
            batch_size: 8,
            stage1_lr: 1e-4,
            stage2_lr: 1e-4,
            stage1_schedule: ScheduleKind::CyclicTriangular,
            stage2_schedule: ScheduleKind::CosineWarmup,
            warmup_steps: 1000,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 {
            return Err(Error::config("stage1_epochs must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::config("augment_fraction must be in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.stage1_lr <= 0.0 || self.stage2_lr <= 0.0 {
            return Err(Error::config("learning rates must be > 0"));
        }
        Ok(())
    }
}

/// Dataset size and split fractions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    pub num_scenes: usize,
    /// (train, val, eval) fractions; eval receives the remainder.
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_scenes: 2500,
            split_fractions: (0.8, 0.08, 0.12),
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_fractions must be >= 0 and sum to 1"));
        }
        Ok(())
    }

    /// Deterministic split sizes: floor for train and val, remainder to eval.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.num_scenes;
        let n_train = (n as f64 * self.split_fractions.0).floor() as usize;
        let n_val = (n as f64 * self.split_fractions.1).floor() as usize;
        let n_eval = n - n_train - n_val;
        (n_train, n_val, n_eval)
    }
}

/// Evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Center-distance thresholds in meters, strictly increasing.
    pub distance_thresholds: Vec<f64>,
    /// Threshold (by index into `distance_thresholds`) at which true-positive
    /// translation and scale errors are collected.
    pub tp_error_threshold_index: usize,
    /// Minimum confidence a detection needs to enter the evaluation.
    pub score_floor: f64,
    /// Predictions kept by the top-k ensemble baseline.
    pub ensemble_topk_k: usize,
    /// Center-distance suppression radius of the NMS ensemble baseline,
    /// meters.
    pub ensemble_nms_dist: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            distance_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_error_threshold_index: 2,
            score_floor: 0.0,
            ensemble_topk_k: 30,
            ensemble_nms_dist: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distance_thresholds.is_empty() {
            return Err(Error::config("distance_thresholds must be non-empty"));
        }
        if !self
            .distance_thresholds
            .windows(2)
            .all(|w| w[1] > w[0] && w[0] > 0.0)
        {
            return Err(Error::config(
                "distance_thresholds must be positive and strictly increasing",
            ));
        }
        if self.tp_error_threshold_index >= self.distance_thresholds.len() {
            return Err(Error::config("tp_error_threshold_index out of range"));
        }
        Ok(())
    }
}

/// Corruption severity grids for the robustness sweep and the corrupted
/// evaluation split. Magnitudes are artifact choices, documented in the book.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RobustnessConfig {
    /// Additive-noise sigmas swept on both modalities.
    pub noise_sigmas: Vec<f64>,
    /// Occlusion-patch area fractions swept on the SEM view.
    pub occlusion_fractions: Vec<f64>,
    /// Additive-noise sigma used by the corrupted evaluation split.
    pub corrupted_noise_sigma: f64,
    /// Occlusion fraction used by the corrupted evaluation split.
    pub corrupted_occlusion_fraction: f64,
    /// Seed for corruption draws during evaluation.
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            noise_sigmas: vec![0.25, 0.5, 1.0],
            occlusion_fractions: vec![0.25, 0.5, 0.75],
            corrupted_noise_sigma: 0.8,
            corrupted_occlusion_fraction: 0.5,
            seed: 1013,
        }
    }
}

/// Top-level configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    pub world: WorldConfig,
    pub geo: SensorConfig,
    pub sem: SensorConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub robustness: RobustnessConfig,
}

impl Config {
    /// Defaults with per-modality sensor asymmetry applied.
    pub fn desk_default() -> Self {
        Config {
            geo: SensorConfig::default_geo(),
            sem: SensorConfig::default_sem(),
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.geo.validate()?;
        self.sem.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::config(format!("TOML parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply a single `dotted.path=value` override on top of this config.
    ///
    /// Implemented by round-tripping through a TOML document so every field
    /// is addressable without bespoke plumbing.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| {
            Error::config(format!("override '{assignment}' is not of form key=value"))
        })?;
        let mut doc: toml::Value = toml::Value::try_from(&*self)
            .map_err(|e| Error::config(format!("config to TOML: {e}")))?;
        let segments: Vec<&str> = path.trim().split('.').collect();
        set_path(&mut doc, &segments, value.trim(), path)?;
        let updated: Config = doc
            .try_into()
            .map_err(|e| Error::config(format!("override '{assignment}': {e}")))?;
        *self = updated;
        self.validate()
    }
}

fn set_path(doc: &mut toml::Value, segments: &[&str], text: &str, full: &str) -> Result<()> {
    let table = doc
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("'{full}' does not address a field")))?;
    match segments {
        [] => Err(Error::config(format!("empty config path '{full}'"))),
        [last] => {
            let existing = table
                .get(*last)
                .ok_or_else(|| Error::config(format!("unknown config key '{full}'")))?;
            let parsed = parse_toml_value(text, existing)?;
            table.insert((*last).to_string(), parsed);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .get_mut(*head)
                .ok_or_else(|| Error::config(format!("unknown config key '{full}'")))?;
            set_path(child, rest, text, full)
        }
    }
}

/// Parse an override value with the type of the existing field as a guide.
fn parse_toml_value(text: &str, like: &toml::Value) -> Result<toml::Value> {
    let parsed = match like {
        toml::Value::Integer(_) => toml::Value::Integer(
            text.parse::<i64>()
                .map_err(|e| Error::config(format!("expected integer, got '{text}': {e}")))?,
        ),
        toml::Value::Float(_) => toml::Value::Float(
            text.parse::<f64>()
                .map_err(|e| Error::config(format!("expected float, got '{text}': {e}")))?,
        ),
        toml::Value::Boolean(_) => toml::Value::Boolean(
            text.parse::<bool>()
                .map_err(|e| Error::config(format!("expected bool, got '{text}': {e}")))?,
        ),
        toml::Value::String(_) => toml::Value::String(text.to_string()),
        other => {
            // Arrays and tables: parse as a TOML fragment.
            let fragment = format!("v = {text}");
            let table: toml::Table = fragment
                .parse()
                .map_err(|e| Error::config(format!("cannot parse '{text}': {e}")))?;
            let v = table.get("v").cloned().unwrap();
            if std::mem::discriminant(&v) != std::mem::discriminant(other) {
                return Err(Error::config(format!(
                    "override value '{text}' has a different type than the field"
                )));
            }
            v
        }
    };
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        Config::desk_default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::desk_default();
        let text = cfg.to_toml_string();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn split_counts_match_fractions() {
        let data = DataConfig {
            num_scenes: 100,
            split_fractions: (0.8, 0.1, 0.1),
            seed: 0,
        };
        assert_eq!(data.split_counts(), (80, 10, 10));
    }

    #[test]
    fn override_changes_nested_key() {
        let mut cfg = Config::desk_default();
        cfg.apply_override("train.stage1_epochs=3").unwrap();
        assert_eq!(cfg.train.stage1_epochs, 3);
        cfg.apply_override("loss.w_reg=1.5").unwrap();
        assert_eq!(cfg.loss.w_reg, 1.5);
    }

    #[test]
    fn override_rejects_unknown_key() {
        let mut cfg = Config::desk_default();
        assert!(cfg.apply_override("train.bogus=3").is_err());
        assert!(cfg.apply_override("no_equals_sign").is_err());
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let mut cfg = Config::desk_default();
        cfg.eval.distance_thresholds = vec![1.0, 0.5];
        assert!(cfg.validate().is_err());
    }
}
