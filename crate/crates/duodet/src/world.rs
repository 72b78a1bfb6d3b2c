//! Synthetic BEV world: scene generation, the two sensor views, corruption
//! transforms, and paste augmentation.
//!
//! The two views are deliberately complementary. The GEO view deposits
//! feature blobs exactly at object centers but encodes classes through a
//! heavily smoothed, sometimes swapped distribution; the SEM view carries
//! near-one-hot class channels but jitters blob centers and may lose a band
//! of the grid to occlusion. A detector therefore needs the GEO view for
//! geometry and the SEM view for semantics, and neither alone tells the
//! whole story.
//!
//! Every function here is a pure function of its inputs and an explicit
//! seed; repeated calls are bit-identical.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SensorConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::rng;

/// Feature-channel layout of a [`SensorGrid`].
pub const CH_INTENSITY: usize = 0;
pub const CH_WIDTH: usize = 1;
pub const CH_LENGTH: usize = 2;
/// Class channels start here; there are `num_classes` of them.
pub const CH_CLASS0: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    /// BEV center (x, y) in meters.
    pub center: (f64, f64),
    /// (width, length) in meters; width along x, length along y.
    pub size: (f64, f64),
    pub class_id: usize,
    /// Heading in radians; carried for fidelity, zero in this world.
    #[serde(default)]
    pub yaw: f64,
}

impl GroundTruthBox {
    pub fn center_distance(&self, other: &GroundTruthBox) -> f64 {
        let dx = self.center.0 - other.center.0;
        let dy = self.center.1 - other.center.1;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Ground-truth world state for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<GroundTruthBox>,
    /// (x_min, x_max, y_min, y_max) in meters.
    pub world_extent: (f64, f64, f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Geo,
    Sem,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Geo => write!(f, "GEO"),
            Modality::Sem => write!(f, "SEM"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TargetModality {
    Geo,
    Sem,
    Both,
}

impl TargetModality {
    pub fn matches(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (TargetModality::Both, _)
                | (TargetModality::Geo, Modality::Geo)
                | (TargetModality::Sem, Modality::Sem)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorruptionKind {
    None,
    MissingModality,
    AdditiveNoise,
    OcclusionPatch,
    PositionJitter,
}

/// A corruption to apply to a rendered grid at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Noise sigma for `AdditiveNoise`, masked area fraction in (0, 1] for
    /// `OcclusionPatch`, shift scale in cells for `PositionJitter`; ignored
    /// by `MissingModality`.
    pub magnitude: f64,
    pub target: TargetModality,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        CorruptionSpec {
            kind: CorruptionKind::None,
            magnitude: 0.0,
            target: TargetModality::Both,
            seed: 0,
        }
    }

    pub fn missing(target: TargetModality) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::MissingModality,
            magnitude: 0.0,
            target,
            seed: 0,
        }
    }

    pub fn noise(sigma: f64, target: TargetModality, seed: u64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::AdditiveNoise,
            magnitude: sigma,
            target,
            seed,
        }
    }

    pub fn occlusion(fraction: f64, target: TargetModality, seed: u64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::OcclusionPatch,
            magnitude: fraction,
            target,
            seed,
        }
    }
}

/// Record of noise and corruption applied to a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseSpec {
    pub noise_floor: f64,
    pub jitter_sigma_cells: f64,
    pub occluded_fraction: f64,
    pub missing: bool,
    pub corruptions: Vec<CorruptionSpec>,
}

/// One modality's rendered dense feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    pub modality: Modality,
    /// (H, W, 3 + num_classes) features.
    pub values: Array3<f32>,
    /// (H*W, 2) BEV cell centers, row-major over (row, col).
    pub cell_coords: Array2<f64>,
    pub noise_spec: NoiseSpec,
}

impl SensorGrid {
    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    /// Mean absolute feature value; the "energy" used by the occlusion
    /// monotonicity property.
    pub fn mean_abs_energy(&self) -> f64 {
        let n = self.values.len() as f64;
        self.values.iter().map(|v| v.abs() as f64).sum::<f64>() / n
    }

    pub fn is_missing(&self) -> bool {
        self.noise_spec.missing
    }
}

/// BEV coordinates of every cell center, row-major.
pub fn cell_coordinates(extent: (f64, f64, f64, f64), h: usize, w: usize) -> Array2<f64> {
    let (x_min, x_max, y_min, y_max) = extent;
    let cell_w = (x_max - x_min) / w as f64;
    let cell_h = (y_max - y_min) / h as f64;
    let mut coords = Array2::zeros((h * w, 2));
    for i in 0..h {
        for j in 0..w {
            coords[[i * w + j, 0]] = x_min + (j as f64 + 0.5) * cell_w;
            coords[[i * w + j, 1]] = y_min + (i as f64 + 0.5) * cell_h;
        }
    }
    coords
}

/// Draw a standard normal via Box-Muller; deterministic for a given stream.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a ground-truth scene. Deterministic in (seed, cfg).
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "scene", 0);
    let n = r.random_range(cfg.min_objects..=cfg.max_objects);
    let (x_min, x_max, y_min, y_max) = cfg.extent;
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..cfg.max_placement_attempts {
            let class_id = r.random_range(0..cfg.num_classes);
            let ((w_lo, w_hi), (l_lo, l_hi)) = cfg.class_size_ranges[class_id];
            let w = r.random_range(w_lo..w_hi);
            let l = r.random_range(l_lo..l_hi);
            let cx = r.random_range(x_min + w / 2.0..x_max - w / 2.0);
            let cy = r.random_range(y_min + l / 2.0..y_max - l / 2.0);
            let candidate = GroundTruthBox {
                center: (cx, cy),
                size: (w, l),
                class_id,
                yaw: 0.0,
            };
            if boxes
                .iter()
                .all(|b| b.center_distance(&candidate) >= cfg.min_separation)
            {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SceneGeneration {
                seed,
                reason: format!(
                    "could not place object {} of {n} after {} attempts",
                    boxes.len() + 1,
                    cfg.max_placement_attempts
                ),
            });
        }
    }
    Ok(Scene {
        boxes,
        world_extent: cfg.extent,
        seed,
    })
}

/// Smoothed class distribution deposited into the class channels.
fn class_distribution(
    true_class: usize,
    num_classes: usize,
    confusion: f64,
    swap_prob: f64,
    r: &mut impl Rng,
) -> Vec<f64> {
    let effective = if swap_prob > 0.0 && r.random::<f64>() < swap_prob {
        // encode a random *wrong* class entirely
        let offset = r.random_range(1..num_classes);
        (true_class + offset) % num_classes
    } else {
        true_class
    };
    (0..num_classes)
        .map(|c| {
            let one_hot = if c == effective { 1.0 } else { 0.0 };
            (1.0 - confusion) * one_hot + confusion / num_classes as f64
        })
        .collect()
}

struct RenderedObject {
    /// Blob center in fractional cell units (col, row).
    cell_x: f64,
    cell_y: f64,
    size: (f64, f64),
    class_dist: Vec<f64>,
}

fn render_view(
    scene: &Scene,
    cfg: &SensorConfig,
    num_classes: usize,
    modality: Modality,
    noise_seed: u64,
) -> SensorGrid {
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let channels = cfg.num_channels(num_classes);
    let (x_min, x_max, y_min, y_max) = scene.world_extent;
    let cell_w = (x_max - x_min) / w as f64;
    let cell_h = (y_max - y_min) / h as f64;

    // Independent streams per purpose so one knob never shifts another's draws.
    let mut floor_rng = rng::stream(noise_seed, "floor", 0);
    let mut class_rng = rng::stream(noise_seed, "class", 0);
    let mut jitter_rng = rng::stream(noise_seed, "jitter", 0);
    let mut occlusion_rng = rng::stream(noise_seed, "occlusion", 0);

    let mut values = Array3::<f32>::zeros((h, w, channels));
    if cfg.noise_floor > 0.0 {
        for v in values.iter_mut() {
            *v = floor_rng.random_range(-cfg.noise_floor..cfg.noise_floor) as f32;
        }
    }

    let objects: Vec<RenderedObject> = scene
        .boxes
        .iter()
        .map(|b| {
            let mut cell_x = (b.center.0 - x_min) / cell_w - 0.5;
            let mut cell_y = (b.center.1 - y_min) / cell_h - 0.5;
            if cfg.jitter_sigma_cells > 0.0 {
                cell_x += cfg.jitter_sigma_cells * standard_normal(&mut jitter_rng);
                cell_y += cfg.jitter_sigma_cells * standard_normal(&mut jitter_rng);
            }
            RenderedObject {
                cell_x,
                cell_y,
                size: b.size,
                class_dist: class_distribution(
                    b.class_id,
                    num_classes,
                    cfg.class_confusion,
                    cfg.class_swap_prob,
                    &mut class_rng,
                ),
            }
        })
        .collect();

    let two_sigma_sq = 2.0 * cfg.blob_sigma_cells * cfg.blob_sigma_cells;
    for obj in &objects {
        for i in 0..h {
            for j in 0..w {
                let dx = j as f64 - obj.cell_x;
                let dy = i as f64 - obj.cell_y;
                let g = (-(dx * dx + dy * dy) / two_sigma_sq).exp();
                if g < 1e-6 {
                    continue;
                }
                values[[i, j, CH_INTENSITY]] += g as f32;
                values[[i, j, CH_WIDTH]] += (g * obj.size.0) as f32;
                values[[i, j, CH_LENGTH]] += (g * obj.size.1) as f32;
                for (c, q) in obj.class_dist.iter().enumerate() {
                    values[[i, j, CH_CLASS0 + c]] += (g * q) as f32;
                }
            }
        }
    }

    // Occlusion band: wrapping column range whose start is drawn
    // independently of the fraction, so a wider band is a superset.
    let mut occluded_fraction = 0.0;
    if cfg.occlusion_prob > 0.0 && cfg.occlusion_fraction > 0.0 {
        let roll: f64 = occlusion_rng.random();
        let start = occlusion_rng.random_range(0..w);
        if roll < cfg.occlusion_prob {
            occluded_fraction = cfg.occlusion_fraction;
            let band = (cfg.occlusion_fraction * w as f64).round() as usize;
            for k in 0..band.min(w) {
                let col = (start + k) % w;
                for i in 0..h {
                    for ch in 0..channels {
                        values[[i, col, ch]] = 0.0;
                    }
                }
            }
        }
    }

    SensorGrid {
        modality,
        values,
        cell_coords: cell_coordinates(scene.world_extent, h, w),
        noise_spec: NoiseSpec {
            noise_floor: cfg.noise_floor,
            jitter_sigma_cells: cfg.jitter_sigma_cells,
            occluded_fraction,
            missing: false,
            corruptions: Vec::new(),
        },
    }
}

/// Render the GEO view: blobs at true centers, degraded class channels.
pub fn render_geo_view(
    scene: &Scene,
    cfg: &SensorConfig,
    num_classes: usize,
    noise_seed: u64,
) -> SensorGrid {
    render_view(scene, cfg, num_classes, Modality::Geo, noise_seed)
}

/// Render the SEM view: jittered blob centers, sharp class channels,
/// optional occlusion band.
pub fn render_sem_view(
    scene: &Scene,
    cfg: &SensorConfig,
    num_classes: usize,
    noise_seed: u64,
) -> SensorGrid {
    render_view(scene, cfg, num_classes, Modality::Sem, noise_seed)
}

/// Apply a corruption, returning a new grid. `None` and zero-magnitude
/// specs are exact identities.
pub fn apply_corruption(grid: &SensorGrid, spec: &CorruptionSpec) -> Result<SensorGrid> {
    if spec.kind == CorruptionKind::None {
        return Ok(grid.clone());
    }
    if !spec.target.matches(grid.modality) {
        return Err(Error::Unknown {
            what: "corruption target".into(),
            value: format!(
                "{:?} does not match grid modality {}",
                spec.target, grid.modality
            ),
        });
    }
    let mut out = grid.clone();
    match spec.kind {
        CorruptionKind::None => unreachable!(),
        CorruptionKind::MissingModality => {
            out.values.fill(0.0);
            out.noise_spec.missing = true;
            out.noise_spec.corruptions.push(*spec);
        }
        CorruptionKind::AdditiveNoise => {
            if spec.magnitude == 0.0 {
                return Ok(out);
            }
            let mut r = rng::stream(spec.seed, "corrupt-noise", 0);
            for v in out.values.iter_mut() {
                *v += (spec.magnitude * standard_normal(&mut r)) as f32;
            }
            out.noise_spec.corruptions.push(*spec);
        }
        CorruptionKind::OcclusionPatch => {
            if spec.magnitude == 0.0 {
                return Ok(out);
            }
            if !(0.0..=1.0).contains(&spec.magnitude) {
                return Err(Error::config(format!(
                    "occlusion fraction {} outside (0, 1]",
                    spec.magnitude
                )));
            }
            // Rectangular patch of the requested area fraction, seeded
            // position, wrapping in both axes.
            let (h, w) = (out.height(), out.width());
            let side = spec.magnitude.sqrt();
            let ph = ((side * h as f64).round() as usize).clamp(1, h);
            let pw = ((side * w as f64).round() as usize).clamp(1, w);
            let mut r = rng::stream(spec.seed, "corrupt-occlusion", 0);
            let i0 = r.random_range(0..h);
            let j0 = r.random_range(0..w);
            for di in 0..ph {
                for dj in 0..pw {
                    let i = (i0 + di) % h;
                    let j = (j0 + dj) % w;
                    for ch in 0..out.channels() {
                        out.values[[i, j, ch]] = 0.0;
                    }
                }
            }
            out.noise_spec.occluded_fraction =
                (out.noise_spec.occluded_fraction + spec.magnitude).min(1.0);
            out.noise_spec.corruptions.push(*spec);
        }
        CorruptionKind::PositionJitter => {
            if spec.magnitude == 0.0 {
                return Ok(out);
            }
            // Global integer cell shift, as from extrinsic miscalibration.
            let mut r = rng::stream(spec.seed, "corrupt-jitter", 0);
            let amp = spec.magnitude.ceil() as i64;
            let di = r.random_range(-amp..=amp);
            let dj = r.random_range(-amp..=amp);
            let (h, w) = (out.height(), out.width());
            let mut shifted = Array3::<f32>::zeros(out.values.dim());
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (si, sj) = (i - di, j - dj);
                    if si >= 0 && si < h as i64 && sj >= 0 && sj < w as i64 {
                        for ch in 0..out.channels() {
                            shifted[[i as usize, j as usize, ch]] =
                                out.values[[si as usize, sj as usize, ch]];
                        }
                    }
                }
            }
            out.values = shifted;
            out.noise_spec.corruptions.push(*spec);
        }
    }
    Ok(out)
}

/// Paste boxes from a bank into a scene, skipping any paste that would
/// violate the minimum separation. Returns a new scene.
pub fn paste_augment(
    scene: &Scene,
    bank: &[GroundTruthBox],
    seed: u64,
    max_paste: usize,
    min_separation: f64,
) -> Scene {
    let mut out = scene.clone();
    if bank.is_empty() || max_paste == 0 {
        return out;
    }
    let mut r = rng::stream(seed, "paste", 0);
    let k = r.random_range(0..=max_paste);
    for _ in 0..k {
        let candidate = bank[r.random_range(0..bank.len())];
        let ok = out
            .boxes
            .iter()
            .all(|b| b.center_distance(&candidate) >= min_separation);
        if ok {
            out.boxes.push(candidate);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn world_cfg() -> WorldConfig {
        Config::desk_default().world
    }

    fn quiet_sensor() -> SensorConfig {
        SensorConfig {
            noise_floor: 0.0,
            class_confusion: 0.0,
            class_swap_prob: 0.0,
            jitter_sigma_cells: 0.0,
            occlusion_prob: 0.0,
            occlusion_fraction: 0.0,
            ..SensorConfig::default()
        }
    }

    #[test]
    fn zero_objects_gives_empty_scene() {
        let cfg = WorldConfig {
            min_objects: 0,
            max_objects: 0,
            ..world_cfg()
        };
        let scene = generate_scene(7, &cfg).unwrap();
        assert!(scene.boxes.is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = world_cfg();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &cfg).unwrap();
        assert_ne!(a, c, "different seeds must differ in at least one box");
    }

    #[test]
    fn scene_respects_bounds_and_separation() {
        let cfg = world_cfg();
        for seed in 0..50 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let (x0, x1, y0, y1) = cfg.extent;
            for b in &scene.boxes {
                assert!(b.center.0 >= x0 && b.center.0 <= x1);
                assert!(b.center.1 >= y0 && b.center.1 <= y1);
                assert!(b.size.0 > 0.0 && b.size.1 > 0.0);
                assert!(b.class_id < cfg.num_classes);
            }
            for (i, a) in scene.boxes.iter().enumerate() {
                for b in scene.boxes.iter().skip(i + 1) {
                    assert!(a.center_distance(b) >= cfg.min_separation);
                }
            }
        }
    }

    #[test]
    fn infeasible_placement_reports_seed() {
        let cfg = WorldConfig {
            min_objects: 50,
            max_objects: 50,
            min_separation: 100.0,
            max_placement_attempts: 5,
            ..world_cfg()
        };
        let err = generate_scene(33, &cfg).unwrap_err();
        assert!(err.to_string().contains("33"), "{err}");
    }

    #[test]
    fn empty_scene_renders_within_noise_floor() {
        let cfg = SensorConfig {
            noise_floor: 0.05,
            ..quiet_sensor()
        };
        let scene = Scene {
            boxes: vec![],
            world_extent: (-16.0, 16.0, -16.0, 16.0),
            seed: 0,
        };
        let grid = render_geo_view(&scene, &cfg, 4, 3);
        for v in grid.values.iter() {
            assert!(v.abs() <= 0.05);
        }
    }

    #[test]
    fn noiseless_blob_peaks_at_center_cell() {
        let cfg = quiet_sensor();
        // Cell (row 4, col 10) center for a 16x16 grid over [-16, 16].
        let coords = cell_coordinates((-16.0, 16.0, -16.0, 16.0), 16, 16);
        let idx = 4 * 16 + 10;
        let scene = Scene {
            boxes: vec![GroundTruthBox {
                center: (coords[[idx, 0]], coords[[idx, 1]]),
                size: (2.0, 4.0),
                class_id: 1,
                yaw: 0.0,
            }],
            world_extent: (-16.0, 16.0, -16.0, 16.0),
            seed: 0,
        };
        for grid in [
            render_geo_view(&scene, &cfg, 4, 5),
            render_sem_view(&scene, &cfg, 4, 5),
        ] {
            let mut best = (0, 0);
            let mut best_v = f32::MIN;
            for i in 0..16 {
                for j in 0..16 {
                    if grid.values[[i, j, CH_INTENSITY]] > best_v {
                        best_v = grid.values[[i, j, CH_INTENSITY]];
                        best = (i, j);
                    }
                }
            }
            assert_eq!(best, (4, 10));
        }
    }

    #[test]
    fn geo_noise_seed_changes_residual_not_blobs() {
        let cfg = SensorConfig {
            noise_floor: 0.05,
            ..quiet_sensor()
        };
        let scene = generate_scene(3, &world_cfg()).unwrap();
        let a = render_geo_view(&scene, &cfg, 4, 1);
        let b = render_geo_view(&scene, &cfg, 4, 2);
        assert_ne!(a.values, b.values);
        // Blob component identical: difference bounded by twice the floor.
        for (va, vb) in a.values.iter().zip(b.values.iter()) {
            assert!((va - vb).abs() <= 0.1 + 1e-6);
        }
        let again = render_geo_view(&scene, &cfg, 4, 1);
        assert_eq!(a, again);
    }

    #[test]
    fn sem_jitter_mean_displacement_within_monte_carlo_bound() {
        // Blob-center displacement over many renders: empirical mean within
        // 3*sigma/sqrt(n) of zero per axis.
        let sigma = 2.0;
        let cfg = SensorConfig {
            jitter_sigma_cells: sigma,
            blob_sigma_cells: 0.6,
            ..quiet_sensor()
        };
        let scene = Scene {
            boxes: vec![GroundTruthBox {
                center: (1.0, 1.0),
                size: (2.0, 2.0),
                class_id: 0,
                yaw: 0.0,
            }],
            world_extent: (-16.0, 16.0, -16.0, 16.0),
            seed: 0,
        };
        let n = 1000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for seed in 0..n {
            let grid = render_sem_view(&scene, &cfg, 1, seed as u64);
            // Centroid of intensity mass, in cells, relative to the true center.
            let (mut m, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..grid.height() {
                for j in 0..grid.width() {
                    let v = grid.values[[i, j, CH_INTENSITY]] as f64;
                    m += v;
                    mx += v * j as f64;
                    my += v * i as f64;
                }
            }
            let true_cx = (1.0 - (-16.0)) / 2.0 - 0.5;
            let true_cy = true_cx;
            sx += mx / m - true_cx;
            sy += my / m - true_cy;
        }
        let bound = 3.0 * sigma / (n as f64).sqrt();
        // Centroid truncation at grid borders biases slightly; allow an
        // extra half-bound of slack.
        let slack = 1.5 * bound;
        assert!((sx / n as f64).abs() <= slack, "mean dx {}", sx / n as f64);
        assert!((sy / n as f64).abs() <= slack, "mean dy {}", sy / n as f64);
    }

    #[test]
    fn full_occlusion_zeroes_grid() {
        let cfg = SensorConfig {
            noise_floor: 0.05,
            occlusion_prob: 1.0,
            occlusion_fraction: 1.0,
            jitter_sigma_cells: 0.3,
            ..SensorConfig::default()
        };
        let scene = generate_scene(5, &world_cfg()).unwrap();
        let grid = render_sem_view(&scene, &cfg, 4, 9);
        assert!(grid.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn occlusion_energy_monotone_in_fraction() {
        let scene = generate_scene(11, &world_cfg()).unwrap();
        let mut last = f64::INFINITY;
        for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let cfg = SensorConfig {
                occlusion_prob: 1.0,
                occlusion_fraction: frac,
                noise_floor: 0.05,
                ..SensorConfig::default()
            };
            let grid = render_sem_view(&scene, &cfg, 4, 21);
            let e = grid.mean_abs_energy();
            assert!(e <= last + 1e-12, "energy must be non-increasing");
            last = e;
        }
    }

    #[test]
    fn corruption_none_and_zero_noise_are_identity() {
        let scene = generate_scene(2, &world_cfg()).unwrap();
        let grid = render_geo_view(&scene, &quiet_sensor(), 4, 0);
        let same = apply_corruption(&grid, &CorruptionSpec::none()).unwrap();
        assert_eq!(grid, same);
        let zero_noise =
            apply_corruption(&grid, &CorruptionSpec::noise(0.0, TargetModality::Both, 4)).unwrap();
        assert_eq!(grid, zero_noise);
    }

    #[test]
    fn missing_modality_zeroes_and_flags() {
        let scene = generate_scene(2, &world_cfg()).unwrap();
        let grid = render_geo_view(&scene, &quiet_sensor(), 4, 0);
        let gone = apply_corruption(&grid, &CorruptionSpec::missing(TargetModality::Geo)).unwrap();
        assert!(gone.values.iter().all(|v| *v == 0.0));
        assert!(gone.is_missing());
        // purity: input untouched
        assert!(!grid.is_missing());
        assert!(grid.values.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn corruption_rejects_mismatched_target() {
        let scene = generate_scene(2, &world_cfg()).unwrap();
        let grid = render_geo_view(&scene, &quiet_sensor(), 4, 0);
        let res = apply_corruption(&grid, &CorruptionSpec::missing(TargetModality::Sem));
        assert!(res.is_err());
    }

    #[test]
    fn paste_augment_contract() {
        let cfg = world_cfg();
        let scene = Scene {
            boxes: vec![],
            world_extent: cfg.extent,
            seed: 0,
        };
        let bank: Vec<GroundTruthBox> = generate_scene(40, &cfg).unwrap().boxes;
        assert!(!bank.is_empty());
        // zero budget: identity
        let same = paste_augment(&scene, &bank, 1, 0, cfg.min_separation);
        assert_eq!(scene, same);
        // bounded by max_paste
        let pasted = paste_augment(&scene, &bank, 1, 3, cfg.min_separation);
        assert!(pasted.boxes.len() <= 3);
        // deterministic
        let again = paste_augment(&scene, &bank, 1, 3, cfg.min_separation);
        assert_eq!(pasted, again);
        // separation respected
        let busy = generate_scene(13, &cfg).unwrap();
        let augmented = paste_augment(&busy, &bank, 5, 3, cfg.min_separation);
        for (i, a) in augmented.boxes.iter().enumerate() {
            for b in augmented.boxes.iter().skip(i + 1) {
                assert!(a.center_distance(b) >= cfg.min_separation);
            }
        }
    }

    #[test]
    fn local_intensity_peak_contains_true_center() {
        // Geometry fidelity with all noise off: the cell containing each
        // object's center is the strongest within half the separation radius.
        let wcfg = world_cfg();
        let scfg = quiet_sensor();
        for seed in [1u64, 2, 3, 4, 5] {
            let scene = generate_scene(seed, &wcfg).unwrap();
            for grid in [
                render_geo_view(&scene, &scfg, wcfg.num_classes, 0),
                render_sem_view(&scene, &scfg, wcfg.num_classes, 0),
            ] {
                let (h, w) = (grid.height(), grid.width());
                let cell_w = wcfg.extent_width() / w as f64;
                let cell_h = wcfg.extent_height() / h as f64;
                for b in &scene.boxes {
                    let j = (((b.center.0 - wcfg.extent.0) / cell_w).floor() as usize).min(w - 1);
                    let i = (((b.center.1 - wcfg.extent.2) / cell_h).floor() as usize).min(h - 1);
                    let radius = (wcfg.min_separation / 2.0 / cell_w).floor() as i64;
                    let center_v = grid.values[[i, j, CH_INTENSITY]];
                    for di in -radius..=radius {
                        for dj in -radius..=radius {
                            let (ii, jj) = (i as i64 + di, j as i64 + dj);
                            if ii < 0 || jj < 0 || ii >= h as i64 || jj >= w as i64 {
                                continue;
                            }
                            let v = grid.values[[ii as usize, jj as usize, CH_INTENSITY]];
                            assert!(
                                v <= center_v,
                                "cell ({ii},{jj}) brighter than center ({i},{j})"
                            );
                        }
                    }
                }
            }
        }
    }
}
