//! Dataset files: a line-delimited JSON index plus raw little-endian f32
//! tensor blobs.
//!
//! `index.jsonl` starts with a header record (schema version, config
//! snapshot, split counts) followed by one record per scene carrying the
//! ground truth, the render seeds, and byte ranges into `blobs.bin` for the
//! two rendered grids. Regenerating with the same config and seed produces
//! byte-identical files regardless of worker count.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng;
use crate::world::{
    cell_coordinates, generate_scene, render_geo_view, render_sem_view, Modality, NoiseSpec,
    Scene, SensorGrid,
};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.jsonl";
pub const BLOB_FILE: &str = "blobs.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Eval => write!(f, "eval"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Unknown {
                what: "split".into(),
                value: other.into(),
            }),
        }
    }
}

/// Byte range of one tensor in the blob file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: u64,
    pub len: u64,
    pub shape: (usize, usize, usize),
}

/// One stored grid: blob location plus its noise record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRef {
    pub blob: BlobRef,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum IndexRecord {
    #[serde(rename = "header")]
    Header(DatasetHeader),
    #[serde(rename = "scene")]
    Scene(Box<SceneRecord>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub num_scenes: usize,
    pub counts: (usize, usize, usize),
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub schema_version: u32,
    pub id: usize,
    pub split: Split,
    pub scene: Scene,
    pub geo_seed: u64,
    pub sem_seed: u64,
    pub geo: GridRef,
    pub sem: GridRef,
}

/// An in-memory dataset: records plus the raw blob bytes.
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SceneRecord>,
    blobs: Vec<u8>,
}

/// Render seeds for scene `i` under data seed `s`.
pub fn render_seeds(data_seed: u64, index: usize) -> (u64, u64) {
    (
        rng::child_seed(data_seed, "render-geo", index as u64),
        rng::child_seed(data_seed, "render-sem", index as u64),
    )
}

fn grid_bytes(grid: &SensorGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(grid.values.len() * 4);
    for v in grid.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Generate every scene, render both views, and write the dataset files.
pub fn generate(cfg: &Config, out_dir: &Path, workers: usize) -> Result<DatasetHeader> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let n = cfg.data.num_scenes;
    let (n_train, n_val, _) = cfg.data.split_counts();
    let classes = cfg.world.num_classes;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let rendered: Vec<Result<(Scene, SensorGrid, SensorGrid)>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let scene_seed = rng::child_seed(cfg.data.seed, "scene", i as u64);
                let scene = generate_scene(scene_seed, &cfg.world)?;
                let (geo_seed, sem_seed) = render_seeds(cfg.data.seed, i);
                let geo = render_geo_view(&scene, &cfg.geo, classes, geo_seed);
                let sem = render_sem_view(&scene, &cfg.sem, classes, sem_seed);
                Ok((scene, geo, sem))
            })
            .collect()
    });

    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        num_scenes: n,
        counts: cfg.data.split_counts(),
        config: cfg.clone(),
    };
    let index_path = out_dir.join(INDEX_FILE);
    let blob_path = out_dir.join(BLOB_FILE);
    let mut index = std::io::BufWriter::new(
        std::fs::File::create(&index_path)
            .map_err(|e| Error::io(index_path.display().to_string(), e))?,
    );
    let mut blobs = std::io::BufWriter::new(
        std::fs::File::create(&blob_path)
            .map_err(|e| Error::io(blob_path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error, p: &PathBuf| Error::io(p.display().to_string(), e);

    let header_line = serde_json::to_string(&IndexRecord::Header(header.clone()))?;
    index
        .write_all(header_line.as_bytes())
        .and_then(|_| index.write_all(b"\n"))
        .map_err(|e| io_err(e, &index_path))?;

    let mut offset = 0u64;
    for (i, item) in rendered.into_iter().enumerate() {
        let (scene, geo, sem) = item?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Eval
        };
        let (geo_seed, sem_seed) = render_seeds(cfg.data.seed, i);
        let mut refs = Vec::with_capacity(2);
        for grid in [&geo, &sem] {
            let bytes = grid_bytes(grid);
            blobs.write_all(&bytes).map_err(|e| io_err(e, &blob_path))?;
            refs.push(GridRef {
                blob: BlobRef {
                    offset,
                    len: bytes.len() as u64,
                    shape: grid.values.dim(),
                },
                noise: grid.noise_spec.clone(),
            });
            offset += bytes.len() as u64;
        }
        let record = SceneRecord {
            schema_version: DATASET_SCHEMA_VERSION,
            id: i,
            split,
            scene,
            geo_seed,
            sem_seed,
            sem: refs.pop().expect("sem ref"),
            geo: refs.pop().expect("geo ref"),
        };
        let line = serde_json::to_string(&IndexRecord::Scene(Box::new(record)))?;
        index
            .write_all(line.as_bytes())
            .and_then(|_| index.write_all(b"\n"))
            .map_err(|e| io_err(e, &index_path))?;
    }
    index.flush().map_err(|e| io_err(e, &index_path))?;
    blobs.flush().map_err(|e| io_err(e, &blob_path))?;
    Ok(header)
}

/// Load a dataset directory written by [`generate`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::io(index_path.display().to_string(), e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: IndexRecord = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", lineno + 1)))?;
        match record {
            IndexRecord::Header(h) => {
                if h.schema_version != DATASET_SCHEMA_VERSION {
                    return Err(Error::DatasetVersion {
                        got: h.schema_version,
                        expected: DATASET_SCHEMA_VERSION,
                    });
                }
                header = Some(h);
            }
            IndexRecord::Scene(s) => records.push(*s),
        }
    }
    let header = header.ok_or_else(|| Error::Dataset("missing header record".into()))?;
    let blob_path = dir.join(BLOB_FILE);
    let blobs = std::fs::read(&blob_path)
        .map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    Ok(Dataset {
        header,
        records,
        blobs,
    })
}

impl Dataset {
    pub fn split_records(&self, split: Split) -> Vec<&SceneRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Reconstruct a stored grid.
    pub fn grid(&self, record: &SceneRecord, modality: Modality) -> Result<SensorGrid> {
        let (gref, tag) = match modality {
            Modality::Geo => (&record.geo, Modality::Geo),
            Modality::Sem => (&record.sem, Modality::Sem),
        };
        let start = gref.blob.offset as usize;
        let end = start + gref.blob.len as usize;
        if end > self.blobs.len() {
            return Err(Error::Dataset(format!(
                "blob range {start}..{end} out of bounds for scene {}",
                record.id
            )));
        }
        let bytes = &self.blobs[start..end];
        let (h, w, f) = gref.blob.shape;
        if bytes.len() != h * w * f * 4 {
            return Err(Error::Dataset(format!(
                "blob length {} does not match shape {:?} for scene {}",
                bytes.len(),
                gref.blob.shape,
                record.id
            )));
        }
        let mut values = Array3::<f32>::zeros((h, w, f));
        for (k, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            let ch = k % f;
            let col = (k / f) % w;
            let row = k / (f * w);
            values[[row, col, ch]] = v;
        }
        Ok(SensorGrid {
            modality: tag,
            values,
            cell_coords: cell_coordinates(
                record.scene.world_extent,
                h,
                w,
            ),
            noise_spec: gref.noise.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::desk_default();
        cfg.data.num_scenes = 10;
        cfg.data.split_fractions = (0.8, 0.1, 0.1);
        cfg
    }

    #[test]
    fn generate_load_round_trip() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let header = generate(&cfg, dir.path(), 2).unwrap();
        assert_eq!(header.counts, (8, 1, 1));
        let ds = load(dir.path()).unwrap();
        assert_eq!(ds.records.len(), 10);
        assert_eq!(ds.split_records(Split::Train).len(), 8);
        assert_eq!(ds.split_records(Split::Val).len(), 1);
        assert_eq!(ds.split_records(Split::Eval).len(), 1);
        // stored grid equals a fresh render
        let rec = &ds.records[3];
        let stored = ds.grid(rec, Modality::Geo).unwrap();
        let fresh = render_geo_view(
            &rec.scene,
            &cfg.geo,
            cfg.world.num_classes,
            rec.geo_seed,
        );
        assert_eq!(stored.values, fresh.values);
        assert_eq!(stored.noise_spec, fresh.noise_spec);
    }

    #[test]
    fn regeneration_is_byte_identical_across_worker_counts() {
        let cfg = tiny_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&cfg, d1.path(), 1).unwrap();
        generate(&cfg, d2.path(), 2).unwrap();
        for file in [INDEX_FILE, BLOB_FILE] {
            let a = std::fs::read(d1.path().join(file)).unwrap();
            let b = std::fs::read(d2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs");
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg, dir.path(), 1).unwrap();
        let index_path = dir.path().join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).unwrap();
        let patched = text.replacen("\"schema_version\":1", "\"schema_version\":99", 1);
        std::fs::write(&index_path, patched).unwrap();
        assert!(matches!(
            load(dir.path()),
            Err(Error::DatasetVersion { got: 99, .. })
        ));
    }
}
