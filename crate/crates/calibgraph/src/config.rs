//! Run configuration and run-directory layout.
//!
//! A run directory is created by `generate` and filled in by the later
//! stages:
//!
//! ```text
//! run_dir/
//!   config.json            run configuration snapshot
//!   bev.png, palette.json  the scene
//!   manifest.jsonl         one record per view sample
//!   manifest_meta.json     scene metadata + generation snapshot
//!   images/                8-bit label PNGs
//!   graph/                 edge list CSV + metadata
//!   checkpoints/           parameter checkpoints per variant/seed
//!   metrics/               JSON-lines training logs
//!   eval/                  evaluation records + overlay PNGs
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::CameraGrid;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::scene::ProceduralSpec;
use crate::train::TrainConfig;

/// Where the scene comes from: a procedural generator or files on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SceneConfig {
    Procedural { spec: ProceduralSpec, seed: u64 },
    File { bev: PathBuf, palette: PathBuf, meters_per_pixel: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub grid: CameraGrid,
    #[serde(default = "default_min_foreground")]
    pub min_foreground: f64,
    #[serde(default = "default_dictionary_fraction")]
    pub dictionary_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_min_foreground() -> f64 {
    0.2
}
fn default_dictionary_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Neighbors per node in the template graph.
    #[serde(default = "default_k")]
    pub k: usize,
    /// First-hop fanout of mini-batch sampling.
    #[serde(default = "default_fanout1")]
    pub fanout1: usize,
    /// Second-hop fanout of mini-batch sampling.
    #[serde(default = "default_fanout2")]
    pub fanout2: usize,
}

fn default_k() -> usize {
    20
}
fn default_fanout1() -> usize {
    10
}
fn default_fanout2() -> usize {
    5
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: default_k(), fanout1: default_fanout1(), fanout2: default_fanout2() }
    }
}

/// Full pipeline configuration: one JSON file with one section per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_scene_id")]
    pub scene_id: String,
    pub scene: SceneConfig,
    pub datagen: DatagenConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_scene_id() -> String {
    "scene".into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Path conventions inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn bev_png(&self) -> PathBuf {
        self.root.join("bev.png")
    }

    pub fn palette_json(&self) -> PathBuf {
        self.root.join("palette.json")
    }

    pub fn graph_dir(&self) -> PathBuf {
        self.root.join("graph")
    }

    pub fn graph_edges(&self) -> PathBuf {
        self.graph_dir().join("edges.csv")
    }

    pub fn graph_meta(&self) -> PathBuf {
        self.graph_dir().join("meta.json")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_path(&self, variant: &str, seed: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("{variant}_seed{seed}.ckpt"))
    }

    pub fn latest_checkpoint_pointer(&self) -> PathBuf {
        self.checkpoints_dir().join("latest.json")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn metrics_path(&self, variant: &str, seed: u64) -> PathBuf {
        self.metrics_dir().join(format!("{variant}_seed{seed}.jsonl"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// 64-bit FNV-1a, used for stable content digests in cache keys.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        // Reference value of FNV-1a("a") from the published test vectors.
        let mut h = Fnv1a::new();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63dc4c8601ec8c);
        let mut h2 = Fnv1a::new();
        h2.write(b"calibgraph");
        let mut h3 = Fnv1a::new();
        h3.write(b"calibgrapg");
        assert_ne!(h2.finish(), h3.finish());
    }

    #[test]
    fn run_config_roundtrip() {
        let cfg = RunConfig {
            scene_id: "s1".into(),
            scene: SceneConfig::Procedural { spec: ProceduralSpec::default(), seed: 3 },
            datagen: DatagenConfig {
                grid: CameraGrid {
                    focal: (80.0, 110.0),
                    pan: (0.0, 6.28),
                    tilt: (0.6, 1.0),
                    roll: (-0.03, 0.03),
                    pos_x: (10.0, 20.0),
                    pos_y: (10.0, 20.0),
                    height: (6.0, 10.0),
                    view_size: (128, 128),
                    total_count: 100,
                    seed: 1,
                },
                min_foreground: 0.2,
                dictionary_fraction: 0.2,
                split_seed: 5,
            },
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.scene_id, "s1");
        assert_eq!(back.graph.k, 20);
        assert_eq!(back.datagen.grid.total_count, 100);
    }
}
