//! Virtual-camera sampling and synthetic view-set generation.
//!
//! Cameras are drawn from per-parameter ranges ([`CameraGrid`]); each
//! retained camera yields a [`ViewSample`]: the BEV warped by the camera's
//! ground-truth homography, stored as an 8-bit label PNG. The manifest is a
//! JSON-lines file (one record per sample) with a JSON sidecar for scene
//! metadata and the generation config snapshot.

use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    camera_pose, homography_from_plane_camera, warp_labels, Extrinsics, Homography, Intrinsics,
};
use crate::scene::{ClassId, SemanticBEV};

/// Per-parameter sampling ranges for virtual cameras. Angles are radians;
/// `tilt` is the depression angle below horizontal. Positions are world
/// meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraGrid {
    pub focal: (f64, f64),
    pub pan: (f64, f64),
    pub tilt: (f64, f64),
    pub roll: (f64, f64),
    pub pos_x: (f64, f64),
    pub pos_y: (f64, f64),
    pub height: (f64, f64),
    pub view_size: (u32, u32),
    pub total_count: usize,
    pub seed: u64,
}

impl CameraGrid {
    /// Default ranges sized to a BEV footprint: focal 300-800 px, tilt
    /// 20°-70°, full pan, roll ±5°, height 4-12 m, positions within 1.5x the
    /// footprint.
    pub fn default_for_bev(bev: &SemanticBEV) -> Self {
        let w_m = (bev.width() - 1) as f64 * bev.meters_per_pixel;
        let h_m = (bev.height() - 1) as f64 * bev.meters_per_pixel;
        let d = std::f64::consts::PI / 180.0;
        Self {
            focal: (300.0, 800.0),
            pan: (0.0, 2.0 * std::f64::consts::PI),
            tilt: (20.0 * d, 70.0 * d),
            roll: (-5.0 * d, 5.0 * d),
            pos_x: (-0.25 * w_m, 1.25 * w_m),
            pos_y: (-0.25 * h_m, 1.25 * h_m),
            height: (4.0, 12.0),
            view_size: (128, 128),
            total_count: 1000,
            seed: 0,
        }
    }

    fn ranges(&self) -> [(&'static str, (f64, f64)); 7] {
        [
            ("focal", self.focal),
            ("pan", self.pan),
            ("tilt", self.tilt),
            ("roll", self.roll),
            ("pos_x", self.pos_x),
            ("pos_y", self.pos_y),
            ("height", self.height),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in self.ranges() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidInput(format!(
                    "camera grid range {name} = ({lo}, {hi}) is invalid"
                )));
            }
        }
        if self.height.0 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "camera height range must be strictly positive, got ({}, {})",
                self.height.0, self.height.1
            )));
        }
        if self.total_count == 0 {
            return Err(Error::InvalidInput("total_count must be >= 1".into()));
        }
        if self.view_size.0 < 2 || self.view_size.1 < 2 {
            return Err(Error::InvalidInput("view size must be at least 2x2".into()));
        }
        Ok(())
    }
}

/// One sampled virtual camera.
#[derive(Debug, Clone)]
pub struct CameraParams {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

const MAX_RETRIES_PER_CAMERA: usize = 500;

fn sample_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draw cameras from the grid; every camera is oriented such that the BEV
/// center projects inside (and in front of) the image. Deterministic for a
/// fixed grid seed.
pub fn sample_camera_grid(grid: &CameraGrid, bev: &SemanticBEV) -> Result<Vec<CameraParams>> {
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    let center_u = (bev.width() - 1) as f64 / 2.0;
    let center_v = (bev.height() - 1) as f64 / 2.0;
    let s = bev.meters_per_pixel;
    let (w, h) = grid.view_size;

    let mut cameras = Vec::with_capacity(grid.total_count);
    while cameras.len() < grid.total_count {
        let mut accepted = None;
        for _ in 0..MAX_RETRIES_PER_CAMERA {
            let focal = sample_in(&mut rng, grid.focal);
            let pan = sample_in(&mut rng, grid.pan);
            let tilt = sample_in(&mut rng, grid.tilt);
            let roll = sample_in(&mut rng, grid.roll);
            let px = sample_in(&mut rng, grid.pos_x);
            let py = sample_in(&mut rng, grid.pos_y);
            let height = sample_in(&mut rng, grid.height);

            let intrinsics = Intrinsics::centered(focal, grid.view_size)?;
            let extrinsics = match camera_pose((px, py), height, pan, tilt, roll) {
                Ok(e) => e,
                Err(_) => continue,
            };
            let hom = match homography_from_plane_camera(&intrinsics, &extrinsics, s) {
                Ok(h) => h,
                Err(_) => continue,
            };
            // Cheirality (the stored homography is sign-normalized, so use
            // the camera directly) plus in-bounds check for the BEV center.
            let world = nalgebra::Vector3::new(center_u * s, center_v * s, 0.0);
            let depth = (extrinsics.rotation * world + extrinsics.translation).z;
            if depth <= 0.0 {
                continue;
            }
            let (x, y) = hom.apply(center_u, center_v);
            if x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64 {
                accepted = Some(CameraParams { intrinsics, extrinsics });
                break;
            }
        }
        match accepted {
            Some(c) => cameras.push(c),
            None => {
                return Err(Error::InvalidInput(format!(
                    "no feasible camera orientation after {MAX_RETRIES_PER_CAMERA} tries; \
                     check the grid ranges: pan {:?}, tilt {:?}, pos_x {:?}, pos_y {:?}, height {:?}",
                    grid.pan, grid.tilt, grid.pos_x, grid.pos_y, grid.height
                )))
            }
        }
    }
    Ok(cameras)
}

/// Dataset split tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unassigned,
    Train,
    Test,
    Dictionary,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Test => "test",
            Split::Dictionary => "dictionary",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unassigned" => Ok(Split::Unassigned),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "dictionary" => Ok(Split::Dictionary),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// One generated view: metadata record of the manifest. The rendered label
/// image lives at `image_path` relative to the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewSample {
    pub id: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub h_gt: Homography,
    pub intrinsics: Intrinsics,
    pub extrinsics_rotation: [[f64; 3]; 3],
    pub extrinsics_translation: [f64; 3],
    pub scene_id: String,
}

impl ViewSample {
    pub fn extrinsics(&self) -> Extrinsics {
        Extrinsics::from_arrays(self.extrinsics_rotation, self.extrinsics_translation)
    }
}

/// Scene metadata and generation snapshot stored next to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub scene_id: String,
    pub bev_size: (usize, usize),
    pub meters_per_pixel: f64,
    pub num_classes: usize,
    pub out_size: (u32, u32),
    pub min_foreground: f64,
    pub dropped_low_foreground: usize,
    pub split_counts: BTreeMap<String, usize>,
    pub config_snapshot: serde_json::Value,
}

/// Ordered collection of view samples plus scene metadata.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub samples: Vec<ViewSample>,
}

impl DatasetManifest {
    pub fn ids_in_split(&self, split: Split) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn sample(&self, id: &str) -> Option<&ViewSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn split_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.split.to_string()).or_insert(0) += 1;
        }
        counts
    }

    /// Max-abs deviation between each stored homography and the one rebuilt
    /// from its camera parameters.
    pub fn max_geometry_deviation(&self, meters_per_pixel: f64) -> Result<f64> {
        let mut max_dev = 0.0f64;
        for s in &self.samples {
            let rebuilt =
                homography_from_plane_camera(&s.intrinsics, &s.extrinsics(), meters_per_pixel)?;
            let stored = s.h_gt.to_row_major();
            let fresh = rebuilt.to_row_major();
            for i in 0..9 {
                max_dev = max_dev.max((stored[i] - fresh[i]).abs());
            }
        }
        Ok(max_dev)
    }

    /// A short stable digest of the manifest content (ids, splits,
    /// homographies), used for graph cache keys.
    pub fn digest(&self) -> u64 {
        let mut h = crate::config::Fnv1a::new();
        for s in &self.samples {
            h.write(s.id.as_bytes());
            h.write(s.split.to_string().as_bytes());
            for v in s.h_gt.to_row_major() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta_path = dir.join("manifest_meta.json");
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&meta_path, e))?;
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

        let path = dir.join("manifest.jsonl");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for s in &self.samples {
            let line = serde_json::to_string(s).map_err(|e| Error::json(&path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Load a manifest from a run directory, checking id uniqueness and that
    /// every referenced image exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("manifest_meta.json");
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ManifestMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::json(&meta_path, e))?;

        let path = dir.join("manifest.jsonl");
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: ViewSample = serde_json::from_str(&line).map_err(|e| Error::json(&path, e))?;
            if !seen.insert(s.id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate sample id {}", s.id)));
            }
            if !dir.join(&s.image_path).exists() {
                return Err(Error::InvalidInput(format!(
                    "manifest references missing image {}",
                    s.image_path.display()
                )));
            }
            samples.push(s);
        }
        Ok(Self { meta, samples })
    }
}

fn foreground_fraction(labels: &Array2<ClassId>, background: ClassId) -> f64 {
    let fg = labels.iter().filter(|&&l| l != background).count();
    fg as f64 / labels.len() as f64
}

/// Render one view per retained camera and write images under
/// `dir/images/`. Cameras whose view has a foreground fraction below
/// `min_foreground` are dropped and counted in the manifest metadata.
pub fn generate_dataset(
    bev: &SemanticBEV,
    cameras: &[CameraParams],
    out_size: (u32, u32),
    min_foreground: f64,
    scene_id: &str,
    dir: &Path,
    config_snapshot: serde_json::Value,
) -> Result<DatasetManifest> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput("no cameras to render".into()));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let background = bev.palette.background_id();
    let s = bev.meters_per_pixel;

    // Rendering is pure per-camera work; order is preserved by collecting
    // indexed results.
    let rendered: Vec<Result<Option<(Homography, Array2<ClassId>)>>> = cameras
        .par_iter()
        .map(|cam| {
            let h_gt = homography_from_plane_camera(&cam.intrinsics, &cam.extrinsics, s)?;
            let img = warp_labels(
                &bev.labels.view(),
                &h_gt,
                (out_size.0 as usize, out_size.1 as usize),
                background,
            )?;
            if foreground_fraction(&img, background) < min_foreground {
                Ok(None)
            } else {
                Ok(Some((h_gt, img)))
            }
        })
        .collect();

    let mut samples = Vec::new();
    let mut dropped = 0usize;
    for (idx, item) in rendered.into_iter().enumerate() {
        match item? {
            None => dropped += 1,
            Some((h_gt, img)) => {
                let id = format!("v{idx:06}");
                let rel = PathBuf::from("images").join(format!("{id}.png"));
                crate::scene::save_label_mask(&img.view(), &dir.join(&rel))?;
                let (rot, trans) = cameras[idx].extrinsics.to_arrays();
                samples.push(ViewSample {
                    id,
                    split: Split::Unassigned,
                    image_path: rel,
                    h_gt,
                    intrinsics: cameras[idx].intrinsics,
                    extrinsics_rotation: rot,
                    extrinsics_translation: trans,
                    scene_id: scene_id.to_string(),
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "all {} cameras were dropped by the min_foreground={min_foreground} filter",
            cameras.len()
        )));
    }
    let mut manifest = DatasetManifest {
        meta: ManifestMeta {
            scene_id: scene_id.to_string(),
            bev_size: (bev.width(), bev.height()),
            meters_per_pixel: s,
            num_classes: bev.num_classes(),
            out_size,
            min_foreground,
            dropped_low_foreground: dropped,
            split_counts: BTreeMap::new(),
            config_snapshot,
        },
        samples,
    };
    manifest.meta.split_counts = manifest.split_counts();
    Ok(manifest)
}

/// Assign splits: the dictionary is sampled first at `dictionary_fraction`,
/// the remainder is divided equally between train and test. Deterministic for
/// a fixed seed; splits are disjoint and exhaustive.
pub fn split_dataset(
    manifest: &DatasetManifest,
    dictionary_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let n = manifest.samples.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 samples to split, got {n}")));
    }
    if !(dictionary_fraction > 0.0 && dictionary_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "dictionary fraction must be in (0,1), got {dictionary_fraction}"
        )));
    }
    let mut dict_count = (n as f64 * dictionary_fraction).round() as usize;
    dict_count = dict_count.clamp(1, n - 2);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over sample indices (manifest order is canonical).
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let rem = n - dict_count;
    let train_count = rem - rem / 2;
    let mut out = manifest.clone();
    for (pos, &idx) in order.iter().enumerate() {
        out.samples[idx].split = if pos < dict_count {
            Split::Dictionary
        } else if pos < dict_count + train_count {
            Split::Train
        } else {
            Split::Test
        };
    }
    out.meta.split_counts = out.split_counts();
    Ok(out)
}

/// In-memory label images for a manifest, keyed by sample id.
#[derive(Debug)]
pub struct ImageStore {
    images: BTreeMap<String, Array2<ClassId>>,
    out_size: (u32, u32),
}

impl ImageStore {
    pub fn load(manifest: &DatasetManifest, dir: &Path) -> Result<Self> {
        let palette_len = manifest.meta.num_classes as u8;
        let entries: Vec<(String, PathBuf)> = manifest
            .samples
            .iter()
            .map(|s| (s.id.clone(), dir.join(&s.image_path)))
            .collect();
        let loaded: Vec<Result<(String, Array2<ClassId>)>> = entries
            .par_iter()
            .map(|(id, path)| {
                let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
                let (w, h) = img.dimensions();
                let mut labels = Array2::<ClassId>::zeros((h as usize, w as usize));
                for (x, y, p) in img.enumerate_pixels() {
                    if p[0] >= palette_len {
                        return Err(Error::UnknownLabel { label: p[0], x, y });
                    }
                    labels[(y as usize, x as usize)] = p[0];
                }
                Ok((id.clone(), labels))
            })
            .collect();
        let mut images = BTreeMap::new();
        for item in loaded {
            let (id, labels) = item?;
            images.insert(id, labels);
        }
        Ok(Self { images, out_size: manifest.meta.out_size })
    }

    pub fn from_arrays(images: BTreeMap<String, Array2<ClassId>>, out_size: (u32, u32)) -> Self {
        Self { images, out_size }
    }

    pub fn get(&self, id: &str) -> Option<&Array2<ClassId>> {
        self.images.get(id)
    }

    pub fn out_size(&self) -> (u32, u32) {
        self.out_size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
