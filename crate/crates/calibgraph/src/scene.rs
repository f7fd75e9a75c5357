//! Semantic bird's-eye-view maps: palettes, raster ingestion, class merging,
//! and a procedural intersection generator.
//!
//! A scene is a top-down class-label grid ([`SemanticBEV`]) plus a
//! [`ClassPalette`] naming each class and assigning it a display color, and a
//! metric scale (meters per BEV pixel). Background is always class id 0; it is
//! also the fill value for out-of-scene regions in warped views.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u8;

/// A single palette entry: class id, human-readable name, display color.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered set of scene classes. Ids are contiguous from 0 and id 0 is
/// reserved for background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPalette {
    classes: Vec<ClassDef>,
    background_id: ClassId,
}

impl ClassPalette {
    pub fn new(classes: Vec<ClassDef>, background_id: ClassId) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Palette("palette has no classes".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Palette(format!(
                    "class ids must be contiguous from 0; entry {i} has id {}",
                    c.id
                )));
            }
        }
        if background_id as usize >= classes.len() {
            return Err(Error::Palette(format!(
                "background id {background_id} is not a palette class"
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &classes {
            if !seen.insert(c.color) {
                return Err(Error::Palette(format!(
                    "color {:?} is assigned to more than one class",
                    c.color
                )));
            }
        }
        Ok(Self { classes, background_id })
    }

    /// Four-class intersection palette: background, road (red), terrain
    /// (blue), bicycle path (green).
    pub fn intersection_default() -> Self {
        Self::new(
            vec![
                ClassDef { id: 0, name: "background".into(), color: [0, 0, 0] },
                ClassDef { id: 1, name: "road".into(), color: [255, 0, 0] },
                ClassDef { id: 2, name: "terrain".into(), color: [0, 0, 255] },
                ClassDef { id: 3, name: "bicycle_path".into(), color: [0, 255, 0] },
            ],
            0,
        )
        .expect("default palette is valid")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn background_id(&self) -> ClassId {
        self.background_id
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.classes.len()
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn color_of(&self, id: ClassId) -> Option<[u8; 3]> {
        self.classes.get(id as usize).map(|c| c.color)
    }

    pub fn id_of_color(&self, color: [u8; 3]) -> Option<ClassId> {
        self.classes.iter().find(|c| c.color == color).map(|c| c.id)
    }

    /// Foreground ids, i.e. everything except the background class.
    pub fn foreground_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        let bg = self.background_id;
        self.classes.iter().map(|c| c.id).filter(move |&id| id != bg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: PaletteFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(raw.classes, raw.background_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = PaletteFile { classes: self.classes.clone(), background_id: self.background_id };
        let text = serde_json::to_string_pretty(&raw).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct PaletteFile {
    classes: Vec<ClassDef>,
    background_id: ClassId,
}

/// Top-down class-label grid of the scene with its palette and metric scale.
#[derive(Debug, Clone)]
pub struct SemanticBEV {
    pub labels: Array2<ClassId>,
    pub palette: ClassPalette,
    pub meters_per_pixel: f64,
}

impl SemanticBEV {
    pub fn new(labels: Array2<ClassId>, palette: ClassPalette, meters_per_pixel: f64) -> Result<Self> {
        let (h, w) = labels.dim();
        if h < 2 || w < 2 {
            return Err(Error::InvalidInput(format!("BEV grid {w}x{h} is smaller than 2x2")));
        }
        if !(meters_per_pixel > 0.0) {
            return Err(Error::InvalidInput(format!(
                "meters_per_pixel must be positive, got {meters_per_pixel}"
            )));
        }
        validate_labels(&labels.view(), &palette)?;
        Ok(Self { labels, palette, meters_per_pixel })
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }
}

fn validate_labels(labels: &ArrayView2<ClassId>, palette: &ClassPalette) -> Result<()> {
    for ((y, x), &l) in labels.indexed_iter() {
        if !palette.contains(l) {
            return Err(Error::UnknownLabel { label: l, x: x as u32, y: y as u32 });
        }
    }
    Ok(())
}

/// Load a color BEV raster whose pixels use palette colors exactly.
pub fn load_bev(path: &Path, palette: &ClassPalette, meters_per_pixel: f64) -> Result<SemanticBEV> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut lut: BTreeMap<[u8; 3], ClassId> = BTreeMap::new();
    for c in palette.classes() {
        lut.insert(c.color, c.id);
    }
    let mut labels = Array2::<ClassId>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        let rgb = [p[0], p[1], p[2]];
        match lut.get(&rgb) {
            Some(&id) => labels[(y as usize, x as usize)] = id,
            None => {
                return Err(Error::UnknownColor { r: rgb[0], g: rgb[1], b: rgb[2], x, y });
            }
        }
    }
    SemanticBEV::new(labels, palette.clone(), meters_per_pixel)
}

/// Write a BEV as a color PNG using its palette.
pub fn save_bev_png(bev: &SemanticBEV, path: &Path) -> Result<()> {
    let (h, w) = bev.labels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &l) in bev.labels.indexed_iter() {
        let color = bev.palette.color_of(l).expect("validated labels");
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Load an 8-bit single-channel label raster (pixel value = class id).
pub fn load_label_mask(path: &Path, palette: &ClassPalette) -> Result<Array2<ClassId>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut labels = Array2::<ClassId>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        let l = p[0];
        if !palette.contains(l) {
            return Err(Error::UnknownLabel { label: l, x, y });
        }
        labels[(y as usize, x as usize)] = l;
    }
    Ok(labels)
}

/// Write a label grid as an 8-bit single-channel PNG.
pub fn save_label_mask(labels: &ArrayView2<ClassId>, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &l) in labels.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([l]));
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// One-hot class-channel encoding: channel `c` is 1 exactly where the label
/// equals `c`. Output shape is `(num_classes, H, W)`.
pub fn encode_onehot(labels: &ArrayView2<ClassId>, num_classes: usize) -> Array3<f64> {
    let (h, w) = labels.dim();
    let mut out = Array3::<f64>::zeros((num_classes, h, w));
    for ((y, x), &l) in labels.indexed_iter() {
        debug_assert!((l as usize) < num_classes);
        out[(l as usize, y, x)] = 1.0;
    }
    out
}

/// Single-precision variant of [`encode_onehot`] for model inputs.
pub fn encode_onehot_f32(labels: &ArrayView2<ClassId>, num_classes: usize) -> Array3<f32> {
    let (h, w) = labels.dim();
    let mut out = Array3::<f32>::zeros((num_classes, h, w));
    for ((y, x), &l) in labels.indexed_iter() {
        out[(l as usize, y, x)] = 1.0;
    }
    out
}

/// Side-by-side RGB rendering of a ground-truth mask and a warped BEV, for
/// visual inspection of calibration quality.
pub fn save_overlay_png(
    gt: &ArrayView2<ClassId>,
    warped: &ArrayView2<ClassId>,
    palette: &ClassPalette,
    path: &Path,
) -> Result<()> {
    if gt.dim() != warped.dim() {
        return Err(Error::InvalidInput("overlay grids must share one shape".into()));
    }
    let (h, w) = gt.dim();
    let gap = 2usize;
    let mut img = image::RgbImage::from_pixel((2 * w + gap) as u32, h as u32, image::Rgb([64, 64, 64]));
    for ((y, x), &l) in gt.indexed_iter() {
        let c = palette.color_of(l).unwrap_or([255, 0, 255]);
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
    for ((y, x), &l) in warped.indexed_iter() {
        let c = palette.color_of(l).unwrap_or([255, 0, 255]);
        img.put_pixel((x + w + gap) as u32, y as u32, image::Rgb(c));
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Recover a label grid from a channel grid by per-pixel argmax.
pub fn argmax_labels(channels: &Array3<f64>) -> Array2<ClassId> {
    let (c, h, w) = channels.dim();
    let mut out = Array2::<ClassId>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = channels[(0, y, x)];
            for k in 1..c {
                let v = channels[(k, y, x)];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[(y, x)] = best as ClassId;
        }
    }
    out
}

/// Total map from source class ids to target class ids, used to reduce
/// external segmentation label spaces to the scene palette.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeMap {
    mapping: BTreeMap<ClassId, ClassId>,
}

impl MergeMap {
    pub fn new(mapping: BTreeMap<ClassId, ClassId>, target: &ClassPalette) -> Result<Self> {
        for (&src, &dst) in &mapping {
            if !target.contains(dst) {
                return Err(Error::InvalidInput(format!(
                    "merge target {dst} for source class {src} is not in the destination palette"
                )));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(palette: &ClassPalette) -> Self {
        let mapping = palette.classes().iter().map(|c| (c.id, c.id)).collect();
        Self { mapping }
    }

    pub fn get(&self, src: ClassId) -> Option<ClassId> {
        self.mapping.get(&src).copied()
    }

    /// JSON object mapping source-id strings to target-id integers.
    pub fn load(path: &Path, target: &ClassPalette) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, ClassId> =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut mapping = BTreeMap::new();
        for (k, v) in raw {
            let src: ClassId = k
                .parse()
                .map_err(|_| Error::InvalidInput(format!("merge map key {k:?} is not a class id")))?;
            mapping.insert(src, v);
        }
        Self::new(mapping, target)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: BTreeMap<String, ClassId> =
            self.mapping.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let text = serde_json::to_string_pretty(&raw).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Replace every label by its merge target. Errors on labels outside the
/// mapping domain.
pub fn merge_classes(labels: &ArrayView2<ClassId>, merge: &MergeMap) -> Result<Array2<ClassId>> {
    let (h, w) = labels.dim();
    let mut out = Array2::<ClassId>::zeros((h, w));
    for ((y, x), &l) in labels.indexed_iter() {
        match merge.get(l) {
            Some(t) => out[(y, x)] = t,
            None => return Err(Error::UnknownLabel { label: l, x: x as u32, y: y as u32 }),
        }
    }
    Ok(out)
}

/// Layout parameters for the procedural intersection generator.
///
/// The generated scene is a crossing of two road bands with a bicycle path
/// running parallel to each, terrain elsewhere, and a background margin. Band
/// positions and widths are jittered per seed; a road spur into one quadrant
/// breaks the symmetry of the crossing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProceduralSpec {
    pub width: usize,
    pub height: usize,
    /// Non-background classes to draw: 2 = road+terrain, 3 = +bicycle path.
    pub foreground_classes: usize,
    /// Fraction of each dimension kept as background margin.
    pub margin_frac: f64,
    /// Base road band width as a fraction of the smaller dimension.
    pub road_frac: f64,
    /// Bicycle path width as a fraction of the road band width.
    pub bike_frac: f64,
    /// Metric scale of the generated map.
    pub meters_per_pixel: f64,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            foreground_classes: 3,
            margin_frac: 0.05,
            road_frac: 0.14,
            bike_frac: 0.45,
            meters_per_pixel: 0.25,
        }
    }
}

/// Deterministically generate a crossing-roads BEV for `(spec, seed)`.
pub fn generate_procedural_bev(spec: &ProceduralSpec, seed: u64) -> Result<SemanticBEV> {
    if spec.width < 64 || spec.height < 64 {
        return Err(Error::InvalidInput(format!(
            "procedural BEV must be at least 64x64, got {}x{}",
            spec.width, spec.height
        )));
    }
    if !(2..=3).contains(&spec.foreground_classes) {
        return Err(Error::InvalidInput(format!(
            "procedural scenes support 2 or 3 foreground classes, got {}",
            spec.foreground_classes
        )));
    }
    let palette = ClassPalette::intersection_default();
    let (road, terrain, bike) = (1u8, 2u8, 3u8);
    let with_bike = spec.foreground_classes >= 3;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = spec.width;
    let h = spec.height;
    let mx = ((w as f64) * spec.margin_frac).round() as usize;
    let my = ((h as f64) * spec.margin_frac).round() as usize;
    let base = spec.road_frac * w.min(h) as f64;

    // Jittered band geometry. Horizontal and vertical roads get different
    // widths so the crossing has no 90-degree symmetry.
    let h_center = h as f64 * rng.gen_range(0.38..0.55);
    let h_width = base * rng.gen_range(0.9..1.15);
    let v_center = w as f64 * rng.gen_range(0.45..0.62);
    let v_width = base * rng.gen_range(0.65..0.85);
    let bike_width = (h_width * spec.bike_frac).max(3.0);
    let bike_gap = rng.gen_range(2.0..5.0);
    // Spur from the crossing into one quadrant.
    let spur_width = v_width * rng.gen_range(0.5..0.7);
    let spur_y = h_center + h_width / 2.0 + rng.gen_range(0.1..0.25) * h as f64;
    let spur_x_end = v_center - v_width / 2.0 - rng.gen_range(0.15..0.3) * w as f64;

    let mut labels = Array2::<ClassId>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let inside = x >= mx && x < w - mx && y >= my && y < h - my;
            if !inside {
                continue; // background margin
            }
            let fx = x as f64;
            let fy = y as f64;
            let in_h_road = (fy - h_center).abs() <= h_width / 2.0;
            let in_v_road = (fx - v_center).abs() <= v_width / 2.0;
            let in_spur = fy >= spur_y - spur_width / 2.0
                && fy <= spur_y + spur_width / 2.0
                && fx >= spur_x_end
                && fx <= v_center;
            let bike_lo = h_center - h_width / 2.0 - bike_gap - bike_width;
            let bike_hi = h_center - h_width / 2.0 - bike_gap;
            let in_h_bike = fy >= bike_lo && fy < bike_hi;
            let vbike_lo = v_center + v_width / 2.0 + bike_gap;
            let vbike_hi = vbike_lo + bike_width * 0.8;
            let in_v_bike = fx >= vbike_lo && fx < vbike_hi;

            labels[(y, x)] = if in_h_road || in_v_road || in_spur {
                road
            } else if with_bike && (in_h_bike || in_v_bike) {
                bike
            } else {
                terrain
            };
        }
    }

    let used: BTreeSet<ClassId> = labels.iter().copied().collect();
    if !used.contains(&road) || !used.contains(&terrain) {
        return Err(Error::InvalidInput(
            "degenerate procedural spec: no foreground drawn".into(),
        ));
    }
    SemanticBEV::new(labels, palette, spec.meters_per_pixel)
}
