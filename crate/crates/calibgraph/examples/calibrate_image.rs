//! Calibrate a single semantic mask against a trained run directory and
//! print the recovered homography and extrinsics.
//!
//! Expects a run directory produced by the `calibgraph` CLI
//! (`generate` + `build-graph` + `train`):
//!
//! ```sh
//! cargo run --release --example calibrate_image -- run_dir mask.png focal_px
//! ```

use std::path::PathBuf;

use anyhow::Context;
use calibgraph::config::{RunConfig, RunDir, SceneConfig};
use calibgraph::datagen::{DatasetManifest, ImageStore};
use calibgraph::geometry::Intrinsics;
use calibgraph::graph::load_graph;
use calibgraph::infer::{build_dictionary_context, calibrate};
use calibgraph::model::{load_checkpoint, partition_tensors};
use calibgraph::scene::{load_bev, load_label_mask, ClassPalette};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let run: PathBuf = args.next().context("usage: calibrate_image run_dir mask.png [focal]")?.into();
    let mask_path: PathBuf = args.next().context("missing mask path")?.into();
    let focal: f64 = args.next().map(|f| f.parse()).transpose()?.unwrap_or(110.0);

    let dir = RunDir::new(&run);
    let config = RunConfig::load(&dir.config_path())?;
    let mpp = match &config.scene {
        SceneConfig::Procedural { spec, .. } => spec.meters_per_pixel,
        SceneConfig::File { meters_per_pixel, .. } => *meters_per_pixel,
    };
    let palette = ClassPalette::load(&dir.palette_json())?;
    let bev = load_bev(&dir.bev_png(), &palette, mpp)?;
    let manifest = DatasetManifest::load(dir.root())?;
    let store = ImageStore::load(&manifest, dir.root())?;
    let graph = load_graph(&manifest, &config.loss, &dir.graph_edges(), &dir.graph_meta())?;

    let pointer = std::fs::read_to_string(dir.latest_checkpoint_pointer())
        .context("run has no trained checkpoint")?;
    let pointer: serde_json::Value = serde_json::from_str(&pointer)?;
    let ckpt = load_checkpoint(PathBuf::from(pointer["checkpoint"].as_str().unwrap()).as_path())?;
    let (params, _) = partition_tensors(ckpt.tensors);

    let mask = load_label_mask(&mask_path, &palette)?;
    let k = Intrinsics::centered(focal, store.out_size())?;
    let ctx = build_dictionary_context(&graph, &manifest, &store, &params, &ckpt.model)?;
    let result = calibrate(&mask.view(), None, &ctx, &params, &ckpt.model, &k, &bev, store.out_size())?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
