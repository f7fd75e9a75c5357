//! Sample virtual cameras, render a small synthetic view set with
//! train/test/dictionary splits, and build the template graph.
//!
//! ```sh
//! cargo run --release --example build_dataset_and_graph -- out_dir
//! ```

use std::path::PathBuf;

use calibgraph::datagen::{generate_dataset, sample_camera_grid, split_dataset, CameraGrid, ImageStore, Split};
use calibgraph::graph::{build_graph, save_graph};
use calibgraph::loss::LossConfig;
use calibgraph::scene::{generate_procedural_bev, ProceduralSpec};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "dataset_out".into()).into();
    std::fs::create_dir_all(&out)?;
    let bev = generate_procedural_bev(&ProceduralSpec::default(), 7)?;

    let grid = CameraGrid {
        focal: (105.0, 115.0),
        tilt: (0.76, 0.86),
        pos_x: (29.0, 35.0),
        pos_y: (29.0, 35.0),
        height: (7.5, 8.5),
        view_size: (96, 96),
        total_count: 120,
        seed: 5,
        ..CameraGrid::default_for_bev(&bev)
    };
    let cameras = sample_camera_grid(&grid, &bev)?;
    let manifest = generate_dataset(&bev, &cameras, grid.view_size, 0.2, "demo", &out, serde_json::Value::Null)?;
    let manifest = split_dataset(&manifest, 0.25, 9)?;
    manifest.save(&out)?;
    println!("splits: {:?}", manifest.meta.split_counts);

    let store = ImageStore::load(&manifest, &out)?;
    let loss_cfg = LossConfig::default();
    let graph = build_graph(&manifest, &store, 5, &loss_cfg)?;
    save_graph(&graph, &manifest, &loss_cfg, &out.join("graph/edges.csv"), &out.join("graph/meta.json"))?;

    let query = graph.nodes_in_split(Split::Train)[0];
    println!("top-5 most similar templates for {}:", graph.node_id(query));
    for &(dst, score) in graph.edges_of(query) {
        println!("  {} (topological score {score:.5})", graph.node_id(dst));
    }
    Ok(())
}
