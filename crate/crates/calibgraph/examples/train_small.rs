//! Train the full two-phase pipeline on a miniature dataset (a couple of
//! minutes on a laptop), then evaluate against the anchor-only baseline.
//!
//! ```sh
//! cargo run --release --example train_small
//! ```

use calibgraph::config::GraphConfig;
use calibgraph::datagen::{generate_dataset, sample_camera_grid, split_dataset, CameraGrid, ImageStore, Split};
use calibgraph::graph::build_graph;
use calibgraph::loss::LossConfig;
use calibgraph::model::{init_params, ExtractorConfig, ExtractorVariant, GnnConfig, GnnVariant, ModelConfig, StnConfig};
use calibgraph::scene::{generate_procedural_bev, ProceduralSpec};
use calibgraph::train::{evaluate, TrainConfig, TrainSetup, Trainer};

fn main() -> anyhow::Result<()> {
    let tmp = tempfile::tempdir()?;
    let bev = generate_procedural_bev(&ProceduralSpec::default(), 7)?;
    let grid = CameraGrid {
        focal: (105.0, 115.0),
        tilt: (0.76, 0.86),
        pos_x: (29.0, 35.0),
        pos_y: (29.0, 35.0),
        height: (7.5, 8.5),
        view_size: (64, 64),
        total_count: 400,
        seed: 3,
        ..CameraGrid::default_for_bev(&bev)
    };
    let cameras = sample_camera_grid(&grid, &bev)?;
    let manifest = generate_dataset(&bev, &cameras, grid.view_size, 0.2, "small", tmp.path(), serde_json::Value::Null)?;
    let manifest = split_dataset(&manifest, 0.2, 1)?;
    let store = ImageStore::load(&manifest, tmp.path())?;
    let loss_cfg = LossConfig::default();
    let graph_cfg = GraphConfig { k: 10, fanout1: 6, fanout2: 3 };
    let graph = build_graph(&manifest, &store, graph_cfg.k, &loss_cfg)?;

    let model_cfg = ModelConfig {
        in_channels: 4,
        extractor: ExtractorConfig {
            variant: ExtractorVariant::FourConv,
            channels: vec![8, 16, 32, 64],
            kernels: vec![3, 3, 3, 3],
            strides: vec![2, 2, 2, 2],
            coord_channels: true,
        },
        gnn: GnnConfig { variant: GnnVariant::Gatv2, layers: 2, heads: 4, hidden: 64 },
        stn: StnConfig { k_stn: 5, hidden: vec![128], ..StnConfig::default() },
        seed: 1,
    };
    let train_cfg = TrainConfig {
        warmup_epochs: 8,
        max_end2end_epochs: 8,
        batch_size: 16,
        seed: 1,
        ..TrainConfig::default()
    };
    let setup = TrainSetup {
        bev: &bev,
        manifest: &manifest,
        store: &store,
        graph: &graph,
        model_cfg: &model_cfg,
        loss_cfg: &loss_cfg,
        graph_cfg: &graph_cfg,
        train_cfg: &train_cfg,
    };
    let mut trainer = Trainer::new(setup, init_params(&model_cfg)?)?;
    println!("warmup ({} epochs)...", train_cfg.warmup_epochs);
    trainer.run_warmup()?;
    for m in &trainer.metrics {
        println!("  {} epoch {:>2}: loss {:.4} auc {:?}", m.phase, m.epoch, m.loss, m.val_auc);
    }
    println!("end-to-end (up to {} epochs)...", train_cfg.max_end2end_epochs);
    trainer.run_end2end()?;
    for m in trainer.metrics.iter().filter(|m| m.phase == "end2end") {
        println!("  {} epoch {:>2}: loss {:.4} val IoU {:?}", m.phase, m.epoch, m.loss, m.val_iou);
    }

    let params = trainer.eval_params().clone();
    let anchor = evaluate(&graph, &manifest, &store, &bev, &params, &model_cfg, Split::Test, true, "gatv2", 1)?;
    let full = evaluate(&graph, &manifest, &store, &bev, &params, &model_cfg, Split::Test, false, "gatv2", 1)?;
    println!(
        "test IoU: anchor-only {} vs full {}",
        calibgraph::report::format_cell(anchor.mean_iou, anchor.std_iou),
        calibgraph::report::format_cell(full.mean_iou, full.std_iou),
    );
    Ok(())
}
