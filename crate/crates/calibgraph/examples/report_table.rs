//! Render evaluation records into the mean±std percent table, in both CSV
//! and markdown.
//!
//! ```sh
//! cargo run --release --example report_table
//! ```

use calibgraph::report::{aggregate, render_csv, render_markdown};
use calibgraph::train::EvalReport;

fn record(variant: &str, scene: &str, mean: f64, std: f64) -> EvalReport {
    EvalReport {
        scene_id: scene.into(),
        variant: variant.into(),
        train_seed: 0,
        split: "test".into(),
        anchor_only: false,
        mean_iou: mean,
        std_iou: std,
        records: Vec::new(),
    }
}

fn main() {
    // Three training cycles per variant on one scene.
    let reports = vec![
        record("gcn", "intersection-1", 0.9231, 0.0),
        record("gcn", "intersection-1", 0.9262, 0.0),
        record("gcn", "intersection-1", 0.9199, 0.0),
        record("gat", "intersection-1", 0.9561, 0.0),
        record("gat", "intersection-1", 0.9478, 0.0),
        record("gat", "intersection-1", 0.9630, 0.0),
        record("gatv2", "intersection-1", 0.9596, 0.0),
        record("gatv2", "intersection-1", 0.9544, 0.0),
        record("gatv2", "intersection-1", 0.9688, 0.0),
    ];
    let rows = aggregate(&reports);
    println!("{}", render_markdown(&rows));
    println!("{}", render_csv(&rows));
}
