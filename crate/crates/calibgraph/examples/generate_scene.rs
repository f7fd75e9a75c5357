//! Generate a procedural intersection BEV and write it as a color PNG plus
//! its palette JSON.
//!
//! ```sh
//! cargo run --release --example generate_scene -- out_dir
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use calibgraph::scene::{generate_procedural_bev, save_bev_png, ProceduralSpec};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "scene_out".into()).into();
    std::fs::create_dir_all(&out)?;

    let spec = ProceduralSpec::default();
    let bev = generate_procedural_bev(&spec, 42)?;
    save_bev_png(&bev, &out.join("bev.png"))?;
    bev.palette.save(&out.join("palette.json"))?;

    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &l in bev.labels.iter() {
        *counts.entry(l).or_insert(0) += 1;
    }
    println!("wrote {}x{} BEV to {}", bev.width(), bev.height(), out.display());
    for class in bev.palette.classes() {
        let n = counts.get(&class.id).copied().unwrap_or(0);
        let pct = 100.0 * n as f64 / bev.labels.len() as f64;
        println!("  class {} ({:>12}): {:>6.2}%", class.id, class.name, pct);
    }
    Ok(())
}
