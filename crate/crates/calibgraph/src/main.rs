//! Command-line surface: dataset generation, graph building, training,
//! evaluation, single-image calibration, and report emission.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use calibgraph::config::{RunConfig, RunDir, SceneConfig};
use calibgraph::datagen::{
    generate_dataset, sample_camera_grid, split_dataset, DatasetManifest, ImageStore, Split,
};
use calibgraph::geometry::Intrinsics;
use calibgraph::graph::{build_graph, load_graph, save_graph, TemplateGraph};
use calibgraph::infer::{build_dictionary_context, calibrate};
use calibgraph::model::{init_params, partition_tensors, ExtractorVariant, GnnVariant};
use calibgraph::report::{emit_report, ReportFormat};
use calibgraph::scene::{
    generate_procedural_bev, load_bev, load_label_mask, save_bev_png, save_overlay_png,
    ClassPalette, MergeMap, SemanticBEV,
};
use calibgraph::train::{evaluate, EvalReport, TrainSetup, Trainer};

#[derive(Parser)]
#[command(name = "calibgraph", about = "Ground-plane camera calibration from semantic BEV maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the scene, sample virtual cameras, and write the view dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build (or reuse) the template graph for a generated run.
    BuildGraph {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Two-phase training: link-prediction warmup, then end-to-end.
    Train {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        gnn: Option<GnnVariant>,
        #[arg(long)]
        extractor: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the trained model over a split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: String,
        /// Use the anchor homography alone (residual frozen at identity).
        #[arg(long)]
        anchor_only: bool,
    },
    /// Calibrate a single label-mask image and recover extrinsics.
    Calibrate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        merge_map: Option<PathBuf>,
        #[arg(long)]
        intrinsics: PathBuf,
    },
    /// Aggregate evaluation records from one or more runs into a table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("CALIB_NUM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_scene(cfg: &RunConfig) -> Result<SemanticBEV> {
    Ok(match &cfg.scene {
        SceneConfig::Procedural { spec, seed } => generate_procedural_bev(spec, *seed)?,
        SceneConfig::File { bev, palette, meters_per_pixel } => {
            let palette = ClassPalette::load(palette)?;
            load_bev(bev, &palette, *meters_per_pixel)?
        }
    })
}

struct LoadedRun {
    dir: RunDir,
    config: RunConfig,
    bev: SemanticBEV,
    manifest: DatasetManifest,
    store: ImageStore,
}

fn load_run(run: &PathBuf) -> Result<LoadedRun> {
    let dir = RunDir::new(run);
    let config = RunConfig::load(&dir.config_path())
        .with_context(|| format!("loading run config from {}", dir.config_path().display()))?;
    let palette = ClassPalette::load(&dir.palette_json())?;
    let bev = load_bev(&dir.bev_png(), &palette, scene_mpp(&config))?;
    let manifest = DatasetManifest::load(dir.root())?;
    let store = ImageStore::load(&manifest, dir.root())?;
    Ok(LoadedRun { dir, config, bev, manifest, store })
}

fn scene_mpp(cfg: &RunConfig) -> f64 {
    match &cfg.scene {
        SceneConfig::Procedural { spec, .. } => spec.meters_per_pixel,
        SceneConfig::File { meters_per_pixel, .. } => *meters_per_pixel,
    }
}

fn load_run_graph(run: &LoadedRun) -> Result<TemplateGraph> {
    load_graph(
        &run.manifest,
        &run.config.loss,
        &run.dir.graph_edges(),
        &run.dir.graph_meta(),
    )
    .context("no usable graph; run `calibgraph build-graph` first")
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LatestCheckpoint {
    variant: String,
    seed: u64,
    checkpoint: PathBuf,
}

fn cmd_generate(config: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = RunConfig::load(&config)?;
    std::fs::create_dir_all(&out)?;
    let dir = RunDir::new(&out);
    let bev = load_scene(&cfg)?;
    save_bev_png(&bev, &dir.bev_png())?;
    bev.palette.save(&dir.palette_json())?;

    let cameras = sample_camera_grid(&cfg.datagen.grid, &bev)?;
    let snapshot = serde_json::to_value(&cfg)?;
    let manifest = generate_dataset(
        &bev,
        &cameras,
        cfg.datagen.grid.view_size,
        cfg.datagen.min_foreground,
        &cfg.scene_id,
        dir.root(),
        snapshot,
    )?;
    let manifest = split_dataset(&manifest, cfg.datagen.dictionary_fraction, cfg.datagen.split_seed)?;
    manifest.save(dir.root())?;
    cfg.save(&dir.config_path())?;
    println!(
        "generated {} views ({} dropped) into {}; splits: {:?}",
        manifest.samples.len(),
        manifest.meta.dropped_low_foreground,
        out.display(),
        manifest.meta.split_counts
    );
    Ok(())
}

fn cmd_build_graph(run: PathBuf, k: Option<usize>) -> Result<()> {
    let mut loaded = load_run(&run)?;
    if let Some(k) = k {
        loaded.config.graph.k = k;
        loaded.config.save(&loaded.dir.config_path())?;
    }
    let k = loaded.config.graph.k;
    if let Ok(graph) =
        load_graph(&loaded.manifest, &loaded.config.loss, &loaded.dir.graph_edges(), &loaded.dir.graph_meta())
    {
        if graph.k == k {
            println!("reusing cached graph ({} nodes, k={})", graph.len(), graph.k);
            return Ok(());
        }
    }
    let graph = build_graph(&loaded.manifest, &loaded.store, k, &loaded.config.loss)?;
    save_graph(
        &graph,
        &loaded.manifest,
        &loaded.config.loss,
        &loaded.dir.graph_edges(),
        &loaded.dir.graph_meta(),
    )?;
    println!("built graph: {} nodes, k={}", graph.len(), k);
    Ok(())
}

fn cmd_train(
    run: PathBuf,
    gnn: Option<GnnVariant>,
    extractor: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    let mut loaded = load_run(&run)?;
    if let Some(v) = gnn {
        loaded.config.model.gnn.variant = v;
    }
    if let Some(e) = extractor {
        loaded.config.model.extractor.variant = e.parse::<ExtractorVariant>()?;
    }
    if let Some(s) = seed {
        loaded.config.model.seed = s;
        loaded.config.train.seed = s;
    }
    let graph = load_run_graph(&loaded)?;
    let variant = loaded.config.model.gnn.variant.as_str().to_string();
    let train_seed = loaded.config.train.seed;

    let setup = TrainSetup {
        bev: &loaded.bev,
        manifest: &loaded.manifest,
        store: &loaded.store,
        graph: &graph,
        model_cfg: &loaded.config.model,
        loss_cfg: &loaded.config.loss,
        graph_cfg: &loaded.config.graph,
        train_cfg: &loaded.config.train,
    };
    let params = init_params(&loaded.config.model)?;
    let mut trainer = Trainer::new(setup, params)?;
    trainer.log_metrics_to(loaded.dir.metrics_path(&variant, train_seed))?;
    println!("warmup: {} epochs", loaded.config.train.warmup_epochs);
    trainer.run_warmup()?;
    println!("end-to-end phase (max {} epochs)", loaded.config.train.max_end2end_epochs);
    trainer.run_end2end()?;

    // Persist the best-validation parameters as the run's model.
    if let Some(best) = trainer.best_params.clone() {
        trainer.params = best;
    }
    let ckpt_path = loaded.dir.checkpoint_path(&variant, train_seed);
    trainer.save_checkpoint(&ckpt_path)?;
    let latest = LatestCheckpoint { variant: variant.clone(), seed: train_seed, checkpoint: ckpt_path.clone() };
    std::fs::create_dir_all(loaded.dir.checkpoints_dir())?;
    std::fs::write(
        loaded.dir.latest_checkpoint_pointer(),
        serde_json::to_string_pretty(&latest)?,
    )?;
    let last = trainer.metrics.last();
    println!(
        "trained {variant} (seed {train_seed}); best val IoU {:.4}; final epoch {:?}",
        trainer.state.best_val_iou,
        last.map(|m| m.epoch)
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn load_latest(loaded: &LoadedRun) -> Result<(calibgraph::nn::Params, LatestCheckpoint)> {
    let pointer = loaded.dir.latest_checkpoint_pointer();
    let text = std::fs::read_to_string(&pointer)
        .with_context(|| format!("no trained checkpoint at {}; run `train` first", pointer.display()))?;
    let latest: LatestCheckpoint = serde_json::from_str(&text)?;
    let ckpt = calibgraph::model::load_checkpoint(&latest.checkpoint)?;
    if ckpt.model != loaded.config.model
        && ckpt.model.gnn.variant == loaded.config.model.gnn.variant
    {
        // The stored config snapshot wins over the run config for inference.
    }
    let (params, _) = partition_tensors(ckpt.tensors);
    Ok((params, latest))
}

fn cmd_evaluate(run: PathBuf, split: String, anchor_only: bool) -> Result<()> {
    let loaded = load_run(&run)?;
    let graph = load_run_graph(&loaded)?;
    let split: Split = split.parse()?;
    let (params, latest) = load_latest(&loaded)?;
    let ckpt = calibgraph::model::load_checkpoint(&latest.checkpoint)?;
    let report = evaluate(
        &graph,
        &loaded.manifest,
        &loaded.store,
        &loaded.bev,
        &params,
        &ckpt.model,
        split,
        anchor_only,
        &latest.variant,
        latest.seed,
    )?;
    let suffix = if anchor_only { "_anchor" } else { "" };
    let out = loaded
        .dir
        .eval_dir()
        .join(format!("{}_seed{}_{}{}.json", latest.variant, latest.seed, split, suffix));
    report.save(&out)?;

    // A few overlay PNGs of warped BEV vs ground truth for inspection.
    let overlays = loaded.dir.eval_dir().join("overlays");
    std::fs::create_dir_all(&overlays)?;
    let ctx = build_dictionary_context(&graph, &loaded.manifest, &loaded.store, &params, &ckpt.model)?;
    for rec in report.records.iter().take(4) {
        let labels = loaded.store.get(&rec.id).expect("evaluated sample image");
        let inf = calibgraph::infer::infer_query(
            &labels.view(),
            loaded.bev.num_classes(),
            &ctx,
            &params,
            &ckpt.model,
            anchor_only,
        )?;
        let out_size = loaded.store.out_size();
        let warped = calibgraph::geometry::warp_labels(
            &loaded.bev.labels.view(),
            &inf.h,
            (out_size.0 as usize, out_size.1 as usize),
            loaded.bev.palette.background_id(),
        )?;
        save_overlay_png(
            &labels.view(),
            &warped.view(),
            &loaded.bev.palette,
            &overlays.join(format!("{}{}.png", rec.id, suffix)),
        )?;
    }
    println!(
        "{} split {} ({} samples): IoU {}",
        latest.variant,
        split,
        report.records.len(),
        calibgraph::report::format_cell(report.mean_iou, report.std_iou)
    );
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_calibrate(
    run: PathBuf,
    image: PathBuf,
    merge_map: Option<PathBuf>,
    intrinsics: PathBuf,
) -> Result<()> {
    let loaded = load_run(&run)?;
    let graph = load_run_graph(&loaded)?;
    let (params, latest) = load_latest(&loaded)?;
    let ckpt = calibgraph::model::load_checkpoint(&latest.checkpoint)?;
    let text = std::fs::read_to_string(&intrinsics)?;
    let k: Intrinsics = serde_json::from_str(&text)
        .with_context(|| format!("parsing intrinsics from {}", intrinsics.display()))?;

    let merge = match &merge_map {
        Some(p) => Some(MergeMap::load(p, &loaded.bev.palette)?),
        None => None,
    };
    // Permissive mask load: merge maps may cover ids outside the palette.
    let mask = if merge.is_some() {
        let img = image::open(&image)?.to_luma8();
        let (w, h) = img.dimensions();
        ndarray::Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0]
        })
    } else {
        load_label_mask(&image, &loaded.bev.palette)?
    };

    let ctx = build_dictionary_context(&graph, &loaded.manifest, &loaded.store, &params, &ckpt.model)?;
    let result = calibrate(
        &mask.view(),
        merge.as_ref(),
        &ctx,
        &params,
        &ckpt.model,
        &k,
        &loaded.bev,
        loaded.store.out_size(),
    )?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn cmd_report(runs: Vec<PathBuf>, format: String, out: Option<PathBuf>) -> Result<()> {
    let format: ReportFormat = format.parse()?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for run in &runs {
        let eval_dir = RunDir::new(run).eval_dir();
        let entries = std::fs::read_dir(&eval_dir)
            .with_context(|| format!("no evaluations in {}", eval_dir.display()))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let mut report = EvalReport::load(&p)?;
            if report.anchor_only {
                report.variant = format!("{}+anchor-only", report.variant);
            }
            reports.push(report);
        }
    }
    if reports.is_empty() {
        bail!("no evaluation records found in the given runs");
    }
    let ext = match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Markdown => "md",
    };
    let out = out.unwrap_or_else(|| PathBuf::from(format!("report.{ext}")));
    emit_report(&reports, format, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    init_thread_pool();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out } => cmd_generate(config, out),
        Command::BuildGraph { run, k } => cmd_build_graph(run, k),
        Command::Train { run, gnn, extractor, seed } => cmd_train(run, gnn, extractor, seed),
        Command::Evaluate { run, split, anchor_only } => cmd_evaluate(run, split, anchor_only),
        Command::Calibrate { run, image, merge_map, intrinsics } => {
            cmd_calibrate(run, image, merge_map, intrinsics)
        }
        Command::Report { runs, format, out } => cmd_report(runs, format, out),
    }
}
