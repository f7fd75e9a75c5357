//! Ground-plane camera calibration from semantic bird's-eye-view maps.
//!
//! The pipeline calibrates a fixed camera overlooking a planar scene (a road
//! intersection, a sports field) from a single semantically segmented image.
//! It works by synthesizing a large set of virtual-camera views of the scene's
//! bird's-eye-view (BEV) map, organizing them as a graph of templates, and
//! matching a query image against that graph:
//!
//! 1. **scene** – semantic BEV maps: palettes, raster ingestion, class
//!    merging, and a procedural intersection generator for synthetic scenes.
//! 2. **geometry** – ground-plane homographies: construction from camera
//!    parameters, composition, differentiable warping, and extrinsics
//!    recovery.
//! 3. **datagen** – virtual-camera sampling and rendering of the synthetic
//!    view set with train/test/dictionary splits.
//! 4. **graph** – topological similarity scoring, the template graph
//!    (top-k edges into the dictionary), and 2-hop mini-batch sampling.
//! 5. **model** – the convolutional feature extractor, GCN/GAT/GATv2 graph
//!    layers with link scoring, and the homography-regression head.
//! 6. **loss** – link-prediction cross-entropy, patch-based topological MSE,
//!    and semantic-mask IoU.
//! 7. **train** – the two-phase schedule (link-prediction warmup, then
//!    end-to-end homography training) with IoU-driven LR halving and early
//!    stopping.
//! 8. **infer** – single-image calibration returning the full homography and
//!    camera extrinsics; **report** renders result tables.
//!
//! The `calibgraph` binary exposes the whole pipeline as subcommands
//! (`generate`, `build-graph`, `train`, `evaluate`, `calibrate`, `report`);
//! the crate's `examples/` directory has one runnable example per capability.

pub mod config;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod infer;
pub mod loss;
pub mod model;
pub mod nn;
pub mod report;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
