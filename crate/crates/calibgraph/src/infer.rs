//! Single-image calibration: the one inference path used by both training
//! evaluation and the `calibrate` command.
//!
//! A query is matched against the *entire* dictionary: the batch is the query
//! node plus all dictionary nodes, aggregation edges are the graph's
//! dictionary-to-dictionary edges, and the query (which has no prior graph
//! edges) aggregates only through its self-loop. Candidate links are the
//! query crossed with every dictionary node; the top-scoring node's known
//! homography anchors the residual regressed by the homography head:
//! `H = H_anchor * H_residual`.
//!
//! Dictionary embeddings depend only on the parameters and the dictionary
//! sub-graph, so they are computed once per parameter snapshot and reused
//! across queries; the query tower is evaluated per query so that batching
//! cannot perturb the result.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, ImageStore};
use crate::error::{Error, Result};
use crate::geometry::{compose, decompose_homography, warp_labels, Homography, Intrinsics};
use crate::graph::TemplateGraph;
use crate::loss::iou;
use crate::model::{
    extract_features, gnn_forward, score_links, select_topk, stn_forward, BatchAdjacency,
    ModelConfig,
};
use crate::nn::Params;
use crate::scene::{encode_onehot_f32, merge_classes, ClassId, MergeMap, SemanticBEV};

/// Dictionary-side state shared across queries for one parameter snapshot.
#[derive(Debug)]
pub struct DictionaryContext {
    /// Graph indices of the dictionary nodes, ascending.
    pub graph_indices: Vec<usize>,
    pub ids: Vec<String>,
    pub embeddings: Array2<f32>,
    pub homographies: Vec<Homography>,
}

impl DictionaryContext {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embed every dictionary node once: feature extraction plus GNN over the
/// dictionary sub-graph (all graph edges between dictionary nodes).
pub fn build_dictionary_context(
    graph: &TemplateGraph,
    manifest: &DatasetManifest,
    store: &ImageStore,
    params: &Params,
    cfg: &ModelConfig,
) -> Result<DictionaryContext> {
    let dict = graph.dictionary_nodes().to_vec();
    if dict.is_empty() {
        return Err(Error::Graph("dictionary is empty".into()));
    }
    let local: std::collections::BTreeMap<usize, usize> =
        dict.iter().enumerate().map(|(l, &g)| (g, l)).collect();
    let num_classes = manifest.meta.num_classes;
    let mut images = Vec::with_capacity(dict.len());
    let mut ids = Vec::with_capacity(dict.len());
    let mut homographies = Vec::with_capacity(dict.len());
    for &g in &dict {
        let id = graph.node_id(g);
        let sample = manifest
            .sample(id)
            .ok_or_else(|| Error::Graph(format!("manifest is missing sample {id}")))?;
        let labels = store
            .get(id)
            .ok_or_else(|| Error::Graph(format!("image store is missing sample {id}")))?;
        images.push(encode_onehot_f32(&labels.view(), num_classes));
        ids.push(id.to_string());
        homographies.push(sample.h_gt);
    }
    let feats = extract_features(&images, params, &cfg.extractor)?;
    let mut edges = Vec::new();
    for &g in &dict {
        for &(dst, _) in graph.edges_of(g) {
            if let Some(&dl) = local.get(&dst) {
                edges.push((local[&g], dl));
            }
        }
    }
    let adj = BatchAdjacency::new(dict.len(), &edges)?;
    let (embeddings, _) = gnn_forward(&feats.view(), &adj, params, &cfg.gnn)?;
    Ok(DictionaryContext { graph_indices: dict, ids, embeddings, homographies })
}

/// Embed a query through its self-loop tower (no graph context).
pub fn embed_query(
    labels: &ArrayView2<ClassId>,
    num_classes: usize,
    params: &Params,
    cfg: &ModelConfig,
) -> Result<Array2<f32>> {
    let image = encode_onehot_f32(labels, num_classes);
    let feats = extract_features(&[image], params, &cfg.extractor)?;
    let adj = BatchAdjacency::new(1, &[])?;
    let (emb, _) = gnn_forward(&feats.view(), &adj, params, &cfg.gnn)?;
    Ok(emb)
}

/// Scored match of one query against the dictionary plus the composed
/// calibration homography.
#[derive(Debug, Clone)]
pub struct QueryInference {
    pub h: Homography,
    pub residual: Homography,
    pub anchor_id: String,
    pub anchor_score: f64,
    /// Per-dictionary-node link scores, aligned with the context order.
    pub scores: Vec<f64>,
}

/// Run the full matching + regression path for one query image.
pub fn infer_query(
    labels: &ArrayView2<ClassId>,
    num_classes: usize,
    ctx: &DictionaryContext,
    params: &Params,
    cfg: &ModelConfig,
    anchor_only: bool,
) -> Result<QueryInference> {
    let e_q = embed_query(labels, num_classes, params, cfg)?;
    let d = ctx.len();
    // Stack the query on top of the dictionary embeddings so link scoring
    // sees one batch: index 0 = query, 1.. = dictionary.
    let dim = ctx.embeddings.dim().1;
    let mut emb = Array2::<f32>::zeros((d + 1, dim));
    emb.row_mut(0).assign(&e_q.row(0));
    for i in 0..d {
        emb.row_mut(i + 1).assign(&ctx.embeddings.row(i));
    }
    let pairs: Vec<(usize, usize)> = (0..d).map(|i| (0, i + 1)).collect();
    let scores = score_links(&emb.view(), &pairs)?;

    let scored: Vec<(String, f64)> =
        ctx.ids.iter().cloned().zip(scores.iter().copied()).collect();
    let (top_ids, anchor_id) = select_topk(&scored, cfg.stn.k_stn)?;
    let anchor_local = ctx.ids.iter().position(|i| *i == anchor_id).expect("anchor in ctx");
    let anchor_score = scores[anchor_local];
    let anchor_h = ctx.homographies[anchor_local];

    let residual = if anchor_only {
        Homography::identity()
    } else {
        let rows = cfg.stn.input_rows();
        let mut input = Array2::<f32>::zeros((rows, dim));
        let mut row = 0usize;
        if cfg.stn.include_seed {
            input.row_mut(0).assign(&e_q.row(0));
            row = 1;
        }
        for id in &top_ids {
            let l = ctx.ids.iter().position(|i| i == id).expect("topk id in ctx");
            input.row_mut(row).assign(&ctx.embeddings.row(l));
            row += 1;
        }
        stn_forward(&input.view(), params, &cfg.stn)?.0
    };
    let h = compose(&anchor_h, &residual)?;
    Ok(QueryInference { h, residual, anchor_id, anchor_score, scores })
}

/// Full calibration result for an external image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// BEV -> image homography, row-major, h33 = 1.
    pub h: Homography,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub camera_height_m: f64,
    /// Orthonormality residual of the decomposition (pre-projection).
    pub decomposition_residual: f64,
    pub decomposition_warning: bool,
    pub anchor_id: String,
    pub anchor_score: f64,
    pub iou_vs_input: Option<f64>,
    pub runtime_ms: f64,
}

/// Calibrate a label-mask image: optional class merging, matching against the
/// dictionary, residual regression, and extrinsics recovery under `k`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    image: &ArrayView2<ClassId>,
    merge: Option<&MergeMap>,
    ctx: &DictionaryContext,
    params: &Params,
    cfg: &ModelConfig,
    k: &Intrinsics,
    bev: &SemanticBEV,
    out_size: (u32, u32),
) -> Result<CalibrationResult> {
    let start = std::time::Instant::now();
    if ctx.is_empty() {
        return Err(Error::Graph("dictionary is empty".into()));
    }
    let merged;
    let labels = match merge {
        Some(m) => {
            merged = merge_classes(image, m)?;
            merged.view()
        }
        None => image.view(),
    };
    for &l in labels.iter() {
        if !bev.palette.contains(l) {
            return Err(Error::InvalidInput(format!(
                "image contains class id {l} outside the scene palette (apply a merge map?)"
            )));
        }
    }
    let (w, h) = (out_size.0 as usize, out_size.1 as usize);
    let resized;
    let labels = if labels.dim() != (h, w) {
        resized = resize_labels_nearest(&labels, (w, h));
        resized.view()
    } else {
        labels
    };

    let inference = infer_query(&labels, bev.num_classes(), ctx, params, cfg, false)?;
    let pose = decompose_homography(&inference.h, k, bev.meters_per_pixel)?;
    let warped =
        warp_labels(&bev.labels.view(), &inference.h, (w, h), bev.palette.background_id())?;
    let iou_vs_input = iou(&warped.view(), &labels, &bev.palette)?;
    let (rotation, translation) = pose.extrinsics.to_arrays();
    Ok(CalibrationResult {
        h: inference.h,
        rotation,
        translation,
        camera_height_m: pose.extrinsics.height_above_plane(),
        decomposition_residual: pose.orthonormality_residual,
        decomposition_warning: pose.warning,
        anchor_id: inference.anchor_id,
        anchor_score: inference.anchor_score,
        iou_vs_input: Some(iou_vs_input),
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Nearest-neighbor resampling of a label grid to `(w, h)`.
pub fn resize_labels_nearest(
    labels: &ArrayView2<ClassId>,
    (w, h): (usize, usize),
) -> ndarray::Array2<ClassId> {
    let (ih, iw) = labels.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * ih as f64 / h as f64 - 0.5).round();
        let sx = ((x as f64 + 0.5) * iw as f64 / w as f64 - 0.5).round();
        let sy = (sy.max(0.0) as usize).min(ih - 1);
        let sx = (sx.max(0.0) as usize).min(iw - 1);
        labels[(sy, sx)]
    })
}
