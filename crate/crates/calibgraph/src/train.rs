//! Two-phase training: link-prediction warmup, then end-to-end homography
//! training with IoU-driven learning-rate halving and early stopping.
//!
//! Phase discipline: warmup minimizes only the link BCE and never touches the
//! homography head; the end-to-end phase minimizes only the topological MSE
//! of the warped BEV, with gradients reaching the link scorer solely through
//! the selected embeddings.
//!
//! All randomness is derived from the master training seed, the phase tag,
//! and the epoch/step counters, so a run resumed from any checkpoint replays
//! the exact remaining schedule.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Fnv1a, GraphConfig};
use crate::datagen::{DatasetManifest, ImageStore, Split};
use crate::error::{Error, Result};
use crate::geometry::{compose, warp_channels, warp_channels_vjp, warp_labels, Homography};
use crate::graph::{sample_minibatch, MiniBatch, TemplateGraph};
use crate::infer::{build_dictionary_context, infer_query};
use crate::loss::{bce_link_loss, iou, roc_auc, topological_mse_with_grad, LossConfig};
use crate::model::{
    extract_features, extract_features_backward, gnn_backward, gnn_forward, score_links,
    score_links_backward, select_topk, stn_backward, stn_forward, BatchAdjacency, Checkpoint,
    ModelConfig,
};
use crate::nn::{Adam, Grads, Params};
use crate::scene::{encode_onehot, encode_onehot_f32, SemanticBEV};

/// Two-phase schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    /// Upper bound on end-to-end epochs; the IoU scheduler usually stops
    /// training earlier.
    #[serde(default = "default_max_epochs")]
    pub max_end2end_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_extractor")]
    pub lr_extractor: f64,
    #[serde(default = "default_lr_gnn")]
    pub lr_gnn: f64,
    #[serde(default = "default_lr_stn")]
    pub lr_stn: f64,
    #[serde(default = "default_lr_patience")]
    pub lr_patience: usize,
    #[serde(default = "default_stop_patience")]
    pub stop_patience: usize,
    /// Training cycles for mean±std reporting (each cycle re-splits and
    /// retrains); consumed by the experiment driver, not a single run.
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    /// Fraction of train nodes held out to drive the LR/stop schedule.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Halvings applied to the extractor/GNN rates when entering the
    /// end-to-end phase (the regression head keeps `lr_stn`). Slowing the
    /// matching branches preserves anchor quality while the head trains.
    #[serde(default)]
    pub e2e_matching_halvings: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_warmup_epochs() -> usize {
    30
}
fn default_max_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    16
}
fn default_lr_extractor() -> f64 {
    1e-3
}
fn default_lr_gnn() -> f64 {
    1e-3
}
fn default_lr_stn() -> f64 {
    1e-4
}
fn default_lr_patience() -> usize {
    10
}
fn default_stop_patience() -> usize {
    15
}
fn default_cycles() -> usize {
    5
}
fn default_validation_fraction() -> f64 {
    0.2
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: default_warmup_epochs(),
            max_end2end_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            lr_extractor: default_lr_extractor(),
            lr_gnn: default_lr_gnn(),
            lr_stn: default_lr_stn(),
            lr_patience: default_lr_patience(),
            stop_patience: default_stop_patience(),
            cycles: default_cycles(),
            validation_fraction: default_validation_fraction(),
            e2e_matching_halvings: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_patience == 0 || self.stop_patience == 0 {
            return Err(Error::Train("patiences must be >= 1".into()));
        }
        if !(self.lr_extractor > 0.0 && self.lr_gnn > 0.0 && self.lr_stn > 0.0) {
            return Err(Error::Train("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Train("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Train("validation fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    End2End,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::End2End => "end2end",
        })
    }
}

/// Mutable schedule state; `epoch` counts completed epochs of the current
/// phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    pub epoch: usize,
    pub best_val_iou: f64,
    pub epochs_since_improvement: usize,
    pub lr_extractor: f64,
    pub lr_gnn: f64,
    pub lr_stn: f64,
    pub stopped: bool,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Self {
        Self {
            phase: Phase::Warmup,
            epoch: 0,
            best_val_iou: 0.0,
            epochs_since_improvement: 0,
            lr_extractor: cfg.lr_extractor,
            lr_gnn: cfg.lr_gnn,
            lr_stn: cfg.lr_stn,
            stopped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleDecision {
    Improved,
    Stagnant,
    Halved,
    Stop,
}

/// One scheduler tick: strict improvement resets the counters; hitting
/// `lr_patience` stagnant epochs halves every learning rate, and
/// `lr_patience + stop_patience` stagnant epochs stops training.
pub fn update_schedule(
    state: &mut TrainState,
    val_iou: f64,
    lr_patience: usize,
    stop_patience: usize,
) -> ScheduleDecision {
    if val_iou > state.best_val_iou {
        state.best_val_iou = val_iou;
        state.epochs_since_improvement = 0;
        return ScheduleDecision::Improved;
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement >= lr_patience + stop_patience {
        state.stopped = true;
        return ScheduleDecision::Stop;
    }
    if state.epochs_since_improvement == lr_patience {
        state.lr_extractor /= 2.0;
        state.lr_gnn /= 2.0;
        state.lr_stn /= 2.0;
        return ScheduleDecision::Halved;
    }
    ScheduleDecision::Stagnant
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LrTriple {
    pub extractor: f64,
    pub gnn: f64,
    pub stn: f64,
}

/// One JSON-lines record per epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    pub val_iou: Option<f64>,
    pub lrs: LrTriple,
}

/// Immutable references shared by training and evaluation.
#[derive(Clone, Copy)]
pub struct TrainSetup<'a> {
    pub bev: &'a SemanticBEV,
    pub manifest: &'a DatasetManifest,
    pub store: &'a ImageStore,
    pub graph: &'a TemplateGraph,
    pub model_cfg: &'a ModelConfig,
    pub loss_cfg: &'a LossConfig,
    pub graph_cfg: &'a GraphConfig,
    pub train_cfg: &'a TrainConfig,
}

fn derived_seed(master: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&master.to_le_bytes());
    h.write(tag.as_bytes());
    h.write(&a.to_le_bytes());
    h.write(&b.to_le_bytes());
    h.finish()
}

/// Trainer owning the parameters, optimizer state, and schedule.
pub struct Trainer<'a> {
    pub setup: TrainSetup<'a>,
    pub params: Params,
    pub adam: Adam,
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    /// Highest-validation-IoU parameters seen during end-to-end training.
    pub best_params: Option<Params>,
    metrics_path: Option<PathBuf>,
    /// Train-split node indices used for gradient steps (validation held out).
    train_pool: Vec<usize>,
    /// Held-out train nodes driving the schedule.
    val_pool: Vec<usize>,
    h_by_id: BTreeMap<String, Homography>,
    bev_onehot: ndarray::Array3<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(setup: TrainSetup<'a>, params: Params) -> Result<Self> {
        setup.train_cfg.validate()?;
        setup.model_cfg.validate()?;
        if setup.graph.len() != setup.manifest.samples.len() {
            return Err(Error::Train("graph and manifest disagree on node count".into()));
        }
        let train_nodes = setup.graph.nodes_in_split(Split::Train);
        if train_nodes.is_empty() {
            return Err(Error::Train("train split is empty".into()));
        }
        let master = setup.train_cfg.seed;
        let mut order = train_nodes.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(master, "valsplit", 0, 0));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_val = ((order.len() as f64) * setup.train_cfg.validation_fraction).round() as usize;
        let n_val = n_val.min(order.len().saturating_sub(1));
        let val_pool: Vec<usize> = order[..n_val].to_vec();
        let train_pool: Vec<usize> = order[n_val..].to_vec();
        let h_by_id = setup
            .manifest
            .samples
            .iter()
            .map(|s| (s.id.clone(), s.h_gt))
            .collect();
        let bev_onehot =
            encode_onehot(&setup.bev.labels.view(), setup.bev.num_classes());
        Ok(Self {
            setup,
            params,
            adam: Adam::new(),
            state: TrainState::fresh(setup.train_cfg),
            metrics: Vec::new(),
            best_params: None,
            metrics_path: None,
            train_pool,
            val_pool,
            h_by_id,
            bev_onehot,
        })
    }

    /// Stream metrics records to a JSON-lines file as they are produced.
    pub fn log_metrics_to(&mut self, path: PathBuf) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, b"").map_err(|e| Error::io(&path, e))?;
        self.metrics_path = Some(path);
        Ok(())
    }

    pub fn validation_nodes(&self) -> &[usize] {
        &self.val_pool
    }

    fn push_metrics(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(path) = &self.metrics_path {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&record).map_err(|e| Error::json(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.metrics.push(record);
        Ok(())
    }

    fn lrs(&self) -> LrTriple {
        LrTriple {
            extractor: self.state.lr_extractor,
            gnn: self.state.lr_gnn,
            stn: self.state.lr_stn,
        }
    }

    fn epoch_batches(&self, phase: Phase, epoch: usize) -> Vec<Vec<usize>> {
        let master = self.setup.train_cfg.seed;
        let mut order = self.train_pool.clone();
        let tag = match phase {
            Phase::Warmup => "warmup_shuffle",
            Phase::End2End => "e2e_shuffle",
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(master, tag, epoch as u64, 0));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
            .chunks(self.setup.train_cfg.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    fn batch_for(&self, phase: Phase, epoch: usize, step: usize, seeds: &[usize]) -> Result<MiniBatch> {
        let tag = match phase {
            Phase::Warmup => "warmup_batch",
            Phase::End2End => "e2e_batch",
        };
        let seed = derived_seed(self.setup.train_cfg.seed, tag, epoch as u64, step as u64);
        sample_minibatch(
            self.setup.graph,
            seeds,
            (self.setup.graph_cfg.fanout1, self.setup.graph_cfg.fanout2),
            seed,
        )
    }

    /// Images (one-hot f32) for the batch nodes, plus the local adjacency and
    /// candidate links in batch-local indices.
    fn assemble_batch(
        &self,
        batch: &MiniBatch,
    ) -> Result<(Vec<Array3<f32>>, BatchAdjacency, Vec<(usize, usize)>)> {
        let nodes = batch.nodes();
        let local: BTreeMap<usize, usize> =
            nodes.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        let num_classes = self.setup.bev.num_classes();
        let images: Vec<Array3<f32>> = nodes
            .iter()
            .map(|&g| {
                let id = self.setup.graph.node_id(g);
                let labels = self
                    .setup
                    .store
                    .get(id)
                    .ok_or_else(|| Error::Train(format!("missing image for {id}")))?;
                Ok(encode_onehot_f32(&labels.view(), num_classes))
            })
            .collect::<Result<_>>()?;
        let edges: Vec<(usize, usize)> = batch
            .agg_edges
            .iter()
            .map(|&(dst, src)| (local[&dst], local[&src]))
            .collect();
        let adj = BatchAdjacency::new(nodes.len(), &edges)?;
        let links: Vec<(usize, usize)> = batch
            .candidate_links
            .iter()
            .map(|&(s, d)| (local[&s], local[&d]))
            .collect();
        Ok((images, adj, links))
    }

    /// One warmup step: joint extractor + GNN update on the link BCE.
    /// Returns `(summed link loss, number of links)`.
    fn warmup_step(&mut self, batch: &MiniBatch) -> Result<(f64, usize)> {
        let (images, adj, links) = self.assemble_batch(batch)?;
        let feats = extract_features(&images, &self.params, &self.setup.model_cfg.extractor)?;
        let (emb, cache) =
            gnn_forward(&feats.view(), &adj, &self.params, &self.setup.model_cfg.gnn)?;
        let scores = score_links(&emb.view(), &links)?;
        let loss = bce_link_loss(&scores, &batch.labels, self.setup.loss_cfg.epsilon)?;

        // d(BCE)/d(logit) = p - y for the summed loss.
        let grad_logits: Vec<f64> = scores
            .iter()
            .zip(&batch.labels)
            .map(|(&p, &y)| p - y)
            .collect();
        let grad_emb = score_links_backward(&emb.view(), &links, &grad_logits);
        let mut grads = Grads::new();
        let grad_feats = gnn_backward(
            &cache,
            &adj,
            &self.params,
            &self.setup.model_cfg.gnn,
            &grad_emb,
            &mut grads,
        );
        let ext_grads = extract_features_backward(
            &images,
            &self.params,
            &self.setup.model_cfg.extractor,
            &grad_feats.view(),
        )?;
        grads.merge(ext_grads);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Train(format!(
                "non-finite warmup loss/gradients; state: {:?}",
                self.state
            )));
        }
        let lrs = self.lrs();
        self.adam.step(&mut self.params, &grads, |name| {
            if name.starts_with("extractor.") {
                lrs.extractor
            } else if name.starts_with("gnn.") {
                lrs.gnn
            } else {
                lrs.stn
            }
        });
        Ok((loss, links.len()))
    }

    /// One end-to-end step: per seed, select the anchor and top-k embeddings,
    /// regress the residual, warp the BEV by `H = H_anchor * residual`, and
    /// minimize the topological MSE. Returns the mean per-seed loss.
    fn end2end_step(&mut self, batch: &MiniBatch) -> Result<f64> {
        let (images, adj, links) = self.assemble_batch(batch)?;
        let nodes = batch.nodes();
        let model_cfg = self.setup.model_cfg;
        let feats = extract_features(&images, &self.params, &model_cfg.extractor)?;
        let (emb, cache) = gnn_forward(&feats.view(), &adj, &self.params, &model_cfg.gnn)?;
        let scores = score_links(&emb.view(), &links)?;

        let n_seeds = batch.seeds.len();
        let n_dict = batch.dict_nodes.len();
        let out_size = self.setup.store.out_size();
        let out_size = (out_size.0 as usize, out_size.1 as usize);
        let background = self.setup.bev.palette.background_id() as usize;
        let num_classes = self.setup.bev.num_classes();
        let scale = 1.0 / n_seeds as f64;

        let mut grads = Grads::new();
        let mut grad_emb = Array2::<f32>::zeros(emb.raw_dim());
        let mut total_loss = 0.0f64;

        for (si, &seed_g) in batch.seeds.iter().enumerate() {
            // This seed's scores over the batch dictionary (links are ordered
            // seed-major).
            let offset = si * n_dict;
            let scored: Vec<(String, f64)> = (0..n_dict)
                .map(|di| {
                    let g = batch.dict_nodes[di];
                    (self.setup.graph.node_id(g).to_string(), scores[offset + di])
                })
                .collect();
            let (top_ids, anchor_id) = select_topk(&scored, model_cfg.stn.k_stn)?;
            let anchor_h = self.h_by_id[&anchor_id];

            // Batch-local rows feeding the head: seed first, then top-k.
            let seed_local = si;
            let dict_local_of = |id: &str| -> usize {
                let g = self.setup.graph.index_of(id).expect("id in graph");
                n_seeds + batch.dict_nodes.iter().position(|&d| d == g).expect("dict in batch")
            };
            let dim = emb.dim().1;
            let rows = model_cfg.stn.input_rows();
            let mut stn_in = Array2::<f32>::zeros((rows, dim));
            let mut row = 0usize;
            if model_cfg.stn.include_seed {
                stn_in.row_mut(0).assign(&emb.row(seed_local));
                row = 1;
            }
            let top_locals: Vec<usize> = top_ids.iter().map(|id| dict_local_of(id)).collect();
            for &l in &top_locals {
                stn_in.row_mut(row).assign(&emb.row(l));
                row += 1;
            }
            let (residual, stn_cache) = stn_forward(&stn_in.view(), &self.params, &model_cfg.stn)?;
            let h = compose(&anchor_h, &residual)?;

            let target_id = self.setup.graph.node_id(seed_g);
            let target_labels = self
                .setup
                .store
                .get(target_id)
                .ok_or_else(|| Error::Train(format!("missing image for {target_id}")))?;
            let target = encode_onehot(&target_labels.view(), num_classes);
            let pred = warp_channels(&self.bev_onehot.view(), &h, out_size, background)?;
            let (loss, grad_pred) =
                topological_mse_with_grad(&pred.view(), &target.view(), self.setup.loss_cfg)?;
            total_loss += loss;

            let (_, grad_h8) = warp_channels_vjp(
                &self.bev_onehot.view(),
                &h,
                out_size,
                background,
                &grad_pred.view(),
            )?;
            // Chain through normalization and the anchor composition:
            // M = A * residual, H = M / m22. The loss is scale-invariant, so
            // the full gradient completes with the scale-direction component.
            let hm = h.matrix();
            let mut g_full = Matrix3::<f64>::zeros();
            let mut trace = 0.0f64;
            for i in 0..8 {
                g_full[(i / 3, i % 3)] = grad_h8[i];
                trace += grad_h8[i] * hm[(i / 3, i % 3)];
            }
            g_full[(2, 2)] = -trace;
            let m = anchor_h.matrix() * residual.matrix();
            let c = m[(2, 2)];
            let d_resid_full = anchor_h.matrix().transpose() * g_full / c;
            let mut grad_resid = [0.0f64; 8];
            for (i, slot) in grad_resid.iter_mut().enumerate() {
                *slot = d_resid_full[(i / 3, i % 3)] * scale;
            }
            let d_stn_in =
                stn_backward(&stn_cache, &self.params, &model_cfg.stn, &grad_resid, &mut grads);
            let mut row = 0usize;
            if model_cfg.stn.include_seed {
                let g_row = d_stn_in.row(0).to_owned();
                grad_emb.row_mut(seed_local).scaled_add(1.0, &g_row);
                row = 1;
            }
            for &l in &top_locals {
                let g_row = d_stn_in.row(row).to_owned();
                grad_emb.row_mut(l).scaled_add(1.0, &g_row);
                row += 1;
            }
        }

        let grad_feats =
            gnn_backward(&cache, &adj, &self.params, &model_cfg.gnn, &grad_emb, &mut grads);
        let ext_grads = extract_features_backward(
            &images,
            &self.params,
            &model_cfg.extractor,
            &grad_feats.view(),
        )?;
        grads.merge(ext_grads);
        let mean_loss = total_loss * scale;
        if !mean_loss.is_finite() || !grads.all_finite() {
            return Err(Error::Train(format!(
                "non-finite end-to-end loss/gradients; state: {:?}",
                self.state
            )));
        }
        let lrs = self.lrs();
        self.adam.step(&mut self.params, &grads, |name| {
            if name.starts_with("extractor.") {
                lrs.extractor
            } else if name.starts_with("gnn.") {
                lrs.gnn
            } else {
                lrs.stn
            }
        });
        let _ = nodes;
        Ok(mean_loss)
    }

    /// Mean IoU of the inference path over a node set.
    fn mean_iou_over(&self, node_ids: &[usize], anchor_only: bool) -> Result<f64> {
        let (mean, _, _) = self.iou_stats_over(node_ids, anchor_only)?;
        Ok(mean)
    }

    fn iou_stats_over(
        &self,
        nodes: &[usize],
        anchor_only: bool,
    ) -> Result<(f64, f64, Vec<EvalRecord>)> {
        evaluate_nodes(
            self.setup.graph,
            self.setup.manifest,
            self.setup.store,
            self.setup.bev,
            &self.params,
            self.setup.model_cfg,
            nodes,
            anchor_only,
        )
    }

    /// Pooled held-out link ROC-AUC via the inference path.
    fn held_out_auc(&self) -> Result<Option<f64>> {
        if self.val_pool.is_empty() {
            return Ok(None);
        }
        let ctx = build_dictionary_context(
            self.setup.graph,
            self.setup.manifest,
            self.setup.store,
            &self.params,
            self.setup.model_cfg,
        )?;
        let results: Vec<Result<(Vec<f64>, Vec<bool>)>> = self
            .val_pool
            .par_iter()
            .map(|&g| {
                let id = self.setup.graph.node_id(g);
                let labels = self
                    .setup
                    .store
                    .get(id)
                    .ok_or_else(|| Error::Train(format!("missing image for {id}")))?;
                let inf = infer_query(
                    &labels.view(),
                    self.setup.bev.num_classes(),
                    &ctx,
                    &self.params,
                    self.setup.model_cfg,
                    true,
                )?;
                let targets: std::collections::BTreeSet<usize> =
                    self.setup.graph.edges_of(g).iter().map(|&(d, _)| d).collect();
                let labels: Vec<bool> = ctx
                    .graph_indices
                    .iter()
                    .map(|gi| targets.contains(gi))
                    .collect();
                Ok((inf.scores, labels))
            })
            .collect();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for r in results {
            let (s, l) = r?;
            scores.extend(s);
            labels.extend(l);
        }
        Ok(roc_auc(&scores, &labels))
    }

    /// Exactly `warmup_epochs` epochs of joint extractor+GNN training on the
    /// link loss; the homography head is untouched.
    pub fn run_warmup(&mut self) -> Result<()> {
        if self.state.phase != Phase::Warmup {
            return Err(Error::Train("warmup already completed".into()));
        }
        let total = self.setup.train_cfg.warmup_epochs;
        while self.state.epoch < total {
            let epoch = self.state.epoch + 1;
            let mut loss_sum = 0.0f64;
            let mut link_count = 0usize;
            let batches = self.epoch_batches(Phase::Warmup, epoch);
            for (step, seeds) in batches.iter().enumerate() {
                let batch = self.batch_for(Phase::Warmup, epoch, step, seeds)?;
                let (loss, n) = self.warmup_step(&batch)?;
                loss_sum += loss;
                link_count += n;
            }
            let auc = self.held_out_auc()?;
            self.state.epoch = epoch;
            let record = MetricsRecord {
                phase: Phase::Warmup.to_string(),
                epoch,
                loss: loss_sum / link_count.max(1) as f64,
                val_auc: auc,
                val_iou: None,
                lrs: self.lrs(),
            };
            self.push_metrics(record)?;
        }
        for _ in 0..self.setup.train_cfg.e2e_matching_halvings {
            self.state.lr_extractor /= 2.0;
            self.state.lr_gnn /= 2.0;
        }
        self.state.phase = Phase::End2End;
        self.state.epoch = 0;
        Ok(())
    }

    /// End-to-end phase: full pipeline on the topological MSE only, with
    /// validation-IoU-driven halving and early stopping.
    pub fn run_end2end(&mut self) -> Result<()> {
        if self.state.phase != Phase::End2End {
            return Err(Error::Train("run warmup (or skip it) before the end-to-end phase".into()));
        }
        if self.val_pool.is_empty() {
            return Err(Error::Train("validation split is empty".into()));
        }
        while !self.state.stopped && self.state.epoch < self.setup.train_cfg.max_end2end_epochs {
            let epoch = self.state.epoch + 1;
            let mut loss_sum = 0.0f64;
            let batches = self.epoch_batches(Phase::End2End, epoch);
            let n_batches = batches.len().max(1);
            for (step, seeds) in batches.iter().enumerate() {
                let batch = self.batch_for(Phase::End2End, epoch, step, seeds)?;
                loss_sum += self.end2end_step(&batch)?;
            }
            let val_iou = self.mean_iou_over(&self.val_pool.clone(), false)?;
            let decision = update_schedule(
                &mut self.state,
                val_iou,
                self.setup.train_cfg.lr_patience,
                self.setup.train_cfg.stop_patience,
            );
            if decision == ScheduleDecision::Improved {
                self.best_params = Some(self.params.clone());
            }
            self.state.epoch = epoch;
            let record = MetricsRecord {
                phase: Phase::End2End.to_string(),
                epoch,
                loss: loss_sum / n_batches as f64,
                val_auc: None,
                val_iou: Some(val_iou),
                lrs: self.lrs(),
            };
            self.push_metrics(record)?;
        }
        Ok(())
    }

    /// Parameters to evaluate with: the best validation snapshot when one
    /// exists, otherwise the live parameters.
    pub fn eval_params(&self) -> &Params {
        self.best_params.as_ref().unwrap_or(&self.params)
    }

    /// Persist parameters, optimizer state, and the schedule state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.params.clone();
        for (name, t) in self.adam.state_tensors() {
            tensors.insert(&name, t.clone());
        }
        let extra = serde_json::json!({
            "train_state": self.state,
            "adam_t": self.adam.t,
            "train_seed": self.setup.train_cfg.seed,
        });
        let ckpt = Checkpoint {
            model: self.setup.model_cfg.clone(),
            seed: self.setup.model_cfg.seed,
            tensors,
            extra,
        };
        crate::model::save_checkpoint(path, &ckpt)
    }

    /// Resume from a checkpoint produced by [`Trainer::save_checkpoint`].
    pub fn from_checkpoint(setup: TrainSetup<'a>, path: &Path) -> Result<Self> {
        let ckpt = crate::model::load_checkpoint(path)?;
        if &ckpt.model != setup.model_cfg {
            return Err(Error::Checkpoint(
                "checkpoint model config does not match the run configuration".into(),
            ));
        }
        let state: TrainState = serde_json::from_value(ckpt.extra["train_state"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad train state: {e}")))?;
        let adam_t = ckpt.extra["adam_t"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing adam_t".into()))?;
        let (params, opt_state) = crate::model::partition_tensors(ckpt.tensors);
        let mut trainer = Self::new(setup, params)?;
        trainer.adam.restore_state(adam_t, opt_state)?;
        trainer.state = state;
        Ok(trainer)
    }
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub iou: f64,
    pub anchor_id: String,
    pub anchor_score: f64,
}

/// Aggregated evaluation over one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene_id: String,
    pub variant: String,
    pub train_seed: u64,
    pub split: String,
    pub anchor_only: bool,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_nodes(
    graph: &TemplateGraph,
    manifest: &DatasetManifest,
    store: &ImageStore,
    bev: &SemanticBEV,
    params: &Params,
    model_cfg: &ModelConfig,
    nodes: &[usize],
    anchor_only: bool,
) -> Result<(f64, f64, Vec<EvalRecord>)> {
    if nodes.is_empty() {
        return Err(Error::Train("cannot evaluate an empty node set".into()));
    }
    let ctx = build_dictionary_context(graph, manifest, store, params, model_cfg)?;
    let out_size = store.out_size();
    let out_size = (out_size.0 as usize, out_size.1 as usize);
    let records: Vec<Result<EvalRecord>> = nodes
        .par_iter()
        .map(|&g| {
            let id = graph.node_id(g);
            let labels = store
                .get(id)
                .ok_or_else(|| Error::Train(format!("missing image for {id}")))?;
            let inf = infer_query(
                &labels.view(),
                bev.num_classes(),
                &ctx,
                params,
                model_cfg,
                anchor_only,
            )?;
            let warped = warp_labels(
                &bev.labels.view(),
                &inf.h,
                out_size,
                bev.palette.background_id(),
            )?;
            let iou_v = iou(&warped.view(), &labels.view(), &bev.palette)?;
            Ok(EvalRecord {
                id: id.to_string(),
                iou: iou_v,
                anchor_id: inf.anchor_id,
                anchor_score: inf.anchor_score,
            })
        })
        .collect();
    let records: Vec<EvalRecord> = records.into_iter().collect::<Result<_>>()?;
    let mean = records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64;
    let var = records.iter().map(|r| (r.iou - mean).powi(2)).sum::<f64>() / records.len() as f64;
    Ok((mean, var.sqrt(), records))
}

/// Run the full inference path over a split and aggregate mean ± std IoU.
/// `anchor_only` replaces the regressed residual with the identity, so the
/// calibration is exactly the anchor homography.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    graph: &TemplateGraph,
    manifest: &DatasetManifest,
    store: &ImageStore,
    bev: &SemanticBEV,
    params: &Params,
    model_cfg: &ModelConfig,
    split: Split,
    anchor_only: bool,
    variant: &str,
    train_seed: u64,
) -> Result<EvalReport> {
    let nodes = graph.nodes_in_split(split);
    if nodes.is_empty() {
        return Err(Error::Train(format!("split {split} is empty")));
    }
    let (mean, std, records) =
        evaluate_nodes(graph, manifest, store, bev, params, model_cfg, &nodes, anchor_only)?;
    Ok(EvalReport {
        scene_id: manifest.meta.scene_id.clone(),
        variant: variant.to_string(),
        train_seed,
        split: split.to_string(),
        anchor_only,
        mean_iou: mean,
        std_iou: std,
        records,
    })
}
