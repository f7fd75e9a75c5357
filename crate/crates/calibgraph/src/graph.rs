//! The template graph and its mini-batch sampler.
//!
//! Nodes are view samples; every non-dictionary node is connected to its `k`
//! most similar dictionary templates (lowest topological MSE), and every
//! dictionary node to its `k` most similar *other* dictionary templates. Ties
//! break by ascending sample id, so graph construction is independent of
//! input ordering.
//!
//! Mini-batches take a set of seed nodes from one split, sample up to `f1` of
//! each seed's dictionary neighbors (hop 1) and up to `f2` dictionary
//! neighbors of each hop-1 node (hop 2); candidates outside the dictionary
//! are discarded before sampling, so splits never contaminate each other.
//! Candidate links are all (seed, dictionary-in-batch) pairs, labeled 1
//! exactly when the pair is a graph edge.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write as _};
use std::path::Path;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, ImageStore, Split};
use crate::error::{Error, Result};
use crate::loss::{topological_mse_labels, LossConfig};
use crate::scene::ClassId;

/// Topological similarity between two equally sized label images; lower means
/// more similar. Equal to the topological MSE of the one-hot encodings.
pub fn similarity_score(
    a: &ArrayView2<ClassId>,
    b: &ArrayView2<ClassId>,
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    topological_mse_labels(a, b, num_classes, cfg)
}

/// Directed template graph. Edge targets are always dictionary nodes.
#[derive(Debug, Clone)]
pub struct TemplateGraph {
    pub k: usize,
    node_ids: Vec<String>,
    splits: Vec<Split>,
    id_to_index: BTreeMap<String, usize>,
    /// Per node: `(dict node index, score)`, ascending by `(score, id)`.
    edges: Vec<Vec<(usize, f64)>>,
    dict_nodes: Vec<usize>,
}

impl TemplateGraph {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_id(&self, index: usize) -> &str {
        &self.node_ids[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_to_index.get(id).copied()
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn dictionary_nodes(&self) -> &[usize] {
        &self.dict_nodes
    }

    pub fn edges_of(&self, index: usize) -> &[(usize, f64)] {
        &self.edges[index]
    }

    pub fn is_dictionary(&self, index: usize) -> bool {
        self.splits[index] == Split::Dictionary
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges[src].iter().any(|&(d, _)| d == dst)
    }

    /// Nodes of one split, in manifest order.
    pub fn nodes_in_split(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Build the template graph from a split manifest. Every node (including
/// dictionary nodes) gets edges to its `k` lowest-score dictionary templates,
/// self excluded.
pub fn build_graph(
    manifest: &DatasetManifest,
    store: &ImageStore,
    k: usize,
    cfg: &LossConfig,
) -> Result<TemplateGraph> {
    cfg.validate()?;
    let n = manifest.samples.len();
    let node_ids: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
    let splits: Vec<Split> = manifest.samples.iter().map(|s| s.split).collect();
    if splits.iter().any(|&s| s == Split::Unassigned) {
        return Err(Error::Graph("manifest has unassigned samples; split it first".into()));
    }
    let dict_nodes: Vec<usize> =
        (0..n).filter(|&i| splits[i] == Split::Dictionary).collect();
    let d = dict_nodes.len();
    if d == 0 {
        return Err(Error::Graph("dictionary split is empty".into()));
    }
    if k == 0 || k > d.saturating_sub(1) {
        return Err(Error::Graph(format!(
            "k = {k} is not satisfiable with {d} dictionary nodes (dictionary nodes need k \
             other templates)"
        )));
    }
    let num_classes = manifest.meta.num_classes;
    let images: Vec<&ndarray::Array2<ClassId>> = node_ids
        .iter()
        .map(|id| {
            store
                .get(id)
                .ok_or_else(|| Error::Graph(format!("image store is missing sample {id}")))
        })
        .collect::<Result<_>>()?;

    let id_to_index: BTreeMap<String, usize> =
        node_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();

    let edges: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut scored: Vec<(usize, f64)> = Vec::with_capacity(d);
            for &dj in &dict_nodes {
                if dj == i {
                    continue;
                }
                let score = similarity_score(
                    &images[i].view(),
                    &images[dj].view(),
                    num_classes,
                    cfg,
                )?;
                scored.push((dj, score));
            }
            scored.sort_by(|a, b| {
                a.1.total_cmp(&b.1).then_with(|| node_ids[a.0].cmp(&node_ids[b.0]))
            });
            scored.truncate(k);
            Ok(scored)
        })
        .collect::<Result<_>>()?;

    Ok(TemplateGraph { k, node_ids, splits, id_to_index, edges, dict_nodes })
}

/// Graph sidecar metadata for on-disk caching.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GraphMeta {
    pub k: usize,
    pub manifest_digest: u64,
    pub loss_digest: u64,
    pub node_count: usize,
}

/// Write the edge list as `src_id,dst_id,score` CSV plus a metadata JSON.
pub fn save_graph(
    graph: &TemplateGraph,
    manifest: &DatasetManifest,
    cfg: &LossConfig,
    edges_path: &Path,
    meta_path: &Path,
) -> Result<()> {
    if let Some(parent) = edges_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(edges_path).map_err(|e| Error::io(edges_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "src_id,dst_id,score").map_err(|e| Error::io(edges_path, e))?;
    for i in 0..graph.len() {
        for &(dst, score) in graph.edges_of(i) {
            writeln!(w, "{},{},{}", graph.node_id(i), graph.node_id(dst), score)
                .map_err(|e| Error::io(edges_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(edges_path, e))?;

    let meta = GraphMeta {
        k: graph.k,
        manifest_digest: manifest.digest(),
        loss_digest: cfg.digest(),
        node_count: graph.len(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(meta_path, e))?;
    std::fs::write(meta_path, text).map_err(|e| Error::io(meta_path, e))
}

/// Load a cached graph. Fails if the metadata digests do not match the given
/// manifest and loss configuration.
pub fn load_graph(
    manifest: &DatasetManifest,
    cfg: &LossConfig,
    edges_path: &Path,
    meta_path: &Path,
) -> Result<TemplateGraph> {
    let text = std::fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: GraphMeta = serde_json::from_str(&text).map_err(|e| Error::json(meta_path, e))?;
    if meta.manifest_digest != manifest.digest() || meta.loss_digest != cfg.digest() {
        return Err(Error::Graph(
            "cached graph does not match the manifest/loss configuration".into(),
        ));
    }
    let node_ids: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
    let splits: Vec<Split> = manifest.samples.iter().map(|s| s.split).collect();
    let id_to_index: BTreeMap<String, usize> =
        node_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); node_ids.len()];

    let file = std::fs::File::open(edges_path).map_err(|e| Error::io(edges_path, e))?;
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(edges_path, e))?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (src, dst, score) = (
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
        );
        let si = *id_to_index
            .get(src)
            .ok_or_else(|| Error::Graph(format!("edge references unknown id {src}")))?;
        let di = *id_to_index
            .get(dst)
            .ok_or_else(|| Error::Graph(format!("edge references unknown id {dst}")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::Graph(format!("bad score at line {}", lineno + 1)))?;
        edges[si].push((di, score));
    }
    let dict_nodes: Vec<usize> =
        (0..node_ids.len()).filter(|&i| splits[i] == Split::Dictionary).collect();
    let graph =
        TemplateGraph { k: meta.k, node_ids, splits, id_to_index, edges, dict_nodes };
    validate_graph(&graph)?;
    Ok(graph)
}

fn validate_graph(graph: &TemplateGraph) -> Result<()> {
    for i in 0..graph.len() {
        let edges = graph.edges_of(i);
        if !graph.is_dictionary(i) && edges.len() != graph.k {
            return Err(Error::Graph(format!(
                "node {} has {} edges, expected {}",
                graph.node_id(i),
                edges.len(),
                graph.k
            )));
        }
        for &(dst, score) in edges {
            if !graph.is_dictionary(dst) {
                return Err(Error::Graph(format!(
                    "edge {} -> {} targets a non-dictionary node",
                    graph.node_id(i),
                    graph.node_id(dst)
                )));
            }
            if !score.is_finite() || score < 0.0 {
                return Err(Error::Graph("non-finite or negative edge score".into()));
            }
        }
    }
    Ok(())
}

/// A sampled 2-hop sub-graph around a set of seed nodes.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    /// Seed node indices, in sampling order.
    pub seeds: Vec<usize>,
    /// Unique hop-1 dictionary nodes, in first-seen order.
    pub hop1: Vec<usize>,
    /// Unique hop-2 dictionary nodes, in first-seen order.
    pub hop2: Vec<usize>,
    /// Sorted unique dictionary nodes of the batch (hop1 ∪ hop2).
    pub dict_nodes: Vec<usize>,
    /// Graph edges between dictionary nodes of the batch, as
    /// `(aggregating node, neighbor)` pairs.
    pub agg_edges: Vec<(usize, usize)>,
    /// All (seed, dictionary-in-batch) pairs.
    pub candidate_links: Vec<(usize, usize)>,
    /// 1.0 where the candidate link is a graph edge.
    pub labels: Vec<f64>,
}

impl MiniBatch {
    /// All nodes of the batch: seeds then dictionary nodes.
    pub fn nodes(&self) -> Vec<usize> {
        let mut v = self.seeds.clone();
        v.extend_from_slice(&self.dict_nodes);
        v
    }
}

/// Sample up to `count` items of `items` without replacement (partial
/// Fisher-Yates), preserving determinism for a fixed rng.
fn sample_without_replacement<T: Copy>(
    items: &[T],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    if count >= items.len() {
        return items.to_vec();
    }
    let mut pool: Vec<T> = items.to_vec();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

/// Sample a 2-hop mini-batch. Deterministic for a fixed `rng_seed`.
pub fn sample_minibatch(
    graph: &TemplateGraph,
    seeds: &[usize],
    fanouts: (usize, usize),
    rng_seed: u64,
) -> Result<MiniBatch> {
    let (f1, f2) = fanouts;
    if f1 == 0 || f2 == 0 {
        return Err(Error::Graph("fanouts must be >= 1".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Graph("empty seed set".into()));
    }
    let split = graph.split_of(seeds[0]);
    if split == Split::Dictionary {
        return Err(Error::Graph("seeds must come from a non-dictionary split".into()));
    }
    for &s in seeds {
        if graph.split_of(s) != split {
            return Err(Error::Graph("seeds must all come from one split".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut hop1 = Vec::new();
    let mut hop1_seen = BTreeSet::new();
    for &s in seeds {
        let nbrs: Vec<usize> = graph.edges_of(s).iter().map(|&(d, _)| d).collect();
        if nbrs.is_empty() {
            return Err(Error::Graph(format!(
                "seed {} has no dictionary neighbors",
                graph.node_id(s)
            )));
        }
        for d in sample_without_replacement(&nbrs, f1, &mut rng) {
            if hop1_seen.insert(d) {
                hop1.push(d);
            }
        }
    }

    let mut hop2 = Vec::new();
    let mut hop2_seen = BTreeSet::new();
    for &h in &hop1 {
        // Candidates outside the dictionary would leak split information;
        // discard them before sampling.
        let cands: Vec<usize> = graph
            .edges_of(h)
            .iter()
            .map(|&(d, _)| d)
            .filter(|&d| graph.is_dictionary(d))
            .collect();
        for d in sample_without_replacement(&cands, f2, &mut rng) {
            if hop2_seen.insert(d) {
                hop2.push(d);
            }
        }
    }

    let mut dict_nodes: Vec<usize> = hop1_seen.union(&hop2_seen).copied().collect();
    dict_nodes.sort_unstable();

    let in_batch: BTreeSet<usize> = dict_nodes.iter().copied().collect();
    let mut agg_edges = Vec::new();
    for &d in &dict_nodes {
        for &(dst, _) in graph.edges_of(d) {
            if in_batch.contains(&dst) {
                agg_edges.push((d, dst));
            }
        }
    }

    let mut batch = MiniBatch {
        seeds: seeds.to_vec(),
        hop1,
        hop2,
        dict_nodes,
        agg_edges,
        candidate_links: Vec::new(),
        labels: Vec::new(),
    };
    let (links, labels) = enumerate_candidate_links(&batch, graph);
    batch.candidate_links = links;
    batch.labels = labels;
    Ok(batch)
}

/// Every (seed, dictionary node in batch) pair, labeled 1 exactly when the
/// pair is an edge of the graph.
pub fn enumerate_candidate_links(
    batch: &MiniBatch,
    graph: &TemplateGraph,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut pairs = Vec::with_capacity(batch.seeds.len() * batch.dict_nodes.len());
    let mut labels = Vec::with_capacity(pairs.capacity());
    for &s in &batch.seeds {
        let targets: BTreeSet<usize> = graph.edges_of(s).iter().map(|&(d, _)| d).collect();
        for &d in &batch.dict_nodes {
            pairs.push((s, d));
            labels.push(if targets.contains(&d) { 1.0 } else { 0.0 });
        }
    }
    (pairs, labels)
}
