//! Model components: convolutional feature extractor, graph layers
//! (GCN / GAT / GATv2) with link scoring, top-k selection, and the
//! homography-regression head.
//!
//! All forward passes are pure functions of `(inputs, params)`; backward
//! passes are hand-written and recompute intermediate activations where that
//! is cheaper than caching them (the extractor re-runs its forward per image
//! during backprop so batches of hundreds of images stay in memory budget).

use std::collections::BTreeMap;
use std::io::{Read, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::nn::{self, Grads, Params};

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorVariant {
    FourConv,
    ResnetLike,
}

impl std::str::FromStr for ExtractorVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four-conv" => Ok(Self::FourConv),
            "resnet-like" => Ok(Self::ResnetLike),
            other => Err(Error::InvalidInput(format!("unknown extractor variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnVariant {
    Gcn,
    Gat,
    Gatv2,
}

impl GnnVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            GnnVariant::Gcn => "gcn",
            GnnVariant::Gat => "gat",
            GnnVariant::Gatv2 => "gatv2",
        }
    }
}

impl std::str::FromStr for GnnVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "gat" => Ok(Self::Gat),
            "gatv2" => Ok(Self::Gatv2),
            other => Err(Error::InvalidInput(format!("unknown gnn variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub variant: ExtractorVariant,
    /// Output channels per stage; the embedding dim is the last width.
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Append normalized x/y coordinate channels to every stage input. The
    /// global pooling at the end is translation-invariant; coordinate
    /// channels let pooled features carry spatial moments, which the
    /// homography head needs.
    #[serde(default = "default_coord_channels")]
    pub coord_channels: bool,
}

fn default_coord_channels() -> bool {
    true
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            variant: ExtractorVariant::FourConv,
            channels: vec![16, 32, 64, 128],
            kernels: vec![3, 3, 3, 3],
            strides: vec![2, 2, 2, 2],
            coord_channels: true,
        }
    }
}

impl ExtractorConfig {
    pub fn out_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty()
            || self.channels.len() != self.kernels.len()
            || self.channels.len() != self.strides.len()
        {
            return Err(Error::Model("extractor stage lists must be equal non-zero length".into()));
        }
        if self.variant == ExtractorVariant::FourConv && self.channels.len() != 4 {
            return Err(Error::Model(format!(
                "four-conv extractor requires exactly 4 stages, got {}",
                self.channels.len()
            )));
        }
        if self.strides.iter().any(|&s| s < 1) || self.kernels.iter().any(|&k| k < 1) {
            return Err(Error::Model("kernels and strides must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub variant: GnnVariant,
    pub layers: usize,
    pub heads: usize,
    /// Width of every layer output; also the embedding dimension.
    pub hidden: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self { variant: GnnVariant::Gatv2, layers: 2, heads: 4, hidden: 64 }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Model("gnn layers/heads/hidden must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Model(format!(
                "hidden dim {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StnConfig {
    /// Number of top-scoring dictionary nodes fed to the head.
    pub k_stn: usize,
    pub hidden: Vec<usize>,
    /// Whether the seed node's own embedding is row 0 of the input matrix.
    pub include_seed: bool,
    /// Per-entry scale applied to the raw offsets added onto the flattened
    /// identity (row-major, h33 fixed). Translation entries need a much
    /// larger dynamic range than the projective ones.
    pub offset_scales: [f64; 8],
}

impl Default for StnConfig {
    fn default() -> Self {
        Self {
            k_stn: 5,
            hidden: vec![128],
            include_seed: true,
            offset_scales: [0.5, 0.5, 40.0, 0.5, 0.5, 40.0, 2e-3, 2e-3],
        }
    }
}

impl StnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_stn == 0 {
            return Err(Error::Model("k_stn must be >= 1".into()));
        }
        if self.offset_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Model("offset scales must be positive".into()));
        }
        Ok(())
    }

    pub fn input_rows(&self) -> usize {
        self.k_stn + usize::from(self.include_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channels of view images (= palette size).
    pub in_channels: usize,
    pub extractor: ExtractorConfig,
    pub gnn: GnnConfig,
    pub stn: StnConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            extractor: ExtractorConfig::default(),
            gnn: GnnConfig::default(),
            stn: StnConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Model("in_channels must be positive".into()));
        }
        self.extractor.validate()?;
        self.gnn.validate()?;
        self.stn.validate()
    }

    pub fn embedding_dim(&self) -> usize {
        self.gnn.hidden
    }

    pub fn stn_input_dim(&self) -> usize {
        self.stn.input_rows() * self.embedding_dim()
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization.
// ---------------------------------------------------------------------------

/// Deterministic parameter init. The homography head's final layer starts at
/// zero so the initial residual is the identity.
pub fn init_params(cfg: &ModelConfig) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::new();

    // Extractor.
    let coord_extra = if cfg.extractor.coord_channels { 2 } else { 0 };
    let input_channels = cfg.in_channels + coord_extra;
    match cfg.extractor.variant {
        ExtractorVariant::FourConv => {
            let mut cin = cfg.in_channels;
            for (i, (&cout, (&k, _))) in cfg
                .extractor
                .channels
                .iter()
                .zip(cfg.extractor.kernels.iter().zip(&cfg.extractor.strides))
                .enumerate()
            {
                let fan_in = (cin + coord_extra) * k * k;
                params.insert(
                    &format!("extractor.conv{i}.w"),
                    nn::kaiming_uniform(&mut rng, &[cout, fan_in], fan_in),
                );
                params.insert(&format!("extractor.conv{i}.b"), nn::zeros(&[cout]));
                cin = cout;
            }
        }
        ExtractorVariant::ResnetLike => {
            let mut cin = input_channels;
            let stem = cfg.extractor.channels[0];
            let k0 = cfg.extractor.kernels[0];
            params.insert(
                "extractor.stem.w",
                nn::kaiming_uniform(&mut rng, &[stem, cin * k0 * k0], cin * k0 * k0),
            );
            params.insert("extractor.stem.b", nn::zeros(&[stem]));
            cin = stem;
            for (i, &cout) in cfg.extractor.channels.iter().enumerate().skip(1) {
                let k = cfg.extractor.kernels[i];
                params.insert(
                    &format!("extractor.block{i}.conv1.w"),
                    nn::kaiming_uniform(&mut rng, &[cout, cin * k * k], cin * k * k),
                );
                params.insert(&format!("extractor.block{i}.conv1.b"), nn::zeros(&[cout]));
                params.insert(
                    &format!("extractor.block{i}.conv2.w"),
                    nn::kaiming_uniform(&mut rng, &[cout, cout * k * k], cout * k * k),
                );
                params.insert(&format!("extractor.block{i}.conv2.b"), nn::zeros(&[cout]));
                params.insert(
                    &format!("extractor.block{i}.skip.w"),
                    nn::kaiming_uniform(&mut rng, &[cout, cin], cin),
                );
                params.insert(&format!("extractor.block{i}.skip.b"), nn::zeros(&[cout]));
                cin = cout;
            }
        }
    }

    // Graph layers.
    let heads = cfg.gnn.heads;
    let hidden = cfg.gnn.hidden;
    let mut d_in = cfg.extractor.out_dim();
    for l in 0..cfg.gnn.layers {
        let last = l + 1 == cfg.gnn.layers;
        let head_dim = if last { hidden } else { hidden / heads };
        let width = heads * head_dim;
        match cfg.gnn.variant {
            GnnVariant::Gcn => {
                params.insert(
                    &format!("gnn.layer{l}.w"),
                    nn::kaiming_uniform(&mut rng, &[hidden, d_in], d_in),
                );
                params.insert(&format!("gnn.layer{l}.b"), nn::zeros(&[hidden]));
            }
            GnnVariant::Gat => {
                params.insert(
                    &format!("gnn.layer{l}.w"),
                    nn::kaiming_uniform(&mut rng, &[width, d_in], d_in),
                );
                params.insert(
                    &format!("gnn.layer{l}.a_src"),
                    nn::kaiming_uniform(&mut rng, &[heads, head_dim], head_dim),
                );
                params.insert(
                    &format!("gnn.layer{l}.a_dst"),
                    nn::kaiming_uniform(&mut rng, &[heads, head_dim], head_dim),
                );
            }
            GnnVariant::Gatv2 => {
                params.insert(
                    &format!("gnn.layer{l}.w_l"),
                    nn::kaiming_uniform(&mut rng, &[width, d_in], d_in),
                );
                params.insert(
                    &format!("gnn.layer{l}.w_r"),
                    nn::kaiming_uniform(&mut rng, &[width, d_in], d_in),
                );
                params.insert(
                    &format!("gnn.layer{l}.a"),
                    nn::kaiming_uniform(&mut rng, &[heads, head_dim], head_dim),
                );
            }
        }
        d_in = hidden;
    }

    // Homography head (zero-initialized final layer).
    let mut width = cfg.stn_input_dim();
    for (i, &h) in cfg.stn.hidden.iter().enumerate() {
        params.insert(
            &format!("stn.fc{i}.w"),
            nn::kaiming_uniform(&mut rng, &[h, width], width),
        );
        params.insert(&format!("stn.fc{i}.b"), nn::zeros(&[h]));
        width = h;
    }
    params.insert("stn.out.w", nn::zeros(&[8, width]));
    params.insert("stn.out.b", nn::zeros(&[8]));
    Ok(params)
}

// ---------------------------------------------------------------------------
// Feature extractor.
// ---------------------------------------------------------------------------

fn conv_pad(kernel: usize) -> usize {
    if kernel % 2 == 1 {
        (kernel - 1) / 2
    } else {
        0
    }
}

/// Append normalized x/y coordinate channels in [-1, 1].
fn with_coord_channels(image: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::<f32>::zeros((c + 2, h, w));
    out.slice_mut(ndarray::s![..c, .., ..]).assign(image);
    for y in 0..h {
        let fy = if h > 1 { 2.0 * y as f32 / (h - 1) as f32 - 1.0 } else { 0.0 };
        for x in 0..w {
            let fx = if w > 1 { 2.0 * x as f32 / (w - 1) as f32 - 1.0 } else { 0.0 };
            out[(c, y, x)] = fx;
            out[(c + 1, y, x)] = fy;
        }
    }
    out
}

fn four_conv_single(
    image: &Array3<f32>,
    params: &Params,
    cfg: &ExtractorConfig,
) -> (Vec<Array3<f32>>, Array1<f32>) {
    let mut acts = Vec::with_capacity(cfg.channels.len());
    let mut x = image.clone();
    for i in 0..cfg.channels.len() {
        if cfg.coord_channels {
            x = with_coord_channels(&x);
        }
        let w = params.get2(&format!("extractor.conv{i}.w"));
        let b = params.get1(&format!("extractor.conv{i}.b"));
        let k = cfg.kernels[i];
        let out = nn::conv2d_forward(&x.view(), &w, &b, k, cfg.strides[i], conv_pad(k));
        let out = nn::relu_forward(&out);
        acts.push(out.clone());
        x = out;
    }
    let last = acts.last().unwrap();
    let (c, h, w) = last.dim();
    let denom = (h * w) as f32;
    let mut feat = Array1::<f32>::zeros(c);
    for ci in 0..c {
        feat[ci] = last.index_axis(Axis(0), ci).sum() / denom;
    }
    (acts, feat)
}

fn resnet_like_single(
    image: &Array3<f32>,
    params: &Params,
    cfg: &ExtractorConfig,
) -> Array1<f32> {
    let k0 = cfg.kernels[0];
    let stem_w = params.get2("extractor.stem.w");
    let stem_b = params.get1("extractor.stem.b");
    let input = if cfg.coord_channels { with_coord_channels(image) } else { image.clone() };
    // Coordinates only at the stem for the resnet-like ablation extractor.
    let mut x = nn::relu_forward(&nn::conv2d_forward(
        &input.view(),
        &stem_w,
        &stem_b,
        k0,
        cfg.strides[0],
        conv_pad(k0),
    ));
    for i in 1..cfg.channels.len() {
        let k = cfg.kernels[i];
        let s = cfg.strides[i];
        let w1 = params.get2(&format!("extractor.block{i}.conv1.w"));
        let b1 = params.get1(&format!("extractor.block{i}.conv1.b"));
        let w2 = params.get2(&format!("extractor.block{i}.conv2.w"));
        let b2 = params.get1(&format!("extractor.block{i}.conv2.b"));
        let ws = params.get2(&format!("extractor.block{i}.skip.w"));
        let bs = params.get1(&format!("extractor.block{i}.skip.b"));
        let h1 = nn::relu_forward(&nn::conv2d_forward(&x.view(), &w1, &b1, k, s, conv_pad(k)));
        let h2 = nn::conv2d_forward(&h1.view(), &w2, &b2, k, 1, conv_pad(k));
        // 1x1 strided skip projection.
        let skip = nn::conv2d_forward(&x.view(), &ws, &bs, 1, s, 0);
        x = nn::relu_forward(&(h2 + skip));
    }
    let (c, h, w) = x.dim();
    let denom = (h * w) as f32;
    Array1::from_iter((0..c).map(|ci| x.index_axis(Axis(0), ci).sum() / denom))
}

/// Batched feature extraction: one row per image. Deterministic and
/// parallel over fixed-size chunks.
pub fn extract_features(
    images: &[Array3<f32>],
    params: &Params,
    cfg: &ExtractorConfig,
) -> Result<Array2<f32>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Model("empty image batch".into()));
    }
    let dim0 = images[0].dim();
    if images.iter().any(|im| im.dim() != dim0) {
        return Err(Error::Model("images in a batch must share one shape".into()));
    }
    let d = cfg.out_dim();
    let feats: Vec<Array1<f32>> = images
        .par_iter()
        .map(|im| match cfg.variant {
            ExtractorVariant::FourConv => four_conv_single(im, params, cfg).1,
            ExtractorVariant::ResnetLike => resnet_like_single(im, params, cfg),
        })
        .collect();
    let mut out = Array2::<f32>::zeros((images.len(), d));
    for (i, f) in feats.into_iter().enumerate() {
        out.row_mut(i).assign(&f);
    }
    Ok(out)
}

/// Backward pass of [`extract_features`] for the four-conv variant:
/// re-runs the forward per image and accumulates parameter gradients.
pub fn extract_features_backward(
    images: &[Array3<f32>],
    params: &Params,
    cfg: &ExtractorConfig,
    grad_feats: &ArrayView2<f32>,
) -> Result<Grads> {
    cfg.validate()?;
    if cfg.variant != ExtractorVariant::FourConv {
        return Err(Error::Model(
            "backward is implemented for the four-conv extractor".into(),
        ));
    }
    let items: Vec<(usize, &Array3<f32>)> = images.iter().enumerate().collect();
    let grads = nn::accumulate_parallel(&items, 16, |chunk| {
        let mut g = Grads::new();
        for &(idx, image) in chunk {
            let (acts, _) = four_conv_single(image, params, cfg);
            let n_layers = cfg.channels.len();
            let last = &acts[n_layers - 1];
            let (c, h, w) = last.dim();
            // Pool backward: distribute the feature gradient uniformly.
            let mut grad = Array3::<f32>::zeros((c, h, w));
            let denom = (h * w) as f32;
            for ci in 0..c {
                let gv = grad_feats[(idx, ci)] / denom;
                grad.index_axis_mut(Axis(0), ci).fill(gv);
            }
            for i in (0..n_layers).rev() {
                let out = &acts[i];
                let grad_pre = nn::relu_backward(out, &grad);
                let mut input = if i == 0 { image.clone() } else { acts[i - 1].clone() };
                if cfg.coord_channels {
                    input = with_coord_channels(&input);
                }
                let wname = format!("extractor.conv{i}.w");
                let k = cfg.kernels[i];
                let (d_in, d_w, d_b) = nn::conv2d_backward(
                    &input.view(),
                    &params.get2(&wname),
                    &grad_pre.view(),
                    k,
                    cfg.strides[i],
                    conv_pad(k),
                );
                g.add(&wname, d_w.into_dyn());
                g.add(&format!("extractor.conv{i}.b"), d_b.into_dyn());
                // Coordinate channels are constants: drop their gradient.
                let cin = d_in.dim().0 - if cfg.coord_channels { 2 } else { 0 };
                grad = d_in.slice(ndarray::s![..cin, .., ..]).to_owned();
            }
        }
        g
    });
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Graph layers.
// ---------------------------------------------------------------------------

/// In-neighborhoods of a batch, with self-loops added to every node. Edges
/// are `(aggregating node, neighbor)` in batch-local indices.
#[derive(Debug, Clone)]
pub struct BatchAdjacency {
    n: usize,
    /// Sorted by aggregating node; includes self-loops.
    edges: Vec<(usize, usize)>,
    /// Per node: contiguous range into `edges`.
    ranges: Vec<(usize, usize)>,
}

impl BatchAdjacency {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = std::collections::BTreeSet::new();
        for &(dst, src) in edges {
            if dst >= n || src >= n {
                return Err(Error::Model(format!(
                    "adjacency references node {} outside batch of {n}",
                    dst.max(src)
                )));
            }
            set.insert((dst, src));
        }
        for i in 0..n {
            set.insert((i, i));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut ranges = vec![(0usize, 0usize); n];
        let mut start = 0usize;
        for i in 0..n {
            let mut end = start;
            while end < edges.len() && edges[end].0 == i {
                end += 1;
            }
            ranges[i] = (start, end);
            start = end;
        }
        Ok(Self { n, edges, ranges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn in_degree(&self, node: usize) -> usize {
        let (s, e) = self.ranges[node];
        e - s
    }

}

enum LayerCache {
    Gcn {
        x: Array2<f32>,
        agg: Array2<f32>,
        out: Array2<f32>,
        activated: bool,
    },
    Gat {
        x: Array2<f32>,
        h: Array3<f32>,
        /// Pre-leaky attention logits per (edge, head).
        s_pre: Array2<f32>,
        alpha: Array2<f32>,
        out: Array2<f32>,
        activated: bool,
    },
    Gatv2 {
        x: Array2<f32>,
        h_l: Array3<f32>,
        h_r: Array3<f32>,
        /// Pre-leaky per-edge joint features `(edges, heads, head_dim)`.
        s_pre: Array3<f32>,
        alpha: Array2<f32>,
        out: Array2<f32>,
        activated: bool,
    },
}

/// Per-layer caches from a GNN forward pass; also exposes attention weights
/// for inspection.
pub struct GnnCache {
    layers: Vec<LayerCache>,
}

impl GnnCache {
    /// Sum of incoming attention weights per `(node, head)`; 1.0 rows for
    /// attention variants. `None` for GCN layers.
    pub fn attention_in_sums(&self, layer: usize, adj: &BatchAdjacency) -> Option<Array2<f32>> {
        let alpha = match &self.layers[layer] {
            LayerCache::Gat { alpha, .. } => alpha,
            LayerCache::Gatv2 { alpha, .. } => alpha,
            LayerCache::Gcn { .. } => return None,
        };
        let heads = alpha.dim().1;
        let mut sums = Array2::<f32>::zeros((adj.n(), heads));
        for (e, &(dst, _)) in adj.edges.iter().enumerate() {
            for t in 0..heads {
                sums[(dst, t)] += alpha[(e, t)];
            }
        }
        Some(sums)
    }
}

fn into_heads(h: Array2<f32>, heads: usize, head_dim: usize) -> Array3<f32> {
    let n = h.dim().0;
    h.into_shape_with_order((n, heads, head_dim)).expect("head reshape")
}

fn from_heads(h: &Array3<f32>) -> Array2<f32> {
    let (n, heads, head_dim) = h.dim();
    h.to_shape((n, heads * head_dim)).expect("flatten heads").to_owned()
}

const LEAKY_SLOPE: f32 = 0.2;

/// Multi-layer GNN forward over a batch. Returns `(embeddings, cache)`.
pub fn gnn_forward(
    features: &ArrayView2<f32>,
    adj: &BatchAdjacency,
    params: &Params,
    cfg: &GnnConfig,
) -> Result<(Array2<f32>, GnnCache)> {
    cfg.validate()?;
    if features.dim().0 != adj.n() {
        return Err(Error::Model(format!(
            "feature rows {} do not match batch size {}",
            features.dim().0,
            adj.n()
        )));
    }
    let mut x = features.to_owned();
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let last = l + 1 == cfg.layers;
        let cache = match cfg.variant {
            GnnVariant::Gcn => gcn_layer_forward(&x, adj, params, l, !last),
            GnnVariant::Gat => gat_layer_forward(&x, adj, params, cfg, l, !last),
            GnnVariant::Gatv2 => gatv2_layer_forward(&x, adj, params, cfg, l, !last),
        };
        x = match &cache {
            LayerCache::Gcn { out, .. } => out.clone(),
            LayerCache::Gat { out, .. } => out.clone(),
            LayerCache::Gatv2 { out, .. } => out.clone(),
        };
        layers.push(cache);
    }
    Ok((x, GnnCache { layers }))
}

fn gcn_layer_forward(
    x: &Array2<f32>,
    adj: &BatchAdjacency,
    params: &Params,
    layer: usize,
    activate: bool,
) -> LayerCache {
    let n = adj.n();
    let d = x.dim().1;
    // Symmetric normalization 1/sqrt(deg_i * deg_j), self-loops included.
    let inv_sqrt_deg: Vec<f32> =
        (0..n).map(|i| 1.0 / (adj.in_degree(i) as f32).sqrt()).collect();
    let mut agg = Array2::<f32>::zeros((n, d));
    for &(dst, src) in &adj.edges {
        let w = inv_sqrt_deg[dst] * inv_sqrt_deg[src];
        let src_row = x.row(src).to_owned();
        let mut dst_row = agg.row_mut(dst);
        dst_row.scaled_add(w, &src_row);
    }
    let w = params.get2(&format!("gnn.layer{layer}.w"));
    let b = params.get1(&format!("gnn.layer{layer}.b"));
    let mut out = nn::linear_forward(&agg.view(), &w, &b);
    if activate {
        out = nn::relu_forward(&out);
    }
    LayerCache::Gcn { x: x.clone(), agg, out, activated: activate }
}

/// Softmax of attention logits per (aggregating node, head).
fn edge_softmax(adj: &BatchAdjacency, logits: &Array2<f32>) -> Array2<f32> {
    let heads = logits.dim().1;
    let mut alpha = Array2::<f32>::zeros(logits.raw_dim());
    for i in 0..adj.n() {
        let (s, e) = adj.ranges[i];
        for t in 0..heads {
            let mut max = f32::NEG_INFINITY;
            for edge in s..e {
                max = max.max(logits[(edge, t)]);
            }
            let mut denom = 0.0f32;
            for edge in s..e {
                let v = (logits[(edge, t)] - max).exp();
                alpha[(edge, t)] = v;
                denom += v;
            }
            for edge in s..e {
                alpha[(edge, t)] /= denom;
            }
        }
    }
    alpha
}

fn gat_layer_forward(
    x: &Array2<f32>,
    adj: &BatchAdjacency,
    params: &Params,
    cfg: &GnnConfig,
    layer: usize,
    activate: bool,
) -> LayerCache {
    let heads = cfg.heads;
    let last = !activate;
    let head_dim = if last { cfg.hidden } else { cfg.hidden / heads };
    let w = params.get2(&format!("gnn.layer{layer}.w"));
    let a_src = params.get2(&format!("gnn.layer{layer}.a_src"));
    let a_dst = params.get2(&format!("gnn.layer{layer}.a_dst"));
    let h = into_heads(x.dot(&w.t()), heads, head_dim);
    let n_edges = adj.edges.len();

    // Static attention: leaky(a_dst . h_i + a_src . h_j).
    let mut proj_src = Array2::<f32>::zeros((adj.n(), heads));
    let mut proj_dst = Array2::<f32>::zeros((adj.n(), heads));
    for i in 0..adj.n() {
        for t in 0..heads {
            let mut ps = 0.0f32;
            let mut pd = 0.0f32;
            for d in 0..head_dim {
                ps += a_src[(t, d)] * h[(i, t, d)];
                pd += a_dst[(t, d)] * h[(i, t, d)];
            }
            proj_src[(i, t)] = ps;
            proj_dst[(i, t)] = pd;
        }
    }
    let mut s_pre = Array2::<f32>::zeros((n_edges, heads));
    let mut logits = Array2::<f32>::zeros((n_edges, heads));
    for (e, &(dst, src)) in adj.edges.iter().enumerate() {
        for t in 0..heads {
            let s = proj_dst[(dst, t)] + proj_src[(src, t)];
            s_pre[(e, t)] = s;
            logits[(e, t)] = nn::leaky_relu(s, LEAKY_SLOPE);
        }
    }
    let alpha = edge_softmax(adj, &logits);

    let mut agg = Array3::<f32>::zeros((adj.n(), heads, head_dim));
    for (e, &(dst, src)) in adj.edges.iter().enumerate() {
        for t in 0..heads {
            let a = alpha[(e, t)];
            for d in 0..head_dim {
                agg[(dst, t, d)] += a * h[(src, t, d)];
            }
        }
    }
    let out = finish_attention_layer(&agg, last, activate);
    LayerCache::Gat { x: x.clone(), h, s_pre, alpha, out, activated: activate }
}

fn gatv2_layer_forward(
    x: &Array2<f32>,
    adj: &BatchAdjacency,
    params: &Params,
    cfg: &GnnConfig,
    layer: usize,
    activate: bool,
) -> LayerCache {
    let heads = cfg.heads;
    let last = !activate;
    let head_dim = if last { cfg.hidden } else { cfg.hidden / heads };
    let w_l = params.get2(&format!("gnn.layer{layer}.w_l"));
    let w_r = params.get2(&format!("gnn.layer{layer}.w_r"));
    let a = params.get2(&format!("gnn.layer{layer}.a"));
    // h_l transforms message sources, h_r the aggregating node.
    let h_l = into_heads(x.dot(&w_l.t()), heads, head_dim);
    let h_r = into_heads(x.dot(&w_r.t()), heads, head_dim);
    let n_edges = adj.edges.len();

    // Dynamic attention: a . leaky(h_l[j] + h_r[i]).
    let mut s_pre = Array3::<f32>::zeros((n_edges, heads, head_dim));
    let mut logits = Array2::<f32>::zeros((n_edges, heads));
    for (e, &(dst, src)) in adj.edges.iter().enumerate() {
        for t in 0..heads {
            let mut logit = 0.0f32;
            for d in 0..head_dim {
                let s = h_l[(src, t, d)] + h_r[(dst, t, d)];
                s_pre[(e, t, d)] = s;
                logit += a[(t, d)] * nn::leaky_relu(s, LEAKY_SLOPE);
            }
            logits[(e, t)] = logit;
        }
    }
    let alpha = edge_softmax(adj, &logits);

    let mut agg = Array3::<f32>::zeros((adj.n(), heads, head_dim));
    for (e, &(dst, src)) in adj.edges.iter().enumerate() {
        for t in 0..heads {
            let av = alpha[(e, t)];
            for d in 0..head_dim {
                agg[(dst, t, d)] += av * h_l[(src, t, d)];
            }
        }
    }
    let out = finish_attention_layer(&agg, last, activate);
    LayerCache::Gatv2 { x: x.clone(), h_l, h_r, s_pre, alpha, out, activated: activate }
}

/// Concatenate heads on intermediate layers, average them on the last one.
fn finish_attention_layer(agg: &Array3<f32>, last: bool, activate: bool) -> Array2<f32> {
    let (n, heads, head_dim) = agg.dim();
    let mut out = if last {
        let mut o = Array2::<f32>::zeros((n, head_dim));
        for i in 0..n {
            for t in 0..heads {
                for d in 0..head_dim {
                    o[(i, d)] += agg[(i, t, d)];
                }
            }
        }
        o.mapv_inplace(|v| v / heads as f32);
        o
    } else {
        from_heads(agg)
    };
    if activate {
        out.mapv_inplace(nn::elu);
    }
    out
}

/// Backward pass of [`gnn_forward`]. Returns the gradient with respect to the
/// input features and accumulates parameter gradients.
pub fn gnn_backward(
    cache: &GnnCache,
    adj: &BatchAdjacency,
    params: &Params,
    cfg: &GnnConfig,
    grad_out: &Array2<f32>,
    grads: &mut Grads,
) -> Array2<f32> {
    let mut grad = grad_out.clone();
    for (l, layer) in cache.layers.iter().enumerate().rev() {
        grad = match layer {
            LayerCache::Gcn { x, agg, out, activated } => {
                gcn_layer_backward(x, agg, out, *activated, adj, params, l, &grad, grads)
            }
            LayerCache::Gat { x, h, s_pre, alpha, out, activated } => gat_layer_backward(
                x, h, s_pre, alpha, out, *activated, adj, params, cfg, l, &grad, grads,
            ),
            LayerCache::Gatv2 { x, h_l, h_r, s_pre, alpha, out, activated } => {
                gatv2_layer_backward(
                    x, h_l, h_r, s_pre, alpha, out, *activated, adj, params, cfg, l, &grad,
                    grads,
                )
            }
        };
    }
    grad
}

#[allow(clippy::too_many_arguments)]
fn gcn_layer_backward(
    x: &Array2<f32>,
    agg: &Array2<f32>,
    out: &Array2<f32>,
    activated: bool,
    adj: &BatchAdjacency,
    params: &Params,
    layer: usize,
    grad_out: &Array2<f32>,
    grads: &mut Grads,
) -> Array2<f32> {
    let g = if activated { nn::relu_backward(out, grad_out) } else { grad_out.clone() };
    let w = params.get2(&format!("gnn.layer{layer}.w"));
    let (d_agg, d_w, d_b) = nn::linear_backward(&agg.view(), &w, &g.view());
    grads.add(&format!("gnn.layer{layer}.w"), d_w.into_dyn());
    grads.add(&format!("gnn.layer{layer}.b"), d_b.into_dyn());
    let n = adj.n();
    let inv_sqrt_deg: Vec<f32> =
        (0..n).map(|i| 1.0 / (adj.in_degree(i) as f32).sqrt()).collect();
    let mut d_x = Array2::<f32>::zeros(x.raw_dim());
    for &(dst, src) in &adj.edges {
        let w_ij = inv_sqrt_deg[dst] * inv_sqrt_deg[src];
        let g_row = d_agg.row(dst).to_owned();
        d_x.row_mut(src).scaled_add(w_ij, &g_row);
    }
    d_x
}

/// Shared attention backward: distributes output gradients onto messages and
/// attention coefficients, then through the per-node softmax.
/// Returns `(d_message, d_logits)`.
fn attention_common_backward(
    adj: &BatchAdjacency,
    alpha: &Array2<f32>,
    messages: &Array3<f32>,
    out: &Array2<f32>,
    activated: bool,
    last: bool,
    grad_out: &Array2<f32>,
) -> (Array3<f32>, Array2<f32>) {
    let (n, heads, head_dim) = messages.dim();
    let n_edges = adj.edges.len();
    // Through the activation and the head concat/average.
    let g_post = if activated {
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g).and(out).for_each(|gv, &ov| {
            *gv *= nn::elu_grad_from_out(ov);
        });
        g
    } else {
        grad_out.clone()
    };
    let mut d_agg = Array3::<f32>::zeros((n, heads, head_dim));
    if last {
        let scale = 1.0 / heads as f32;
        for i in 0..n {
            for t in 0..heads {
                for d in 0..head_dim {
                    d_agg[(i, t, d)] = g_post[(i, d)] * scale;
                }
            }
        }
    } else {
        for i in 0..n {
            for t in 0..heads {
                for d in 0..head_dim {
                    d_agg[(i, t, d)] = g_post[(i, t * head_dim + d)];
                }
            }
        }
    }

    let mut d_msg = Array3::<f32>::zeros((n, heads, head_dim));
    let mut d_alpha = Array2::<f32>::zeros((n_edges, heads));
    for (e, &(dst, src)) in adj.edges.iter().enumerate() {
        for t in 0..heads {
            let a = alpha[(e, t)];
            let mut dot = 0.0f32;
            for d in 0..head_dim {
                d_msg[(src, t, d)] += a * d_agg[(dst, t, d)];
                dot += d_agg[(dst, t, d)] * messages[(src, t, d)];
            }
            d_alpha[(e, t)] = dot;
        }
    }
    // Softmax backward per (node, head).
    let mut d_logits = Array2::<f32>::zeros((n_edges, heads));
    for i in 0..n {
        let (s, e) = adj.ranges[i];
        for t in 0..heads {
            let mut weighted = 0.0f32;
            for edge in s..e {
                weighted += alpha[(edge, t)] * d_alpha[(edge, t)];
            }
            for edge in s..e {
                d_logits[(edge, t)] = alpha[(edge, t)] * (d_alpha[(edge, t)] - weighted);
            }
        }
    }
    (d_msg, d_logits)
}

#[allow(clippy::too_many_arguments)]
fn gat_layer_backward(
    x: &Array2<f32>,
    h: &Array3<f32>,
    s_pre: &Array2<f32>,
    alpha: &Array2<f32>,
    out: &Array2<f32>,
    activated: bool,
    adj: &BatchAdjacency,
    params: &Params,
    _cfg: &GnnConfig,
    layer: usize,
    grad_out: &Array2<f32>,
    grads: &mut Grads,
) -> Array2<f32> {
    let (_, heads, head_dim) = h.dim();
    let last = !activated;
    let a_src = params.get2(&format!("gnn.layer{layer}.a_src"));
    let a_dst = params.get2(&format!("gnn.layer{layer}.a_dst"));
    let (mut d_h, d_logits) =
        attention_common_backward(adj, alpha, h, out, activated, last, grad_out);

    let mut d_a_src = Array2::<f32>::zeros((heads, head_dim));
    let mut d_a_dst = Array2::<f32>::zeros((heads, head_dim));
    for (e, &(dst, src)) in adj.edges.iter().enumerate() {
        for t in 0..heads {
            let ds = d_logits[(e, t)] * nn::leaky_relu_grad(s_pre[(e, t)], LEAKY_SLOPE);
            if ds == 0.0 {
                continue;
            }
            for d in 0..head_dim {
                d_a_dst[(t, d)] += ds * h[(dst, t, d)];
                d_a_src[(t, d)] += ds * h[(src, t, d)];
                d_h[(dst, t, d)] += ds * a_dst[(t, d)];
                d_h[(src, t, d)] += ds * a_src[(t, d)];
            }
        }
    }
    grads.add(&format!("gnn.layer{layer}.a_src"), d_a_src.into_dyn());
    grads.add(&format!("gnn.layer{layer}.a_dst"), d_a_dst.into_dyn());

    let w = params.get2(&format!("gnn.layer{layer}.w"));
    let d_h2 = from_heads(&d_h);
    let d_w = d_h2.t().dot(x);
    grads.add(&format!("gnn.layer{layer}.w"), d_w.into_dyn());
    d_h2.dot(&w)
}

#[allow(clippy::too_many_arguments)]
fn gatv2_layer_backward(
    x: &Array2<f32>,
    h_l: &Array3<f32>,
    h_r: &Array3<f32>,
    s_pre: &Array3<f32>,
    alpha: &Array2<f32>,
    out: &Array2<f32>,
    activated: bool,
    adj: &BatchAdjacency,
    params: &Params,
    _cfg: &GnnConfig,
    layer: usize,
    grad_out: &Array2<f32>,
    grads: &mut Grads,
) -> Array2<f32> {
    let (_, heads, head_dim) = h_l.dim();
    let last = !activated;
    let a = params.get2(&format!("gnn.layer{layer}.a"));
    let (mut d_h_l, d_logits) =
        attention_common_backward(adj, alpha, h_l, out, activated, last, grad_out);
    let mut d_h_r = Array3::<f32>::zeros(h_r.raw_dim());
    let mut d_a = Array2::<f32>::zeros((heads, head_dim));
    for (e, &(dst, src)) in adj.edges.iter().enumerate() {
        for t in 0..heads {
            let dl = d_logits[(e, t)];
            if dl == 0.0 {
                continue;
            }
            for d in 0..head_dim {
                let s = s_pre[(e, t, d)];
                let leaky = nn::leaky_relu(s, LEAKY_SLOPE);
                d_a[(t, d)] += dl * leaky;
                let ds = dl * a[(t, d)] * nn::leaky_relu_grad(s, LEAKY_SLOPE);
                d_h_l[(src, t, d)] += ds;
                d_h_r[(dst, t, d)] += ds;
            }
        }
    }
    grads.add(&format!("gnn.layer{layer}.a"), d_a.into_dyn());

    let w_l = params.get2(&format!("gnn.layer{layer}.w_l"));
    let w_r = params.get2(&format!("gnn.layer{layer}.w_r"));
    let d_h_l2 = from_heads(&d_h_l);
    let d_h_r2 = from_heads(&d_h_r);
    grads.add(&format!("gnn.layer{layer}.w_l"), d_h_l2.t().dot(x).into_dyn());
    grads.add(&format!("gnn.layer{layer}.w_r"), d_h_r2.t().dot(x).into_dyn());
    d_h_l2.dot(&w_l) + d_h_r2.dot(&w_r)
}

// ---------------------------------------------------------------------------
// Link scoring and top-k selection.
// ---------------------------------------------------------------------------

/// Logistic of the embedding dot product for each `(src, dst)` pair of
/// batch-local indices. Scores are strictly inside (0, 1).
pub fn score_links(embeddings: &ArrayView2<f32>, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let n = embeddings.dim().0;
    pairs
        .iter()
        .map(|&(s, d)| {
            if s >= n || d >= n {
                return Err(Error::Model(format!("link ({s},{d}) outside batch of {n}")));
            }
            let z: f64 = embeddings
                .row(s)
                .iter()
                .zip(embeddings.row(d).iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            Ok(nn::sigmoid(z))
        })
        .collect()
}

/// Accumulate `dL/d embeddings` given `dL/dz` per link (`z` = pre-sigmoid
/// logit).
pub fn score_links_backward(
    embeddings: &ArrayView2<f32>,
    pairs: &[(usize, usize)],
    grad_logits: &[f64],
) -> Array2<f32> {
    let mut grad = Array2::<f32>::zeros(embeddings.raw_dim());
    for (&(s, d), &gz) in pairs.iter().zip(grad_logits) {
        let gz = gz as f32;
        let src_row = embeddings.row(s).to_owned();
        let dst_row = embeddings.row(d).to_owned();
        grad.row_mut(s).scaled_add(gz, &dst_row);
        grad.row_mut(d).scaled_add(gz, &src_row);
    }
    grad
}

/// Order candidates by descending score with ties broken by ascending key;
/// pad by repeating the last entry up to `k`. Returns the ordered keys and
/// the anchor (top entry).
pub fn select_topk<K: Ord + Clone>(scored: &[(K, f64)], k: usize) -> Result<(Vec<K>, K)> {
    if scored.is_empty() {
        return Err(Error::Model("empty candidate set for top-k selection".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .1
            .total_cmp(&scored[a].1)
            .then_with(|| scored[a].0.cmp(&scored[b].0))
    });
    let mut ids: Vec<K> = order.iter().take(k).map(|&i| scored[i].0.clone()).collect();
    while ids.len() < k {
        ids.push(ids.last().expect("nonempty").clone());
    }
    let anchor = ids[0].clone();
    Ok((ids, anchor))
}

// ---------------------------------------------------------------------------
// Homography-regression head.
// ---------------------------------------------------------------------------

pub struct StnCache {
    /// Activations per layer: input row, then each hidden output (post-tanh).
    acts: Vec<Array2<f32>>,
    raw: [f32; 8],
}

/// Regress the residual homography from the stacked embedding matrix
/// (`input_rows x d`, row 0 = seed when configured). Eight offsets scaled by
/// `offset_scales` are added onto the flattened identity; `h33` stays 1.
pub fn stn_forward(
    embedding_matrix: &ArrayView2<f32>,
    params: &Params,
    cfg: &StnConfig,
) -> Result<(Homography, StnCache)> {
    cfg.validate()?;
    let (rows, _d) = embedding_matrix.dim();
    if rows != cfg.input_rows() {
        return Err(Error::Model(format!(
            "stn expects {} embedding rows, got {rows}",
            cfg.input_rows()
        )));
    }
    let flat: Vec<f32> = embedding_matrix.iter().copied().collect();
    let mut x = Array2::from_shape_vec((1, flat.len()), flat).expect("flatten");
    let mut acts = vec![x.clone()];
    for i in 0..cfg.hidden.len() {
        let w = params.get2(&format!("stn.fc{i}.w"));
        let b = params.get1(&format!("stn.fc{i}.b"));
        x = nn::linear_forward(&x.view(), &w, &b);
        x.mapv_inplace(|v| v.tanh());
        acts.push(x.clone());
    }
    let w = params.get2("stn.out.w");
    let b = params.get1("stn.out.b");
    let raw2 = nn::linear_forward(&x.view(), &w, &b);
    let mut raw = [0.0f32; 8];
    for i in 0..8 {
        raw[i] = raw2[(0, i)];
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("stn produced non-finite offsets".into()));
    }

    let mut m = [0.0f64; 9];
    m[8] = 1.0;
    m[0] = 1.0 + raw[0] as f64 * cfg.offset_scales[0];
    m[1] = raw[1] as f64 * cfg.offset_scales[1];
    m[2] = raw[2] as f64 * cfg.offset_scales[2];
    m[3] = raw[3] as f64 * cfg.offset_scales[3];
    m[4] = 1.0 + raw[4] as f64 * cfg.offset_scales[4];
    m[5] = raw[5] as f64 * cfg.offset_scales[5];
    m[6] = raw[6] as f64 * cfg.offset_scales[6];
    m[7] = raw[7] as f64 * cfg.offset_scales[7];
    let h = Homography::from_row_major(m)?;
    Ok((h, StnCache { acts, raw }))
}

/// Backward pass of [`stn_forward`]: takes `dL/d offsets` (the eight free
/// entries of the residual homography) and returns the gradient with respect
/// to the embedding matrix.
pub fn stn_backward(
    cache: &StnCache,
    params: &Params,
    cfg: &StnConfig,
    grad_h: &[f64; 8],
    grads: &mut Grads,
) -> Array2<f32> {
    let _ = cache.raw;
    let mut g = Array2::<f32>::zeros((1, 8));
    for i in 0..8 {
        g[(0, i)] = (grad_h[i] * cfg.offset_scales[i]) as f32;
    }
    let x_last = cache.acts.last().expect("stn acts");
    let w_out = params.get2("stn.out.w");
    let (mut gx, d_w, d_b) = nn::linear_backward(&x_last.view(), &w_out, &g.view());
    grads.add("stn.out.w", d_w.into_dyn());
    grads.add("stn.out.b", d_b.into_dyn());

    for i in (0..cfg.hidden.len()).rev() {
        // tanh backward through the stored post-activation.
        let post = &cache.acts[i + 1];
        ndarray::Zip::from(&mut gx).and(post).for_each(|gv, &ov| {
            *gv *= 1.0 - ov * ov;
        });
        let w = params.get2(&format!("stn.fc{i}.w"));
        let (gx_new, d_w, d_b) = nn::linear_backward(&cache.acts[i].view(), &w, &gx.view());
        grads.add(&format!("stn.fc{i}.w"), d_w.into_dyn());
        grads.add(&format!("stn.fc{i}.b"), d_b.into_dyn());
        gx = gx_new;
    }
    let d = cfg.input_rows();
    let width = gx.len() / d;
    Array2::from_shape_vec((d, width), gx.into_iter().collect()).expect("unflatten")
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CALGRAPH";

/// A parameter checkpoint: model config snapshot, named tensors (parameters
/// plus optimizer state), and caller-defined JSON state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub seed: u64,
    pub tensors: Params,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    seed: u64,
    tensors: Vec<TensorIndexEntry>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    shape: Vec<usize>,
}

/// Single-file container: magic, version, JSON header, then raw
/// little-endian f32 payloads in header order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let index: Vec<TensorIndexEntry> = ckpt
        .tensors
        .iter()
        .map(|(name, t)| TensorIndexEntry { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: ckpt.model.clone(),
        seed: ckpt.seed,
        tensors: index,
        extra: ckpt.extra.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    for (_, tensor) in ckpt.tensors.iter() {
        let contiguous = tensor.as_standard_layout();
        for v in contiguous.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} does not match supported version {CHECKPOINT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} does not match supported version {CHECKPOINT_VERSION}",
            header.version
        )));
    }
    let mut tensors = Params::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated payload for {}", entry.name)))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?;
        tensors.insert(&entry.name, arr);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { model: header.model, seed: header.seed, tensors, extra: header.extra })
}

/// Split a full tensor map into model parameters and optimizer tensors.
pub fn partition_tensors(all: Params) -> (Params, BTreeMap<String, ndarray::ArrayD<f32>>) {
    let mut params = Params::new();
    let mut opt = BTreeMap::new();
    for (name, tensor) in all.iter() {
        if name.starts_with("adam.") {
            opt.insert(name.clone(), tensor.clone());
        } else {
            params.insert(name, tensor.clone());
        }
    }
    (params, opt)
}
