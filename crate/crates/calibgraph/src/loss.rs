//! Losses and evaluation metrics: link-prediction cross-entropy, the
//! patch-based topological MSE, and semantic-mask IoU.
//!
//! The topological MSE partitions both grids into `patches_per_side ×
//! patches_per_side` patches. Each patch contributes its own MSE plus a
//! hinge-thresholded penalty over its 3×3 patch neighborhood (center
//! included; out-of-range neighbors skipped):
//!
//! ```text
//! L_patch(i,j) = MSE(i,j) + alpha * Σ_{k,l in {-1,0,1}} max(0, MSE(i+k, j+l) - beta)
//! L            = (1/N) * Σ_{i,j} L_patch(i,j),   N = patches_per_side²
//! ```
//!
//! The same quantity doubles as the topological similarity score used to
//! build the template graph (lower = more similar).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ClassId, ClassPalette};

/// Configuration for the topological MSE and the link BCE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Neighbor-penalty weight (alpha >= 0).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Hinge slack threshold (beta >= 0).
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Patches per image side; must divide both image sides.
    #[serde(default = "default_patches")]
    pub patches_per_side: usize,
    /// Probability clamp for the BCE.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.01
}
fn default_patches() -> usize {
    8
}
fn default_epsilon() -> f64 {
    1e-7
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            patches_per_side: default_patches(),
            epsilon: default_epsilon(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidInput(format!(
                "alpha and beta must be nonnegative, got {} / {}",
                self.alpha, self.beta
            )));
        }
        if self.patches_per_side < 1 {
            return Err(Error::InvalidInput("patches_per_side must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be in (0, 1e-3), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// A short stable digest of the loss parameters, used for cache keys.
    pub fn digest(&self) -> u64 {
        let mut h = crate::config::Fnv1a::new();
        h.write(&self.alpha.to_le_bytes());
        h.write(&self.beta.to_le_bytes());
        h.write(&(self.patches_per_side as u64).to_le_bytes());
        h.write(&self.epsilon.to_le_bytes());
        h.finish()
    }
}

/// Binary cross-entropy summed over candidate links:
/// `-Σ (y ln p + (1-y) ln(1-p))` with `p` clamped to `[eps, 1-eps]`.
pub fn bce_link_loss(p: &[f64], y: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "probability/label length mismatch: {} vs {}",
            p.len(),
            y.len()
        )));
    }
    // Kahan summation keeps the large-N case exact to a few ulps.
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.clamp(epsilon, 1.0 - epsilon);
        let term = -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln());
        let y_c = term - comp;
        let t = sum + y_c;
        comp = (t - sum) - y_c;
        sum = t;
    }
    Ok(sum)
}

fn patch_grid_dims(shape: (usize, usize, usize), n: usize) -> Result<(usize, usize)> {
    let (_, h, w) = shape;
    if h % n != 0 || w % n != 0 {
        return Err(Error::InvalidInput(format!(
            "patch grid {n}x{n} does not divide image {w}x{h}"
        )));
    }
    Ok((h / n, w / n))
}

/// Per-patch mean squared error table for a channel-grid pair.
fn patch_mse_table(pred: &ArrayView3<f64>, target: &ArrayView3<f64>, n: usize) -> Array2<f64> {
    let (c, h, w) = pred.dim();
    let (ph, pw) = (h / n, w / n);
    let denom = (c * ph * pw) as f64;
    let mut table = Array2::<f64>::zeros((n, n));
    for ch in 0..c {
        for y in 0..h {
            let i = y / ph;
            for x in 0..w {
                let d = pred[(ch, y, x)] - target[(ch, y, x)];
                table[(i, x / pw)] += d * d;
            }
        }
    }
    table.mapv_inplace(|v| v / denom);
    table
}

/// Per-patch MSE table computed directly from label grids, exploiting that
/// one-hot vectors differ in exactly two channels: `MSE = 2 * #diff / (C*P)`.
fn patch_mse_table_labels(
    a: &ArrayView2<ClassId>,
    b: &ArrayView2<ClassId>,
    num_classes: usize,
    n: usize,
) -> Array2<f64> {
    let (h, w) = a.dim();
    let (ph, pw) = (h / n, w / n);
    let denom = (num_classes * ph * pw) as f64;
    let mut counts = Array2::<u32>::zeros((n, n));
    for y in 0..h {
        let i = y / ph;
        let row_a = a.row(y);
        let row_b = b.row(y);
        for x in 0..w {
            if row_a[x] != row_b[x] {
                counts[(i, x / pw)] += 1;
            }
        }
    }
    Array2::from_shape_fn((n, n), |(i, j)| 2.0 * counts[(i, j)] as f64 / denom)
}

fn combine_patch_table(table: &Array2<f64>, cfg: &LossConfig) -> f64 {
    let n = cfg.patches_per_side;
    let mut total = 0.0;
    for i in 0..n as isize {
        for j in 0..n as isize {
            let mut patch = table[(i as usize, j as usize)];
            for k in -1..=1isize {
                for l in -1..=1isize {
                    let (ni, nj) = (i + k, j + l);
                    if ni < 0 || nj < 0 || ni >= n as isize || nj >= n as isize {
                        continue;
                    }
                    let m = table[(ni as usize, nj as usize)];
                    patch += cfg.alpha * (m - cfg.beta).max(0.0);
                }
            }
            total += patch;
        }
    }
    total / (n * n) as f64
}

/// Topological MSE between two channel grids of shape `(C, H, W)`.
pub fn topological_mse(
    pred: &ArrayView3<f64>,
    target: &ArrayView3<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    if pred.dim() != target.dim() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    patch_grid_dims(pred.dim(), cfg.patches_per_side)?;
    let table = patch_mse_table(pred, target, cfg.patches_per_side);
    Ok(combine_patch_table(&table, cfg))
}

/// Topological MSE computed from label grids; equal to
/// `topological_mse(onehot(a), onehot(b))`.
pub fn topological_mse_labels(
    a: &ArrayView2<ClassId>,
    b: &ArrayView2<ClassId>,
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    patch_grid_dims((num_classes, a.dim().0, a.dim().1), cfg.patches_per_side)?;
    let table = patch_mse_table_labels(a, b, num_classes, cfg.patches_per_side);
    Ok(combine_patch_table(&table, cfg))
}

/// Topological MSE plus its gradient with respect to `pred`.
///
/// Every patch MSE `m(i,j)` enters the loss once directly and once per
/// in-range 3×3 window it belongs to, hinge-gated by `m > beta`; the factor
/// distributes onto `2 (pred - target) / (C * patch_area)` over the patch.
pub fn topological_mse_with_grad(
    pred: &ArrayView3<f64>,
    target: &ArrayView3<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array3<f64>)> {
    cfg.validate()?;
    if pred.dim() != target.dim() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = cfg.patches_per_side;
    let (ph, pw) = patch_grid_dims(pred.dim(), n)?;
    let (c, h, w) = pred.dim();
    let table = patch_mse_table(pred, target, n);
    let loss = combine_patch_table(&table, cfg);

    // Coefficient on each patch MSE: 1 for its own term, plus alpha per
    // in-range window containing it when the hinge is active.
    let n_f = (n * n) as f64;
    let mut coeff = Array2::<f64>::zeros((n, n));
    for i in 0..n as isize {
        for j in 0..n as isize {
            let mut windows = 0.0;
            for k in -1..=1isize {
                for l in -1..=1isize {
                    let (ci, cj) = (i + k, j + l);
                    if ci >= 0 && cj >= 0 && ci < n as isize && cj < n as isize {
                        windows += 1.0;
                    }
                }
            }
            let active = table[(i as usize, j as usize)] > cfg.beta;
            let gate = if active { cfg.alpha * windows } else { 0.0 };
            coeff[(i as usize, j as usize)] = (1.0 + gate) / n_f;
        }
    }

    let denom = (c * ph * pw) as f64;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            let i = y / ph;
            for x in 0..w {
                let d = pred[(ch, y, x)] - target[(ch, y, x)];
                grad[(ch, y, x)] = coeff[(i, x / pw)] * 2.0 * d / denom;
            }
        }
    }
    Ok((loss, grad))
}

/// Macro-averaged intersection-over-union over the foreground classes present
/// in either grid. Returns 1.0 when neither grid contains foreground.
pub fn iou(pred: &ArrayView2<ClassId>, gt: &ArrayView2<ClassId>, palette: &ClassPalette) -> Result<f64> {
    iou_impl(pred, gt, palette, None)
}

/// [`iou`] restricted to pixels where `mask` is true.
pub fn iou_masked(
    pred: &ArrayView2<ClassId>,
    gt: &ArrayView2<ClassId>,
    palette: &ClassPalette,
    mask: &ArrayView2<bool>,
) -> Result<f64> {
    iou_impl(pred, gt, palette, Some(mask))
}

fn iou_impl(
    pred: &ArrayView2<ClassId>,
    gt: &ArrayView2<ClassId>,
    palette: &ClassPalette,
    mask: Option<&ArrayView2<bool>>,
) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if let Some(m) = mask {
        if m.dim() != pred.dim() {
            return Err(Error::InvalidInput("mask shape mismatch".into()));
        }
    }
    let ncls = palette.len();
    let mut inter = vec![0u64; ncls];
    let mut union = vec![0u64; ncls];
    for ((y, x), &p) in pred.indexed_iter() {
        if let Some(m) = mask {
            if !m[(y, x)] {
                continue;
            }
        }
        let g = gt[(y, x)];
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let bg = palette.background_id() as usize;
    let mut total = 0.0;
    let mut count = 0usize;
    for cls in 0..ncls {
        if cls == bg || union[cls] == 0 {
            continue;
        }
        total += inter[cls] as f64 / union[cls] as f64;
        count += 1;
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok(total / count as f64)
}

/// Area-under-ROC for binary labels via the rank statistic (average ranks on
/// score ties).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Average rank of the tie group (1-based ranks).
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &id in &idx[i..=j] {
            if labels[id] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos as f64 * (pos as f64 + 1.0)) / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn bce_at_half_is_n_ln2() {
        for n in [1usize, 10, 1000] {
            let p = vec![0.5; n];
            let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
            let loss = bce_link_loss(&p, &y, 1e-7).unwrap();
            assert!(
                (loss - n as f64 * std::f64::consts::LN_2).abs() < 1e-12,
                "n={n}: {loss}"
            );
        }
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let y = vec![1.0, 0.0, 1.0, 1.0];
        let loss = bce_link_loss(&y, &y, 1e-7).unwrap();
        assert!(loss <= 4.0 * -(1.0f64 - 1e-7).ln() + 1e-15);
        assert!(loss >= 0.0);
    }

    #[test]
    fn bce_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..100).map(|_| rng.gen_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..100).map(|_| (rng.gen_range(0..2)) as f64).collect();
        let loss = bce_link_loss(&p, &y, 1e-7).unwrap();
        let oracle: f64 = p
            .iter()
            .zip(&y)
            .map(|(&pi, &yi)| -(yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln()))
            .sum();
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_length_mismatch() {
        assert!(bce_link_loss(&[0.5], &[1.0, 0.0], 1e-7).is_err());
    }

    #[test]
    fn topo_mse_vanishes_on_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((4, 16, 16), |_| rng.gen_range(0.0..1.0));
        let v = topological_mse(&x.view(), &x.view(), &cfg()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn topo_mse_alpha_zero_equals_global_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array3::from_shape_fn((4, 16, 16), |_| rng.gen_range(0.0..1.0));
        let b = Array3::from_shape_fn((4, 16, 16), |_| rng.gen_range(0.0..1.0));
        let c = LossConfig { alpha: 0.0, ..cfg() };
        let v = topological_mse(&a.view(), &b.view(), &c).unwrap();
        let mse: f64 =
            a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        assert!((v - mse).abs() < 1e-12, "{v} vs {mse}");
    }

    #[test]
    fn topo_mse_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array3::from_shape_fn((4, 32, 32), |_| rng.gen_range(0.0..1.0));
        let b = Array3::from_shape_fn((4, 32, 32), |_| rng.gen_range(0.0..1.0));
        let mut last = -1.0;
        for alpha in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let c = LossConfig { alpha, ..cfg() };
            let v = topological_mse(&a.view(), &b.view(), &c).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn topo_mse_label_path_matches_channel_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0..4u8));
        let b = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0..4u8));
        let oa = crate::scene::encode_onehot(&a.view(), 4);
        let ob = crate::scene::encode_onehot(&b.view(), 4);
        let via_labels = topological_mse_labels(&a.view(), &b.view(), 4, &cfg()).unwrap();
        let via_channels = topological_mse(&oa.view(), &ob.view(), &cfg()).unwrap();
        assert!((via_labels - via_channels).abs() < 1e-12);
    }

    #[test]
    fn topo_mse_rejects_indivisible_patches() {
        let a = Array3::<f64>::zeros((2, 10, 10));
        let c = LossConfig { patches_per_side: 3, ..cfg() };
        assert!(topological_mse(&a.view(), &a.view(), &c).is_err());
    }

    #[test]
    fn topo_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut a = Array3::from_shape_fn((4, 16, 16), |_| rng.gen_range(0.0..1.0));
        let b = Array3::from_shape_fn((4, 16, 16), |_| rng.gen_range(0.0..1.0));
        let c = cfg();
        let (_, grad) = topological_mse_with_grad(&a.view(), &b.view(), &c).unwrap();
        let step = 1e-4;
        let mut max_rel = 0.0f64;
        for &(ch, y, x) in &[(0usize, 0usize, 0usize), (1, 5, 7), (3, 15, 15), (2, 8, 3)] {
            let orig = a[(ch, y, x)];
            a[(ch, y, x)] = orig + step;
            let up = topological_mse(&a.view(), &b.view(), &c).unwrap();
            a[(ch, y, x)] = orig - step;
            let down = topological_mse(&a.view(), &b.view(), &c).unwrap();
            a[(ch, y, x)] = orig;
            let fd = (up - down) / (2.0 * step);
            let g = grad[(ch, y, x)];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-3, "max rel err {max_rel}");
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let palette = ClassPalette::intersection_default();
        let a = array![[1u8, 1], [2, 0]];
        assert_eq!(iou(&a.view(), &a.view(), &palette).unwrap(), 1.0);
        let b = array![[0u8, 0], [0, 1]];
        let c = array![[1u8, 0], [0, 0]];
        assert_eq!(iou(&b.view(), &c.view(), &palette).unwrap(), 0.0);
    }

    #[test]
    fn iou_hand_counted_case() {
        let palette = ClassPalette::intersection_default();
        // Class 1: gt at columns 0..3 of row 0, pred at columns 1..4.
        // Intersection 2, union 4 -> 0.5; only class present -> IoU 0.5.
        let gt = array![[1u8, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]];
        let pred = array![[0u8, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]];
        assert_eq!(iou(&pred.view(), &gt.view(), &palette).unwrap(), 0.5);
    }

    #[test]
    fn iou_is_symmetric() {
        let palette = ClassPalette::intersection_default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Array2::from_shape_fn((12, 12), |_| rng.gen_range(0..4u8));
        let b = Array2::from_shape_fn((12, 12), |_| rng.gen_range(0..4u8));
        let ab = iou(&a.view(), &b.view(), &palette).unwrap();
        let ba = iou(&b.view(), &a.view(), &palette).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn auc_orders_scores() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(roc_auc(&scores, &labels), Some(1.0));
        let labels_rev = [false, false, true, true];
        assert_eq!(roc_auc(&scores, &labels_rev), Some(0.0));
        let mixed = [true, false, true, false];
        let auc = roc_auc(&scores, &mixed).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_handles_ties_with_average_rank() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, false];
        assert_eq!(roc_auc(&scores, &labels), Some(0.5));
    }
}
