//! Ground-plane homographies and camera geometry.
//!
//! Coordinate conventions, used everywhere in the crate:
//!
//! * BEV pixel `(u, v)` = (column, row), with the pixel center at integer
//!   coordinates. The world frame extends the BEV raster axes: world
//!   `x = u * s`, `y = v * s` (meters, `s` = meters per pixel), and the
//!   right-handed `z` axis points *into* the ground. A camera hovering above
//!   the scene therefore has a center with negative world `z`; its height
//!   above the plane is `-center.z`.
//! * A [`Homography`] maps BEV pixels to view pixels and is stored normalized
//!   with the bottom-right entry equal to 1.
//! * Warping is inverse-mapping: every output pixel samples the input at
//!   `H⁻¹ · (x, y, 1)`. Labels use nearest-neighbor lookup, channel grids use
//!   bilinear interpolation (differentiable in both the input and the eight
//!   free entries of `H`).

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ClassId;

const NORMALIZE_EPS: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

/// Pinhole intrinsics with square pixels and no skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub principal_point: (f64, f64),
    pub image_size: (u32, u32),
}

impl Intrinsics {
    pub fn new(focal: f64, principal_point: (f64, f64), image_size: (u32, u32)) -> Result<Self> {
        if !(focal > 0.0) {
            return Err(Error::Geometry(format!("focal length must be positive, got {focal}")));
        }
        let (cx, cy) = principal_point;
        let (w, h) = image_size;
        if !(0.0..=w as f64).contains(&cx) || !(0.0..=h as f64).contains(&cy) {
            return Err(Error::Geometry(format!(
                "principal point ({cx},{cy}) outside image bounds {w}x{h}"
            )));
        }
        Ok(Self { focal, principal_point, image_size })
    }

    /// Centered principal point.
    pub fn centered(focal: f64, image_size: (u32, u32)) -> Result<Self> {
        let (w, h) = image_size;
        Self::new(focal, (w as f64 / 2.0, h as f64 / 2.0), image_size)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (cx, cy) = self.principal_point;
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    /// Validates orthonormality, `det = +1`, and that the camera center lies
    /// strictly above the ground plane.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let e = Self { rotation, translation };
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(Error::Geometry(format!(
                "rotation is not orthonormal (residual {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!("rotation determinant {det} is not +1")));
        }
        if e.height_above_plane() <= 0.0 {
            return Err(Error::Geometry(format!(
                "camera center must be strictly above the ground plane (height {})",
                e.height_above_plane()
            )));
        }
        Ok(e)
    }

    /// No validation; for internal use and deliberately degenerate tests.
    pub fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Camera center in world coordinates: `C = -Rᵀ t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Height above the ground plane (positive above; world z points down).
    pub fn height_above_plane(&self) -> f64 {
        -self.camera_center().z
    }

    pub fn to_arrays(&self) -> ([[f64; 3]; 3], [f64; 3]) {
        let r = &self.rotation;
        (
            [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            [self.translation.x, self.translation.y, self.translation.z],
        )
    }

    pub fn from_arrays(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        Self { rotation: r, translation: Vector3::new(translation[0], translation[1], translation[2]) }
    }
}

/// Build a camera pose from viewpoint parameters.
///
/// `position` is the world (x, y) of the camera in meters, `height` its
/// elevation above the plane, `pan` the azimuth of the optical axis, and
/// `tilt_down` the depression angle below horizontal (`π/2` = straight down).
/// `roll` rotates the image about the optical axis.
pub fn camera_pose(
    position: (f64, f64),
    height: f64,
    pan: f64,
    tilt_down: f64,
    roll: f64,
) -> Result<Extrinsics> {
    if !(height > 0.0) {
        return Err(Error::Geometry(format!("camera height must be positive, got {height}")));
    }
    if !(0.0 < tilt_down && tilt_down <= std::f64::consts::FRAC_PI_2) {
        return Err(Error::Geometry(format!(
            "tilt must be in (0, pi/2], got {tilt_down}"
        )));
    }
    // Optical axis in world coordinates (z points into the ground, so a
    // positive z component looks downward).
    let axis = Vector3::new(
        pan.cos() * tilt_down.cos(),
        pan.sin() * tilt_down.cos(),
        tilt_down.sin(),
    );
    let mut x_cam = Vector3::new(-pan.sin(), pan.cos(), 0.0);
    let mut y_cam = axis.cross(&x_cam);
    if roll != 0.0 {
        let (s, c) = roll.sin_cos();
        let xr = x_cam * c + y_cam * s;
        let yr = -x_cam * s + y_cam * c;
        x_cam = xr;
        y_cam = yr;
    }
    let rotation = Matrix3::from_rows(&[x_cam.transpose(), y_cam.transpose(), axis.transpose()]);
    let center = Vector3::new(position.0, position.1, -height);
    let translation = -rotation * center;
    Extrinsics::new(rotation, translation)
}

/// Normalized 3x3 projective map between the BEV plane and the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Normalize so that the bottom-right entry is exactly 1 and check
    /// invertibility.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let scale = m.abs().max();
        let h22 = m[(2, 2)];
        if !h22.is_finite() || h22.abs() < NORMALIZE_EPS * scale.max(1.0) {
            return Err(Error::Geometry(format!(
                "cannot normalize homography: bottom-right entry {h22:.3e} is near zero"
            )));
        }
        let mut n = m / h22;
        n[(2, 2)] = 1.0;
        let det = n.determinant();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::Geometry(format!(
                "homography is singular (det {det:.3e})"
            )));
        }
        Ok(Self { m: n })
    }

    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major 9-element form with `h33 = 1` (the serialized layout).
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]))
    }

    /// Apply to a point: projective transform of `(x, y)`.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.m * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Homography::from_row_major(v).map_err(serde::de::Error::custom)
    }
}

/// Homography of a plane camera: maps BEV pixel coordinates to view pixel
/// coordinates, `H = K [r1 r2 t] diag(s, s, 1)`.
pub fn homography_from_plane_camera(
    k: &Intrinsics,
    e: &Extrinsics,
    meters_per_pixel: f64,
) -> Result<Homography> {
    if !(meters_per_pixel > 0.0) {
        return Err(Error::Geometry(format!(
            "meters_per_pixel must be positive, got {meters_per_pixel}"
        )));
    }
    let r = &e.rotation;
    let rt = Matrix3::from_columns(&[r.column(0).into(), r.column(1).into(), e.translation]);
    let mut m = k.matrix() * rt;
    // Fold the BEV pixel-to-meter scaling into the first two columns.
    for i in 0..3 {
        m[(i, 0)] *= meters_per_pixel;
        m[(i, 1)] *= meters_per_pixel;
    }
    if m[(2, 2)].abs() < NORMALIZE_EPS {
        return Err(Error::Geometry(
            "camera lies in the ground plane; view-plane homography is singular".into(),
        ));
    }
    Homography::new(m)
}

/// Normalized matrix product `A * B`.
pub fn compose(a: &Homography, b: &Homography) -> Result<Homography> {
    Homography::new(a.m * b.m)
}

/// Normalized inverse. Errors when the condition number exceeds `1e12`.
pub fn invert(h: &Homography) -> Result<Homography> {
    let svd = h.m.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > MAX_CONDITION {
        return Err(Error::Geometry(format!(
            "homography too ill-conditioned to invert (cond {:.3e})",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    let inv = h
        .m
        .try_inverse()
        .ok_or_else(|| Error::Geometry("homography is not invertible".into()))?;
    Homography::new(inv)
}

/// Nearest-neighbor warp of a label grid. Out-of-bounds samples become
/// `background`.
pub fn warp_labels(
    labels: &ArrayView2<ClassId>,
    h: &Homography,
    out_size: (usize, usize),
    background: ClassId,
) -> Result<Array2<ClassId>> {
    let g = invert(h)?;
    let (in_h, in_w) = labels.dim();
    let (out_w, out_h) = out_size;
    let mut out = Array2::<ClassId>::from_elem((out_h, out_w), background);
    for y in 0..out_h {
        for x in 0..out_w {
            let (u, v) = g.apply(x as f64, y as f64);
            let iu = u.round();
            let iv = v.round();
            if iu >= 0.0 && iv >= 0.0 && (iu as usize) < in_w && (iv as usize) < in_h {
                out[(y, x)] = labels[(iv as usize, iu as usize)];
            }
        }
    }
    Ok(out)
}

/// Bilinear warp of a channel grid (shape `(C, H, W)`). Out-of-bounds samples
/// yield the one-hot background vector (1 in `background_channel`).
pub fn warp_channels(
    channels: &ArrayView3<f64>,
    h: &Homography,
    out_size: (usize, usize),
    background_channel: usize,
) -> Result<Array3<f64>> {
    let g = invert(h)?;
    let (c, in_h, in_w) = channels.dim();
    let (out_w, out_h) = out_size;
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            let (u, v) = g.apply(x as f64, y as f64);
            if u >= 0.0 && v >= 0.0 && u <= (in_w - 1) as f64 && v <= (in_h - 1) as f64 {
                let (x0, y0, wx, wy) = bilinear_cell(u, v, in_w, in_h);
                let x1 = (x0 + 1).min(in_w - 1);
                let y1 = (y0 + 1).min(in_h - 1);
                for ch in 0..c {
                    let v00 = channels[(ch, y0, x0)];
                    let v01 = channels[(ch, y0, x1)];
                    let v10 = channels[(ch, y1, x0)];
                    let v11 = channels[(ch, y1, x1)];
                    out[(ch, y, x)] = v00 * (1.0 - wx) * (1.0 - wy)
                        + v01 * wx * (1.0 - wy)
                        + v10 * (1.0 - wx) * wy
                        + v11 * wx * wy;
                }
            } else {
                out[(background_channel, y, x)] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp_channels`] for a given upstream gradient.
///
/// Returns `(d/d input, d/d h)` where the homography gradient covers the
/// eight free row-major entries (`h33` is pinned to 1). The gradient is
/// propagated through the matrix inverse used by the inverse-mapping warp.
pub fn warp_channels_vjp(
    channels: &ArrayView3<f64>,
    h: &Homography,
    out_size: (usize, usize),
    background_channel: usize,
    grad_out: &ArrayView3<f64>,
) -> Result<(Array3<f64>, [f64; 8])> {
    let _ = background_channel;
    invert(h)?; // conditioning guard
    // The pushthrough d(inv H) = -G dH G needs the exact (unnormalized)
    // inverse; sampling itself is scale-invariant.
    let gm = h
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::Geometry("homography is not invertible".into()))?;
    let gm = &gm;
    let (c, in_h, in_w) = channels.dim();
    let (out_w, out_h) = out_size;
    assert_eq!(grad_out.dim(), (c, out_h, out_w), "grad shape mismatch");

    let mut grad_in = Array3::<f64>::zeros((c, in_h, in_w));
    let mut grad_g = Matrix3::<f64>::zeros();

    for y in 0..out_h {
        for x in 0..out_w {
            let p = Vector3::new(x as f64, y as f64, 1.0);
            let q = gm * p;
            let denom = q.z;
            let u = q.x / denom;
            let v = q.y / denom;
            if !(u >= 0.0 && v >= 0.0 && u <= (in_w - 1) as f64 && v <= (in_h - 1) as f64) {
                continue; // constant background region: zero gradient
            }
            let (x0, y0, wx, wy) = bilinear_cell(u, v, in_w, in_h);
            let x1 = (x0 + 1).min(in_w - 1);
            let y1 = (y0 + 1).min(in_h - 1);

            let mut dl_du = 0.0;
            let mut dl_dv = 0.0;
            for ch in 0..c {
                let go = grad_out[(ch, y, x)];
                if go == 0.0 {
                    continue;
                }
                let v00 = channels[(ch, y0, x0)];
                let v01 = channels[(ch, y0, x1)];
                let v10 = channels[(ch, y1, x0)];
                let v11 = channels[(ch, y1, x1)];
                // dout/du and dout/dv of the bilinear cell.
                dl_du += go * ((v01 - v00) * (1.0 - wy) + (v11 - v10) * wy);
                dl_dv += go * ((v10 - v00) * (1.0 - wx) + (v11 - v01) * wx);
                // Scatter into the input gradient.
                grad_in[(ch, y0, x0)] += go * (1.0 - wx) * (1.0 - wy);
                grad_in[(ch, y0, x1)] += go * wx * (1.0 - wy);
                grad_in[(ch, y1, x0)] += go * (1.0 - wx) * wy;
                grad_in[(ch, y1, x1)] += go * wx * wy;
            }
            if dl_du == 0.0 && dl_dv == 0.0 {
                continue;
            }
            // Quotient rule through (u, v) = (q.x / q.z, q.y / q.z).
            let du = dl_du / denom;
            let dv = dl_dv / denom;
            let dz = -(dl_du * u + dl_dv * v) / denom;
            for j in 0..3 {
                grad_g[(0, j)] += du * p[j];
                grad_g[(1, j)] += dv * p[j];
                grad_g[(2, j)] += dz * p[j];
            }
        }
    }

    // d inv(H) = -G dH G, hence dL/dH = -Gᵀ (dL/dG) Gᵀ.
    let gt = gm.transpose();
    let grad_h_full = -(gt * grad_g * gt);
    let mut grad_h = [0.0f64; 8];
    for (idx, slot) in grad_h.iter_mut().enumerate() {
        *slot = grad_h_full[(idx / 3, idx % 3)];
    }
    Ok((grad_in, grad_h))
}

#[inline]
fn bilinear_cell(u: f64, v: f64, in_w: usize, in_h: usize) -> (usize, usize, f64, f64) {
    let x0 = (u.floor() as usize).min(in_w - 1);
    let y0 = (v.floor() as usize).min(in_h - 1);
    let wx = u - x0 as f64;
    let wy = v - y0 as f64;
    (x0, y0, wx, wy)
}

/// BEV-side visibility mask of a view: true where the BEV pixel projects
/// inside the view bounds under `h`.
pub fn visible_mask(
    h: &Homography,
    bev_size: (usize, usize),
    view_size: (usize, usize),
) -> Array2<bool> {
    let (bev_w, bev_h) = bev_size;
    let (view_w, view_h) = view_size;
    let mut mask = Array2::<bool>::from_elem((bev_h, bev_w), false);
    for v in 0..bev_h {
        for u in 0..bev_w {
            let (x, y) = h.apply(u as f64, v as f64);
            if x >= 0.0 && y >= 0.0 && x <= (view_w - 1) as f64 && y <= (view_h - 1) as f64 {
                mask[(v, u)] = true;
            }
        }
    }
    mask
}

/// Result of [`decompose_homography`]: recovered extrinsics plus the
/// orthonormality residual of the raw (pre-projection) rotation.
#[derive(Debug, Clone)]
pub struct DecomposedPose {
    pub extrinsics: Extrinsics,
    /// Max-abs deviation of `RᵀR` from identity before re-orthonormalization.
    pub orthonormality_residual: f64,
    /// Set when the residual exceeds 1e-3, i.e. the input homography is far
    /// from a plane-camera geometry.
    pub warning: bool,
}

/// Recover camera extrinsics from a plane-camera homography.
///
/// Computes `M = K⁻¹ H diag(1/s, 1/s, 1)`, scales by
/// `λ = 2 / (‖m1‖ + ‖m2‖)`, takes `r1 = λ m1`, `r2 = λ m2`, `r3 = r1 × r2`,
/// projects onto the nearest rotation, and sets `t = λ m3`, with the sign
/// chosen so the camera sits above the plane.
pub fn decompose_homography(
    h: &Homography,
    k: &Intrinsics,
    meters_per_pixel: f64,
) -> Result<DecomposedPose> {
    if !(meters_per_pixel > 0.0) {
        return Err(Error::Geometry(format!(
            "meters_per_pixel must be positive, got {meters_per_pixel}"
        )));
    }
    let k_inv = k
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::Geometry("intrinsics matrix is not invertible".into()))?;
    let mut m = k_inv * h.m;
    for i in 0..3 {
        m[(i, 0)] /= meters_per_pixel;
        m[(i, 1)] /= meters_per_pixel;
    }
    let m1: Vector3<f64> = m.column(0).into();
    let m2: Vector3<f64> = m.column(1).into();
    let m3: Vector3<f64> = m.column(2).into();
    let n1 = m1.norm();
    let n2 = m2.norm();
    if n1 < 1e-12 || n2 < 1e-12 {
        return Err(Error::Geometry(
            "degenerate homography: near-zero rotation columns".into(),
        ));
    }
    let mut lambda = 2.0 / (n1 + n2);
    // Sign: the camera must end up above the plane. The height for λ equals
    // -(−Rᵀ t).z; flipping λ flips it.
    {
        let r1 = lambda * m1;
        let r2 = lambda * m2;
        let r3 = r1.cross(&r2);
        let r = Matrix3::from_columns(&[r1, r2, r3]);
        let t = lambda * m3;
        let center = -r.transpose() * t;
        if center.z > 0.0 {
            lambda = -lambda;
        }
    }
    let r1 = lambda * m1;
    let r2 = lambda * m2;
    let r3 = r1.cross(&r2);
    let r_raw = Matrix3::from_columns(&[r1, r2, r3]);
    let residual = (r_raw.transpose() * r_raw - Matrix3::identity()).abs().max();

    let rotation = nearest_rotation(&r_raw)?;
    let translation = lambda * m3;
    let pose = Extrinsics::from_parts_unchecked(rotation, translation);
    Ok(DecomposedPose {
        extrinsics: pose,
        orthonormality_residual: residual,
        warning: residual > 1e-3,
    })
}

/// Nearest orthogonal matrix with determinant +1 (polar projection via SVD).
fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Geometry("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Geometry("SVD failed".into()))?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    Ok(r)
}

/// Angle of the relative rotation between two rotation matrices, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b;
    ((d.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
