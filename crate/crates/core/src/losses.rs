//! Training losses: photometric L1 + D-SSIM, normal consistency against a
//! depth-derived normal, and multi-view regularization built on
//! plane-induced homographies, patch correlation, and cycle reprojection.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geom::Camera;
use crate::grad::{
    accumulate_alpha_grads, normal_rotation_grads, weighted_sum_alpha_grads, GradError,
    GradientBuffer, ParamGrad,
};
use crate::geom::{GaussianPrimitive, Ray};
use crate::img::{ImageF, ImageRgb, Mask};
use crate::transmittance::TransmittanceProfile;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("plane passes through the reference camera center (|p.n| = {0:e})")]
    DegeneratePlane(f64),
    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),
}

/// Weights of the combined training loss.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Mixing weight of the structural term inside the photometric loss.
    pub lambda: f64,
    /// Weight of the normal consistency loss.
    pub w_n: f64,
    /// Weight of the patch-correlation term of the multi-view loss.
    pub w_pc: f64,
    /// Weight of the cycle-reprojection term of the multi-view loss.
    pub w_gc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            w_n: 0.05,
            w_pc: 0.6,
            w_gc: 0.02,
        }
    }
}

// ---------------------------------------------------------------------------
// Photometric: (1 - lambda) L1 + lambda (1 - SSIM) / 2
// ---------------------------------------------------------------------------

const SSIM_WIN: usize = 11;
const SSIM_HALF: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> [[f64; SSIM_WIN]; SSIM_WIN] {
    let mut w = [[0.0; SSIM_WIN]; SSIM_WIN];
    let mut norm = 0.0;
    for (dy, row) in w.iter_mut().enumerate() {
        for (dx, cell) in row.iter_mut().enumerate() {
            let u = dx as f64 - SSIM_HALF as f64;
            let v = dy as f64 - SSIM_HALF as f64;
            *cell = (-(u * u + v * v) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            norm += *cell;
        }
    }
    for row in w.iter_mut() {
        for cell in row.iter_mut() {
            *cell /= norm;
        }
    }
    w
}

/// Breakdown of one photometric evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PhotometricLoss {
    /// Combined value `(1 - lambda) l1 + lambda dssim`.
    pub total: f64,
    /// Weighted L1 contribution, `(1 - lambda) * mean |r - g|`.
    pub l1: f64,
    /// Weighted structural contribution, `lambda * mean (1 - S) / 2`.
    pub dssim: f64,
    /// Number of fully valid structural windows.
    pub windows: usize,
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Photometric loss between a rendered and a reference single-channel image.
/// The structural term evaluates only windows that lie fully inside the
/// image with every pixel valid; the L1 term averages over valid pixels.
pub fn photometric_loss(
    rendered: &ImageF,
    reference: &ImageF,
    mask: &Mask,
    lambda: f64,
) -> Result<PhotometricLoss, LossError> {
    let (loss, _) = photometric_evaluate(rendered, reference, mask, lambda, false)?;
    Ok(loss)
}

/// Photometric loss plus the gradient image `dL/d rendered`.
pub fn photometric_backward(
    rendered: &ImageF,
    reference: &ImageF,
    mask: &Mask,
    lambda: f64,
) -> Result<(PhotometricLoss, ImageF), LossError> {
    let (loss, grad) = photometric_evaluate(rendered, reference, mask, lambda, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn photometric_evaluate(
    rendered: &ImageF,
    reference: &ImageF,
    mask: &Mask,
    lambda: f64,
    with_grad: bool,
) -> Result<(PhotometricLoss, Option<ImageF>), LossError> {
    check_dims(
        (rendered.width, rendered.height),
        (reference.width, reference.height),
    )?;
    check_dims((rendered.width, rendered.height), (mask.width, mask.height))?;
    let (w, h) = (rendered.width, rendered.height);
    let mut grad = with_grad.then(|| ImageF::zeros(w, h));

    // L1 over valid pixels.
    let mut l1_sum = 0.0;
    let mut l1_count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.at(x, y) {
                l1_sum += (rendered.at(x, y) - reference.at(x, y)).abs();
                l1_count += 1;
            }
        }
    }
    let l1 = if l1_count == 0 { 0.0 } else { l1_sum / l1_count as f64 };
    if let Some(g) = grad.as_mut() {
        if l1_count > 0 {
            let f = (1.0 - lambda) / l1_count as f64;
            for y in 0..h {
                for x in 0..w {
                    if mask.at(x, y) {
                        let d = rendered.at(x, y) - reference.at(x, y);
                        g.set(x, y, f * d.signum());
                    }
                }
            }
        }
    }

    // Structural term over fully valid windows.
    let win = ssim_window();
    let mut s_sum = 0.0;
    let mut windows = 0usize;
    // First pass counts windows so the backward pass can normalize.
    let mut centers = Vec::new();
    if w >= SSIM_WIN && h >= SSIM_WIN {
        for cy in SSIM_HALF..h - SSIM_HALF {
            'cx: for cx in SSIM_HALF..w - SSIM_HALF {
                for dy in 0..SSIM_WIN {
                    for dx in 0..SSIM_WIN {
                        if !mask.at(cx + dx - SSIM_HALF, cy + dy - SSIM_HALF) {
                            continue 'cx;
                        }
                    }
                }
                centers.push((cx, cy));
            }
        }
    }
    for &(cx, cy) in &centers {
        let mut mu_x = 0.0;
        let mut mu_y = 0.0;
        for dy in 0..SSIM_WIN {
            for dx in 0..SSIM_WIN {
                let (px, py) = (cx + dx - SSIM_HALF, cy + dy - SSIM_HALF);
                mu_x += win[dy][dx] * rendered.at(px, py);
                mu_y += win[dy][dx] * reference.at(px, py);
            }
        }
        let mut var_x = 0.0;
        let mut var_y = 0.0;
        let mut cov = 0.0;
        for dy in 0..SSIM_WIN {
            for dx in 0..SSIM_WIN {
                let (px, py) = (cx + dx - SSIM_HALF, cy + dy - SSIM_HALF);
                let ex = rendered.at(px, py) - mu_x;
                let ey = reference.at(px, py) - mu_y;
                var_x += win[dy][dx] * ex * ex;
                var_y += win[dy][dx] * ey * ey;
                cov += win[dy][dx] * ex * ey;
            }
        }
        let n1 = 2.0 * mu_x * mu_y + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        let d1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
        let d2 = var_x + var_y + SSIM_C2;
        let s = n1 * n2 / (d1 * d2);
        s_sum += s;
        windows += 1;
        if let Some(g) = grad.as_mut() {
            // d total / dS for this window; the mean over windows and the
            // (1 - S)/2 shape give the -1/(2 windows) factor.
            let upstream = -lambda / (2.0 * centers.len() as f64);
            let ds_dmu = 2.0 * mu_y * n2 / (d1 * d2) - 2.0 * mu_x * s / d1;
            let ds_dvar = -s / d2;
            let ds_dcov = 2.0 * n1 / (d1 * d2);
            for dy in 0..SSIM_WIN {
                for dx in 0..SSIM_WIN {
                    let (px, py) = (cx + dx - SSIM_HALF, cy + dy - SSIM_HALF);
                    let wgt = win[dy][dx];
                    let ex = rendered.at(px, py) - mu_x;
                    let ey = reference.at(px, py) - mu_y;
                    let ds_dp = ds_dmu * wgt + ds_dvar * 2.0 * wgt * ex + ds_dcov * wgt * ey;
                    g.set(px, py, g.at(px, py) + upstream * ds_dp);
                }
            }
        }
    }
    let ssim = if windows == 0 { 1.0 } else { s_sum / windows as f64 };
    let l1_term = (1.0 - lambda) * l1;
    let dssim_term = lambda * (1.0 - ssim) / 2.0;
    Ok((
        PhotometricLoss {
            total: l1_term + dssim_term,
            l1: l1_term,
            dssim: dssim_term,
            windows,
        },
        grad,
    ))
}

/// Photometric loss on RGB images: the mean of the per-channel losses.
pub fn photometric_loss_rgb(
    rendered: &ImageRgb,
    reference: &ImageRgb,
    mask: &Mask,
    lambda: f64,
) -> Result<PhotometricLoss, LossError> {
    let (loss, _) = photometric_rgb_evaluate(rendered, reference, mask, lambda, false)?;
    Ok(loss)
}

/// RGB photometric loss plus the per-channel gradient image.
pub fn photometric_backward_rgb(
    rendered: &ImageRgb,
    reference: &ImageRgb,
    mask: &Mask,
    lambda: f64,
) -> Result<(PhotometricLoss, ImageRgb), LossError> {
    let (loss, grad) = photometric_rgb_evaluate(rendered, reference, mask, lambda, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn photometric_rgb_evaluate(
    rendered: &ImageRgb,
    reference: &ImageRgb,
    mask: &Mask,
    lambda: f64,
    with_grad: bool,
) -> Result<(PhotometricLoss, Option<ImageRgb>), LossError> {
    let (w, h) = (rendered.width, rendered.height);
    let mut total = PhotometricLoss {
        total: 0.0,
        l1: 0.0,
        dssim: 0.0,
        windows: 0,
    };
    let mut grad = with_grad.then(|| ImageRgb::zeros(w, h));
    for channel in 0..3 {
        let mut rc = ImageF::zeros(w, h);
        let mut gc = ImageF::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                rc.set(x, y, rendered.at(x, y)[channel]);
                gc.set(x, y, reference.at(x, y)[channel]);
            }
        }
        let (loss, channel_grad) = photometric_evaluate(&rc, &gc, mask, lambda, with_grad)?;
        total.total += loss.total / 3.0;
        total.l1 += loss.l1 / 3.0;
        total.dssim += loss.dssim / 3.0;
        total.windows = loss.windows;
        if let (Some(g), Some(cg)) = (grad.as_mut(), channel_grad) {
            for y in 0..h {
                for x in 0..w {
                    let mut v = g.at(x, y);
                    v[channel] = cg.at(x, y) / 3.0;
                    g.set(x, y, v);
                }
            }
        }
    }
    Ok((total, grad))
}

// ---------------------------------------------------------------------------
// Normal consistency
// ---------------------------------------------------------------------------

/// Compositing-weighted disagreement between per-Gaussian normals and a
/// depth-derived normal: `sum_i w_i (1 - n_i . depth_normal)`.
pub fn normal_consistency_loss(profile: &TransmittanceProfile, depth_normal: &Vector3<f64>) -> f64 {
    profile
        .entries()
        .iter()
        .zip(profile.compositing_weights())
        .map(|(e, w)| w * (1.0 - e.normal.dot(depth_normal)))
        .sum()
}

/// Backward of [`normal_consistency_loss`]: gradients flow through the
/// compositing weights (via each alpha) and through the per-Gaussian normals
/// (via each rotation). The depth-derived normal is treated as a constant.
pub fn normal_consistency_backward(
    profile: &TransmittanceProfile,
    scene: &[GaussianPrimitive],
    ray: &Ray,
    depth_normal: &Vector3<f64>,
    upstream: f64,
    buffer: &mut GradientBuffer,
) -> Result<(), GradError> {
    if profile.is_empty() {
        return Ok(());
    }
    let per_entry: Vec<f64> = profile
        .entries()
        .iter()
        .map(|e| upstream * (1.0 - e.normal.dot(depth_normal)))
        .collect();
    let dl_dalpha = weighted_sum_alpha_grads(profile, &per_entry);
    accumulate_alpha_grads(profile, scene, ray, &dl_dalpha, buffer)?;
    for (e, w) in profile.entries().iter().zip(profile.compositing_weights()) {
        let id = e.restriction.gaussian_id;
        let dl_dn = -depth_normal * (w * upstream);
        let mut contribution = ParamGrad::zero();
        contribution.rotation = normal_rotation_grads(&scene[id], ray, &dl_dn);
        buffer.accumulate(id, &contribution, 1.0)?;
    }
    Ok(())
}

/// Derives a per-pixel normal map from a depth map by back-projecting each
/// pixel and its +x/+y neighbors and crossing the offsets. Normals are
/// oriented toward the camera; a pixel is invalid when it or either
/// neighbor is masked or out of range.
pub fn depth_to_normal(depth: &ImageF, mask: &Mask, camera: &Camera) -> (ImageRgb, Mask) {
    let (w, h) = (depth.width, depth.height);
    let mut normals = ImageRgb::zeros(w, h);
    let mut out_mask = Mask::filled(w, h, false);
    let cam_pos = camera.position();
    let point = |x: usize, y: usize| -> Vector3<f64> {
        camera.ray_through_pixel(x, y).point_at(depth.at(x, y))
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 >= w || y + 1 >= h {
                continue;
            }
            if !mask.at(x, y) || !mask.at(x + 1, y) || !mask.at(x, y + 1) {
                continue;
            }
            let p0 = point(x, y);
            let px = point(x + 1, y);
            let py = point(x, y + 1);
            let n = (px - p0).cross(&(py - p0));
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&(cam_pos - p0)) < 0.0 {
                n = -n;
            }
            normals.set(x, y, n);
            out_mask.set(x, y, true);
        }
    }
    (normals, out_mask)
}

// ---------------------------------------------------------------------------
// Homographies and cycle reprojection
// ---------------------------------------------------------------------------

/// Invertible 3x3 pixel-to-pixel map in homogeneous coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, LossError> {
        let det = m.determinant();
        if det.abs() < 1e-12 {
            return Err(LossError::SingularHomography(det.abs()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Warps continuous pixel coords; `None` when the image point falls at
    /// infinity (homogeneous w <= 1e-12).
    pub fn warp(&self, u: &Vector2<f64>) -> Option<Vector2<f64>> {
        let v = self.0 * Vector3::new(u.x, u.y, 1.0);
        if v.z <= 1e-12 {
            return None;
        }
        Some(Vector2::new(v.x / v.z, v.y / v.z))
    }
}

/// Homography induced by the plane through `p_r` with unit normal `n_r`
/// (both in the reference camera frame), mapping reference pixels to
/// neighbor pixels: `K_n (R + T n^T / (p . n)) K_r^{-1}`.
pub fn plane_homography(
    k_r: &Matrix3<f64>,
    k_n: &Matrix3<f64>,
    r_rn: &Matrix3<f64>,
    t_rn: &Vector3<f64>,
    n_r: &Vector3<f64>,
    p_r: &Vector3<f64>,
) -> Result<Homography, LossError> {
    let s = p_r.dot(n_r);
    if s.abs() < 1e-9 {
        return Err(LossError::DegeneratePlane(s.abs()));
    }
    let k_r_inv = k_r.try_inverse().expect("intrinsics are invertible");
    let m = k_n * (r_rn + t_rn * n_r.transpose() / s) * k_r_inv;
    Homography::new(m)
}

/// Relative pose mapping `from`-camera coordinates to `to`-camera
/// coordinates: returns `(R, T)` with `x_to = R x_from + T`.
pub fn relative_pose(from: &Camera, to: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
    let r = to.rotation() * from.rotation().transpose();
    let t = to.translation() - r * from.translation();
    (r, t)
}

/// Forward-backward reprojection error of one pixel in pixels:
/// `|u - dehomogenize(H_nr H_rn u~)|`. Returns `+inf` when the cycle lands
/// at infinity.
pub fn cycle_error(u: &Vector2<f64>, h_rn: &Homography, h_nr: &Homography) -> f64 {
    let m = Homography(h_nr.0 * h_rn.0);
    match m.warp(u) {
        Some(back) => (u - back).norm(),
        None => f64::INFINITY,
    }
}

/// Confidence from the cycle error: `exp(-phi)` below 1 pixel, 0 beyond.
pub fn confidence_weight(phi: f64) -> f64 {
    if phi < 1.0 {
        (-phi).exp()
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Multi-view loss
// ---------------------------------------------------------------------------

/// Patch half-width of the correlation term.
pub const NCC_HALF: usize = 3;
const NCC_WIN: usize = 2 * NCC_HALF + 1;
const NCC_COUNT: usize = NCC_WIN * NCC_WIN;

/// Rendered geometry channels of one view.
#[derive(Debug, Clone, Copy)]
pub struct RenderedGeometry<'a> {
    pub depth: &'a ImageF,
    pub mask: &'a Mask,
    /// Unit surface normals in world coordinates.
    pub normal: &'a ImageRgb,
}

/// Everything the multi-view loss consumes for a reference/neighbor pair.
#[derive(Debug, Clone, Copy)]
pub struct MultiviewInputs<'a> {
    pub ref_camera: &'a Camera,
    pub nbr_camera: &'a Camera,
    /// Observed intensities (treated as constants).
    pub ref_image: &'a ImageF,
    pub nbr_image: &'a ImageF,
    pub ref_geom: RenderedGeometry<'a>,
    pub nbr_geom: RenderedGeometry<'a>,
}

/// Aggregates of one multi-view evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MultiviewStats {
    /// `(w_pc L_pc + w_gc L_gc) / valid_pixels`.
    pub loss: f64,
    /// Patch-correlation sum before weighting and averaging.
    pub l_pc: f64,
    /// Cycle-error sum before weighting and averaging.
    pub l_gc: f64,
    pub valid_pixels: usize,
    /// Pixels dropped for any reason (masked, degenerate, out of bounds,
    /// textureless patches).
    pub skipped_pixels: usize,
    /// Mean cycle error over valid pixels.
    pub mean_cycle_error: f64,
}

/// Jacobian of dehomogenization at homogeneous point `v` (2x3, rows x/y).
fn dehom_jacobian(v: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let wz = v.z;
    [
        Vector3::new(1.0 / wz, 0.0, -v.x / (wz * wz)),
        Vector3::new(0.0, 1.0 / wz, -v.y / (wz * wz)),
    ]
}

/// Bilinear sample with its gradient w.r.t. the continuous coordinates.
fn sample_bilinear_grad(img: &ImageF, u: f64, v: f64) -> Option<(f64, Vector2<f64>)> {
    let x = u - 0.5;
    let y = v - 0.5;
    if x < 0.0 || y < 0.0 || x > (img.width - 1) as f64 || y > (img.height - 1) as f64 {
        return None;
    }
    let x0 = (x.floor() as usize).min(img.width - 2);
    let y0 = (y.floor() as usize).min(img.height - 2);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = img.at(x0, y0);
    let v10 = img.at(x0 + 1, y0);
    let v01 = img.at(x0, y0 + 1);
    let v11 = img.at(x0 + 1, y0 + 1);
    let value =
        v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
    let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
    let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
    Some((value, Vector2::new(dx, dy)))
}

/// Forward multi-view loss. See [`multiview_loss_backward`] for gradients.
pub fn multiview_loss(inputs: &MultiviewInputs, weights: &LossWeights) -> MultiviewStats {
    multiview_evaluate(inputs, weights, false, None).0
}

/// Per-pixel confidence weights of the current geometry (zero where the
/// pixel does not contribute).
pub fn multiview_confidence(inputs: &MultiviewInputs, weights: &LossWeights) -> ImageF {
    multiview_evaluate(inputs, weights, false, None).2
}

/// Forward loss with externally fixed confidence weights. The gradients of
/// [`multiview_loss_backward`] treat confidence as a constant, so numeric
/// differentiation must evaluate this frozen form.
pub fn multiview_loss_frozen(
    inputs: &MultiviewInputs,
    weights: &LossWeights,
    confidence: &ImageF,
) -> MultiviewStats {
    multiview_evaluate(inputs, weights, false, Some(confidence)).0
}

/// Multi-view loss plus per-pixel gradients w.r.t. the reference view's
/// rendered depth and (unnormalized) world-frame normal. The confidence
/// weights, the neighbor view's geometry, and both observed images are
/// treated as constants.
pub fn multiview_loss_backward(
    inputs: &MultiviewInputs,
    weights: &LossWeights,
) -> (MultiviewStats, ImageF, ImageRgb) {
    let (stats, grads, _) = multiview_evaluate(inputs, weights, true, None);
    let (d_depth, d_normal) = grads.expect("gradient requested");
    (stats, d_depth, d_normal)
}

struct PixelTerm {
    x: usize,
    y: usize,
    /// dL/dH before the 1/count average, as a 3x3 matrix.
    dl_dh: Matrix3<f64>,
    /// Chain pieces for t and the camera-frame normal.
    dh_dt: Matrix3<f64>,
    dh_dn: [Matrix3<f64>; 3],
}

fn multiview_evaluate(
    inputs: &MultiviewInputs,
    weights: &LossWeights,
    with_grad: bool,
    conf_frozen: Option<&ImageF>,
) -> (MultiviewStats, Option<(ImageF, ImageRgb)>, ImageF) {
    let (w, h) = (inputs.ref_camera.width, inputs.ref_camera.height);
    let k_r = inputs.ref_camera.intrinsics();
    let k_n = inputs.nbr_camera.intrinsics();
    let k_r_inv = k_r.try_inverse().expect("intrinsics are invertible");
    let (r_rn, t_rn) = relative_pose(inputs.ref_camera, inputs.nbr_camera);
    let (r_nr, t_nr) = relative_pose(inputs.nbr_camera, inputs.ref_camera);
    let rot_r = inputs.ref_camera.rotation();
    let rot_n = inputs.nbr_camera.rotation();

    let mut l_pc = 0.0;
    let mut l_gc = 0.0;
    let mut phi_sum = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    let mut terms: Vec<PixelTerm> = Vec::new();
    let mut conf_map = ImageF::zeros(w, h);

    for y in NCC_HALF..h.saturating_sub(NCC_HALF) {
        'pixel: for x in NCC_HALF..w.saturating_sub(NCC_HALF) {
            // Reference patch must be fully rendered.
            for dy in 0..NCC_WIN {
                for dx in 0..NCC_WIN {
                    if !inputs.ref_geom.mask.at(x + dx - NCC_HALF, y + dy - NCC_HALF) {
                        skipped += 1;
                        continue 'pixel;
                    }
                }
            }
            let u = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let t = inputs.ref_geom.depth.at(x, y);
            let n_world = inputs.ref_geom.normal.at(x, y);
            if n_world.norm() < 0.5 {
                skipped += 1;
                continue;
            }
            let d_cam = inputs.ref_camera.pixel_direction_cam(u.x, u.y);
            let p_cam = d_cam * t;
            let n_cam = rot_r * n_world;
            let Ok(h_rn) = plane_homography(&k_r, &k_n, &r_rn, &t_rn, &n_cam, &p_cam) else {
                skipped += 1;
                continue;
            };
            let Some(u_warp) = h_rn.warp(&u) else {
                skipped += 1;
                continue;
            };
            if !inputs.nbr_camera.contains(u_warp.x, u_warp.y) {
                skipped += 1;
                continue;
            }

            // Neighbor geometry at the warped pixel for the return map.
            let nx = (u_warp.x.floor() as isize).clamp(0, inputs.nbr_camera.width as isize - 1)
                as usize;
            let ny = (u_warp.y.floor() as isize).clamp(0, inputs.nbr_camera.height as isize - 1)
                as usize;
            if !inputs.nbr_geom.mask.at(nx, ny) {
                skipped += 1;
                continue;
            }
            let t_n = inputs.nbr_geom.depth.at(nx, ny);
            let n_n_world = inputs.nbr_geom.normal.at(nx, ny);
            let d_n_cam = inputs
                .nbr_camera
                .pixel_direction_cam(nx as f64 + 0.5, ny as f64 + 0.5);
            let p_n_cam = d_n_cam * t_n;
            let n_n_cam = rot_n * n_n_world;
            let Ok(h_nr) = plane_homography(&k_n, &k_r, &r_nr, &t_nr, &n_n_cam, &p_n_cam) else {
                skipped += 1;
                continue;
            };

            let phi = cycle_error(&u, &h_rn, &h_nr);
            let conf = match conf_frozen {
                Some(frozen) => frozen.at(x, y),
                None => confidence_weight(phi),
            };

            // Patch correlation: reference patch vs homography-warped
            // neighbor samples.
            let mut xs = [0.0; NCC_COUNT];
            let mut ys = [0.0; NCC_COUNT];
            let mut sample_pts = [Vector3::zeros(); NCC_COUNT];
            let mut grads_img = [Vector2::zeros(); NCC_COUNT];
            for dy in 0..NCC_WIN {
                for dx in 0..NCC_WIN {
                    let k = dy * NCC_WIN + dx;
                    let (px, py) = (x + dx - NCC_HALF, y + dy - NCC_HALF);
                    xs[k] = inputs.ref_image.at(px, py);
                    let uk = Vector3::new(px as f64 + 0.5, py as f64 + 0.5, 1.0);
                    let vk = h_rn.matrix() * uk;
                    if vk.z <= 1e-12 {
                        skipped += 1;
                        continue 'pixel;
                    }
                    let wk = Vector2::new(vk.x / vk.z, vk.y / vk.z);
                    let Some((val, g)) = sample_bilinear_grad(inputs.nbr_image, wk.x, wk.y)
                    else {
                        skipped += 1;
                        continue 'pixel;
                    };
                    ys[k] = val;
                    sample_pts[k] = vk;
                    grads_img[k] = g;
                }
            }
            let mu_x: f64 = xs.iter().sum::<f64>() / NCC_COUNT as f64;
            let mu_y: f64 = ys.iter().sum::<f64>() / NCC_COUNT as f64;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for k in 0..NCC_COUNT {
                let ex = xs[k] - mu_x;
                let ey = ys[k] - mu_y;
                sxx += ex * ex;
                syy += ey * ey;
                sxy += ex * ey;
            }
            if sxx < 1e-12 || syy < 1e-12 {
                skipped += 1;
                continue;
            }
            let ncc = sxy / (sxx * syy).sqrt();
            l_pc += conf * (1.0 - ncc);
            if phi.is_finite() {
                l_gc += conf * phi;
                phi_sum += phi;
            }
            conf_map.set(x, y, conf);
            valid += 1;

            if with_grad && conf > 0.0 {
                let mut dl_dh = Matrix3::zeros();
                // Correlation term: d(1 - ncc)/dH via the warped samples.
                let denom = (sxx * syy).sqrt();
                for k in 0..NCC_COUNT {
                    let dncc_dy = (xs[k] - mu_x) / denom - ncc * (ys[k] - mu_y) / syy;
                    // d(1 - ncc) contributes with a minus sign.
                    let f = -weights.w_pc * conf * dncc_dy;
                    if f == 0.0 {
                        continue;
                    }
                    let jac = dehom_jacobian(&sample_pts[k]);
                    let lhs = jac[0] * grads_img[k].x + jac[1] * grads_img[k].y;
                    let (px, py) = (
                        (x + k % NCC_WIN - NCC_HALF) as f64 + 0.5,
                        (y + k / NCC_WIN - NCC_HALF) as f64 + 0.5,
                    );
                    let uk = Vector3::new(px, py, 1.0);
                    dl_dh += f * lhs * uk.transpose();
                }
                // Cycle term: d phi / dH through the composed map, with the
                // return homography held constant.
                if phi.is_finite() && phi > 1e-12 {
                    let m = h_nr.matrix() * h_rn.matrix();
                    let vu = m * Vector3::new(u.x, u.y, 1.0);
                    if vu.z > 1e-12 {
                        let back = Vector2::new(vu.x / vu.z, vu.y / vu.z);
                        let r_hat = (u - back) / phi;
                        let jac = dehom_jacobian(&vu);
                        let lhs = jac[0] * r_hat.x + jac[1] * r_hat.y;
                        let dphi_dm = -lhs * Vector3::new(u.x, u.y, 1.0).transpose();
                        dl_dh += weights.w_gc * conf * (h_nr.matrix().transpose() * dphi_dm);
                    }
                }

                // Chain pieces: H = K_n R K_r^-1 + B n^T K_r^-1 / s with
                // B = K_n T and s = t (d . n).
                let s = p_cam.dot(&n_cam);
                let b = k_n * t_rn;
                let core = b * (n_cam.transpose() * k_r_inv);
                let dh_dt = -core * (d_cam.dot(&n_cam) / (s * s));
                let mut dh_dn = [Matrix3::zeros(); 3];
                for (c, slot) in dh_dn.iter_mut().enumerate() {
                    let mut e = Vector3::zeros();
                    e[c] = 1.0;
                    *slot = b * (e.transpose() * k_r_inv) / s
                        - core * (p_cam[c] / (s * s));
                }
                terms.push(PixelTerm {
                    x,
                    y,
                    dl_dh,
                    dh_dt,
                    dh_dn,
                });
            }
        }
    }

    let loss = if valid == 0 {
        0.0
    } else {
        (weights.w_pc * l_pc + weights.w_gc * l_gc) / valid as f64
    };
    let stats = MultiviewStats {
        loss,
        l_pc,
        l_gc,
        valid_pixels: valid,
        skipped_pixels: skipped,
        mean_cycle_error: if valid == 0 { 0.0 } else { phi_sum / valid as f64 },
    };
    if !with_grad {
        return (stats, None, conf_map);
    }
    let mut d_depth = ImageF::zeros(w, h);
    let mut d_normal = ImageRgb::zeros(w, h);
    if valid > 0 {
        let scale = 1.0 / valid as f64;
        for term in &terms {
            let dt: f64 = term.dl_dh.component_mul(&term.dh_dt).sum() * scale;
            let mut dn_cam = Vector3::zeros();
            for c in 0..3 {
                dn_cam[c] = term.dl_dh.component_mul(&term.dh_dn[c]).sum() * scale;
            }
            let dn_world = rot_r.transpose() * dn_cam;
            d_depth.set(term.x, term.y, d_depth.at(term.x, term.y) + dt);
            d_normal.set(term.x, term.y, d_normal.at(term.x, term.y) + dn_world);
        }
    }
    (stats, Some((d_depth, d_normal)), conf_map)
}
