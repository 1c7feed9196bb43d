//! Training objectives: masked photometric L1, confidence-masked symmetric
//! warped SSIM, geodesic + translation pose error, and the Huber triplet
//! consistency term, plus analytic gradients and a finite-difference checker.

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    geodesic_distance, project, unproject, Intrinsics, Pose, Rot6D, Rotation, Translation,
};
use crate::imaging::{
    bilinear_sample_scalar, ssim_map, warp_image, ConfidenceMask, DepthMap, FlowField,
    FlowResolution, Image,
};

pub const DEFAULT_LAMBDA_TRI: f64 = 0.01;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

/// All loss components of one evaluation; the total is their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_img: f64,
    pub l_match: f64,
    pub l_rot: f64,
    pub l_trans: f64,
    pub l_pose: f64,
    pub l_tri: f64,
    pub lambda_tri: f64,
    pub l_total: f64,
}

/// Mean absolute difference over masked pixels, all channels. An all-false
/// mask yields zero.
pub fn loss_img(rendered: &Image, target: &Image, mask: &Array2<bool>) -> Result<f64> {
    if !rendered.same_size(target) || rendered.data().dim().0 != mask.dim().0
        || rendered.data().dim().1 != mask.dim().1
    {
        return Err(Error::DimensionMismatch(format!(
            "photometric loss needs matching shapes, got {}x{} vs {}x{} mask {}x{}",
            rendered.h(),
            rendered.w(),
            target.h(),
            target.w(),
            mask.dim().0,
            mask.dim().1
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..rendered.h() {
        for x in 0..rendered.w() {
            if !mask[(y, x)] {
                continue;
            }
            let a = rendered.pixel(y, x);
            let b = target.pixel(y, x);
            for c in 0..3 {
                sum += (a[c] - b[c]).abs();
            }
            count += 3;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

fn masked_warp_ssim(
    src: &Image,
    dst: &Image,
    flow: &FlowField,
    mask: &ConfidenceMask,
) -> Result<f64> {
    if flow.resolution() != FlowResolution::Full {
        return Err(Error::ResolutionMismatch(
            "matching loss wants full-resolution flow".into(),
        ));
    }
    if flow.h() != dst.h() || flow.w() != dst.w() || mask.data.dim() != (dst.h(), dst.w()) {
        return Err(Error::ResolutionMismatch(format!(
            "flow {}x{} / mask {:?} disagree with image {}x{}",
            flow.h(),
            flow.w(),
            mask.data.dim(),
            dst.h(),
            dst.w()
        )));
    }
    let (warped, warp_ok) = warp_image(src, flow);
    // Pixels outside the confidence mask or with an out-of-frame warp are
    // excluded from the sum, but they still sit inside the SSIM windows of
    // nearby counted pixels. Filling them with the destination value makes
    // that support neutral instead of letting unmatched content drag down
    // border scores.
    let mut filled = warped.data().clone();
    for y in 0..dst.h() {
        for x in 0..dst.w() {
            if !(mask.data[(y, x)] && warp_ok[(y, x)]) {
                for c in 0..3 {
                    filled[(y, x, c)] = dst.data()[(y, x, c)];
                }
            }
        }
    }
    let map = ssim_map(&Image::new(filled)?, dst)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..dst.h() {
        for x in 0..dst.w() {
            if mask.data[(y, x)] && warp_ok[(y, x)] {
                sum += 1.0 - map[(y, x)];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Symmetric confidence-masked warped-SSIM dissimilarity: each direction
/// warps the other image to this view by the flow and compares under the
/// cyclic mask, normalized by the masked-pixel count.
pub fn loss_match(
    f_12: &FlowField,
    f_21: &FlowField,
    m_12: &ConfidenceMask,
    m_21: &ConfidenceMask,
    i1: &Image,
    i2: &Image,
) -> Result<f64> {
    let a = masked_warp_ssim(i2, i1, f_12, m_12)?;
    let b = masked_warp_ssim(i1, i2, f_21, m_21)?;
    Ok(a + b)
}

/// Rotation geodesic angle (radians) and squared translation distance.
pub fn loss_pose(est: &Pose, gt: &Pose) -> (f64, f64) {
    let l_rot = geodesic_distance(&est.r, &gt.r);
    let l_trans = (est.t.0 - gt.t.0).norm_squared();
    (l_rot, l_trans)
}

/// Huber penalty of a nonnegative residual: quadratic inside `delta`,
/// linear beyond it.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// d huber / d r.
pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Triplet consistency: sampled target pixels are lifted by their depth and
/// projected into both context views (`i1'`, `i2'`); the flow warps `i1'`
/// into view 2 and the Huber distance to the direct projection is averaged
/// over mask-approved samples.
///
/// The flow lives on the view-1 grid and points into view 2; the target
/// unprojection reuses `k1`, matching capture rigs with shared intrinsics.
/// Samples behind either camera or with invalid depth are dropped.
#[allow(clippy::too_many_arguments)]
pub fn loss_tri(
    depth: &DepthMap,
    p_1t: &Pose,
    p_2t: &Pose,
    k1: &Intrinsics,
    k2: &Intrinsics,
    f_21: &FlowField,
    m: &ConfidenceMask,
    coords: &[(usize, usize)],
    delta: f64,
) -> Result<f64> {
    if f_21.resolution() != FlowResolution::Full {
        return Err(Error::ResolutionMismatch(
            "triplet loss wants full-resolution flow".into(),
        ));
    }
    if m.data.dim() != (f_21.h(), f_21.w()) {
        return Err(Error::ResolutionMismatch(format!(
            "mask {:?} disagrees with flow {}x{}",
            m.data.dim(),
            f_21.h(),
            f_21.w()
        )));
    }
    let dx_field = f_21.data().index_axis(ndarray::Axis(2), 0).to_owned();
    let dy_field = f_21.data().index_axis(ndarray::Axis(2), 1).to_owned();
    let (fh, fw) = (f_21.h() as f64, f_21.w() as f64);
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(y, x) in coords {
        if y >= depth.depth.dim().0 || x >= depth.depth.dim().1 || !depth.valid[(y, x)] {
            continue;
        }
        let d = depth.depth[(y, x)];
        let x_t = unproject(k1, &Vector2::new(x as f64, y as f64), d)?;
        let (i1p, i2p) = match (project(k1, p_1t, &x_t), project(k2, p_2t, &x_t)) {
            (Ok((a, _)), Ok((b, _))) => (a, b),
            // Behind-camera projections drop out of the mean.
            _ => continue,
        };
        if i1p.x < 0.0 || i1p.x > fw - 1.0 || i1p.y < 0.0 || i1p.y > fh - 1.0 {
            continue;
        }
        // Binary mask looked up at the nearest pixel of i1'.
        let my = (i1p.y.round() as usize).min(m.data.dim().0 - 1);
        let mx = (i1p.x.round() as usize).min(m.data.dim().1 - 1);
        if !m.data[(my, mx)] {
            continue;
        }
        let (dx, _) = bilinear_sample_scalar(&dx_field, i1p.x, i1p.y);
        let (dy, _) = bilinear_sample_scalar(&dy_field, i1p.x, i1p.y);
        let warped = Vector2::new(i1p.x + dx, i1p.y + dy);
        let r = (warped - i2p).norm();
        sum += huber(r, delta);
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Combines the component losses into a report; the total is
/// `l_img + l_match + l_pose + lambda_tri * l_tri`.
pub fn total_loss(
    l_img: f64,
    l_match: f64,
    l_rot: f64,
    l_trans: f64,
    l_tri: f64,
    lambda_tri: f64,
) -> LossReport {
    let l_pose = l_rot + l_trans;
    LossReport {
        l_img,
        l_match,
        l_rot,
        l_trans,
        l_pose,
        l_tri,
        lambda_tri,
        l_total: l_img + l_match + l_pose + lambda_tri * l_tri,
    }
}

/// Max over coordinates of the relative error between the analytic gradient
/// and central finite differences with step `h`.
pub fn grad_check<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], grad: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), grad.len(), "gradient length must match input length");
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / grad[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

/// Analytic gradient of `geodesic_distance(rot6d_to_rotation(r6), r_gt)`
/// with respect to the six parameters, at non-degenerate points.
pub fn grad_geodesic_rot6d(r6: &Rot6D, r_gt: &Rotation) -> Result<[f64; 6]> {
    let na = r6.a.norm();
    if na <= 1e-12 {
        return Err(Error::DegenerateInput("6D rotation: first column near zero".into()));
    }
    let c1 = r6.a / na;
    let u = r6.b - c1 * r6.b.dot(&c1);
    let nu = u.norm();
    if nu <= 1e-12 * r6.b.norm().max(1.0) {
        return Err(Error::DegenerateInput("6D rotation: columns are parallel".into()));
    }
    let c2 = u / nu;
    let c3 = c1.cross(&c2);

    let r = r_gt.matrix();
    let r_hat = Matrix3::from_columns(&[c1, c2, c3]);
    let x = (((r_hat.transpose() * r).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    if 1.0 - x * x <= 1e-12 {
        return Err(Error::DegenerateInput(
            "geodesic gradient undefined at zero or pi angle".into(),
        ));
    }
    // dL/dR_hat = -R / (2 sqrt(1 - x^2)); columns are the per-column grads.
    let g_mat = -r / (2.0 * (1.0 - x * x).sqrt());
    let g1: Vector3<f64> = g_mat.column(0).into();
    let g2: Vector3<f64> = g_mat.column(1).into();
    let g3: Vector3<f64> = g_mat.column(2).into();

    // Backprop through c3 = c1 x c2.
    let mut d_c2 = g2 - c1.cross(&g3);
    let mut d_c1 = g1 + c2.cross(&g3);
    // c2 = u / |u|.
    let d_u = (d_c2 - c2 * c2.dot(&d_c2)) / nu;
    d_c2 = Vector3::zeros();
    let _ = d_c2;
    // u = b - (b . c1) c1.
    let d_b = d_u - c1 * c1.dot(&d_u);
    d_c1 += -(r6.b * c1.dot(&d_u) + d_u * r6.b.dot(&c1));
    // c1 = a / |a|.
    let d_a = (d_c1 - c1 * c1.dot(&d_c1)) / na;
    Ok([d_a.x, d_a.y, d_a.z, d_b.x, d_b.y, d_b.z])
}

/// Gradient of the squared translation distance with respect to the
/// estimated translation: `2 (t_est - t_gt)`.
pub fn grad_translation_l2(t_est: &Translation, t_gt: &Translation) -> [f64; 3] {
    let d = 2.0 * (t_est.0 - t_gt.0);
    [d.x, d.y, d.z]
}
