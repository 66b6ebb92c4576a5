//! Self-supervised training objective: view synthesis via rigid warping,
//! SSIM + L1 photometric error, auto-masking of stationary pixels, edge-aware
//! smoothness, and dyadic multi-scale weighting.

use ndarray::{Array2, Array3, Array4, Array1};
use serde::{Deserialize, Serialize};

use crate::error::{CcError, Result};
use crate::pose_net::{rotation_from_axis_angle_t, RelativePose};
use crate::tape::{grid_sample_validity, PadMode, Tape, Var};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_ALPHA: f64 = 0.85;
pub const DEFAULT_SMOOTHNESS_LAMBDA: f64 = 0.001;
pub const DEFAULT_MIN_DEPTH: f64 = 0.1;
pub const DEFAULT_MAX_DEPTH: f64 = 100.0;

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CcError::Domain("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(CcError::Domain(format!(
                "cx {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CcError::Domain(format!(
                "cy {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics after resizing the image by (sx, sy).
    pub fn scaled(&self, sx: f64, sy: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width: (self.width as f64 * sx).round() as usize,
            height: (self.height as f64 * sy).round() as usize,
        }
    }
}

/// Per-pixel metric depth bounded to [min_depth, max_depth].
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub data: Array2<f64>,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl DepthMap {
    pub fn new(data: Array2<f64>, min_depth: f64, max_depth: f64) -> Result<Self> {
        if data
            .iter()
            .any(|&v| !v.is_finite() || v < min_depth - 1e-9 || v > max_depth + 1e-9)
        {
            return Err(CcError::Domain(format!(
                "depth values outside [{min_depth}, {max_depth}]"
            )));
        }
        Ok(DepthMap {
            data,
            min_depth,
            max_depth,
        })
    }
}

/// Aggregation over the two reference reconstructions in the photometric loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhotometricAgg {
    Sum,
    Min,
}

/// Where the coarse-scale losses are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossAtScale {
    Upsampled,
    Native,
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub smoothness_lambda: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub photometric_agg: PhotometricAgg,
    pub loss_at_scale: LossAtScale,
    pub automask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            smoothness_lambda: DEFAULT_SMOOTHNESS_LAMBDA,
            min_depth: DEFAULT_MIN_DEPTH,
            max_depth: DEFAULT_MAX_DEPTH,
            photometric_agg: PhotometricAgg::Sum,
            loss_at_scale: LossAtScale::Upsampled,
            automask: true,
        }
    }
}

/// Loss components of one training example.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub photometric: f64,
    pub smoothness: f64,
    pub per_scale: Vec<f64>,
    pub total: f64,
    pub mask_coverage: f64,
}

// ---- disparity to depth ----

/// depth = 1 / (1/max + disp (1/min - 1/max)); monotone decreasing in disp.
pub fn disp_to_depth_t(t: &mut Tape, disp: Var, min_depth: f64, max_depth: f64) -> Var {
    let a = 1.0 / max_depth;
    let b = 1.0 / min_depth - 1.0 / max_depth;
    let scaled = t.scale(disp, b);
    let inv = t.offset(scaled, a);
    let one = t.scalar(1.0);
    t.div(one, inv)
}

pub fn disp_to_depth(disp: &Array2<f64>, min_depth: f64, max_depth: f64) -> Result<DepthMap> {
    if !(0.0 < min_depth && min_depth < max_depth) {
        return Err(CcError::Domain(format!(
            "need 0 < min_depth < max_depth, got {min_depth}, {max_depth}"
        )));
    }
    if disp.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
        return Err(CcError::Domain("disparity outside (0, 1)".into()));
    }
    let a = 1.0 / max_depth;
    let b = 1.0 / min_depth - 1.0 / max_depth;
    let data = disp.mapv(|d| 1.0 / (a + d * b));
    DepthMap::new(data, min_depth, max_depth)
}

// ---- warping ----

/// Differentiable rigid warp: back-project each target pixel at its predicted
/// depth, transform by (axis_angle, translation), project with K, and sample
/// the reference image bilinearly. Returns the reconstruction and a constant
/// validity mask (1 where the sample landed in-frustum and in-bounds).
pub fn warp_reference_t(
    t: &mut Tape,
    ref_image: Var,
    depth: Var,
    axis_angle: Var,
    translation: Var,
    k: &CameraIntrinsics,
) -> Result<(Var, Array2<f64>)> {
    k.validate()?;
    let dshape = t.value(depth).shape().to_vec();
    let (h, w) = (dshape[0], dshape[1]);
    let rshape = t.value(ref_image).shape().to_vec();
    if rshape[1] != h || rshape[2] != w {
        return Err(CcError::Shape(format!(
            "reference {rshape:?} does not match depth {h}x{w}"
        )));
    }

    // normalized ray directions (constant per pixel)
    let ray_x = Array2::from_shape_fn((h, w), |(_, j)| (j as f64 - k.cx) / k.fx);
    let ray_y = Array2::from_shape_fn((h, w), |(i, _)| (i as f64 - k.cy) / k.fy);
    let rx = t.leaf2(ray_x);
    let ry = t.leaf2(ray_y);

    let px = t.mul(rx, depth);
    let py = t.mul(ry, depth);
    let pz = depth;

    let rot = rotation_from_axis_angle_t(t, axis_angle);
    let r = |t: &mut Tape, i: usize, j: usize| t.index_scalar(rot, i * 3 + j);
    let tcomp = |t: &mut Tape, i: usize| t.index_scalar(translation, i);

    let mut cam = Vec::with_capacity(3);
    for i in 0..3 {
        let r0 = r(t, i, 0);
        let r1 = r(t, i, 1);
        let r2 = r(t, i, 2);
        let ti = tcomp(t, i);
        let a = t.mul(px, r0);
        let b = t.mul(py, r1);
        let c = t.mul(pz, r2);
        let ab = t.add(a, b);
        let abc = t.add(ab, c);
        cam.push(t.add(abc, ti));
    }
    let (xc, yc, zc) = (cam[0], cam[1], cam[2]);

    // keep the divisor strictly positive so behind-camera pixels stay finite;
    // they are excluded by the validity mask below
    let z_shift = t.offset(zc, -1e-6);
    let z_pos = t.relu(z_shift);
    let z_safe = t.offset(z_pos, 1e-6);

    let xn = t.div(xc, z_safe);
    let yn = t.div(yc, z_safe);
    let uxs = t.scale(xn, k.fx);
    let uys = t.scale(yn, k.fy);
    let gx = t.offset(uxs, k.cx);
    let gy = t.offset(uys, k.cy);

    let recon = t.grid_sample(ref_image, gx, gy);

    let gxv = t.value2(gx);
    let gyv = t.value2(gy);
    let zv = t.value2(zc);
    let mut validity = grid_sample_validity(&gxv, &gyv, h, w);
    for ((i, j), v) in validity.indexed_iter_mut() {
        if zv[[i, j]] <= 1e-3 {
            *v = 0.0;
        }
    }
    Ok((recon, validity))
}

/// Non-tape convenience wrapper.
pub fn warp_reference(
    ref_image: &Array3<f64>,
    depth: &DepthMap,
    pose: &RelativePose,
    k: &CameraIntrinsics,
) -> Result<(Array3<f64>, Array2<f64>)> {
    let mut t = Tape::new();
    let r = t.leaf3(ref_image.clone());
    let d = t.leaf2(depth.data.clone());
    let a = t.leaf1(Array1::from_vec(pose.axis_angle.to_vec()));
    let tr = t.leaf1(Array1::from_vec(pose.translation.to_vec()));
    let (recon, validity) = warp_reference_t(&mut t, r, d, a, tr, k)?;
    Ok((t.value3(recon), validity))
}

// ---- SSIM and photometric error ----

fn box3_filter(t: &mut Tape, x: Var) -> Var {
    let c = t.value(x).shape()[0];
    let mut w = Array4::<f64>::zeros((c, c, 3, 3));
    for ci in 0..c {
        for ki in 0..3 {
            for kj in 0..3 {
                w[[ci, ci, ki, kj]] = 1.0 / 9.0;
            }
        }
    }
    let wv = t.leaf(w.into_dyn());
    let b = t.leaf1(Array1::zeros(c));
    t.conv2d(x, wv, b, PadMode::Reflect, 1)
}

/// Per-channel SSIM map with 3x3 mean/variance windows (reflect-padded, so the
/// output has the input's shape).
pub fn ssim_t(t: &mut Tape, a: Var, b: Var) -> Var {
    let mu_a = box3_filter(t, a);
    let mu_b = box3_filter(t, b);
    let aa = t.mul(a, a);
    let bb = t.mul(b, b);
    let ab = t.mul(a, b);
    let e_aa = box3_filter(t, aa);
    let e_bb = box3_filter(t, bb);
    let e_ab = box3_filter(t, ab);
    let mu_aa = t.mul(mu_a, mu_a);
    let mu_bb = t.mul(mu_b, mu_b);
    let mu_ab = t.mul(mu_a, mu_b);
    let var_a = t.sub(e_aa, mu_aa);
    let var_b = t.sub(e_bb, mu_bb);
    let cov = t.sub(e_ab, mu_ab);

    let n1 = t.scale(mu_ab, 2.0);
    let n1c = t.offset(n1, SSIM_C1);
    let n2 = t.scale(cov, 2.0);
    let n2c = t.offset(n2, SSIM_C2);
    let num = t.mul(n1c, n2c);

    let d1 = t.add(mu_aa, mu_bb);
    let d1c = t.offset(d1, SSIM_C1);
    let d2 = t.add(var_a, var_b);
    let d2c = t.offset(d2, SSIM_C2);
    let den = t.mul(d1c, d2c);
    t.div(num, den)
}

pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<Array3<f64>> {
    if a.dim() != b.dim() {
        return Err(CcError::Shape(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut t = Tape::new();
    let av = t.leaf3(a.clone());
    let bv = t.leaf3(b.clone());
    let s = ssim_t(&mut t, av, bv);
    Ok(t.value3(s))
}

/// pe = alpha/2 (1 - SSIM) + (1 - alpha) |target - recon|, channel-averaged.
pub fn photometric_error_t(t: &mut Tape, target: Var, recon: Var, alpha: f64) -> Var {
    let s = ssim_t(t, target, recon);
    let s_mean = t.mean_axis0(s);
    let neg = t.neg(s_mean);
    let one_minus = t.offset(neg, 1.0);
    let ssim_term = t.scale(one_minus, alpha / 2.0);
    let diff = t.sub(target, recon);
    let l1 = t.abs(diff);
    let l1_mean = t.mean_axis0(l1);
    let l1_term = t.scale(l1_mean, 1.0 - alpha);
    t.add(ssim_term, l1_term)
}

pub fn photometric_error(target: &Array3<f64>, recon: &Array3<f64>, alpha: f64) -> Result<Array2<f64>> {
    if target.dim() != recon.dim() {
        return Err(CcError::Shape("photometric_error shape mismatch".into()));
    }
    let mut t = Tape::new();
    let a = t.leaf3(target.clone());
    let b = t.leaf3(recon.clone());
    let pe = photometric_error_t(&mut t, a, b, alpha);
    Ok(t.value2(pe))
}

/// Per-pixel photometric loss over both reference reconstructions.
pub fn photometric_loss_t(t: &mut Tape, pe1: Var, pe2: Var, agg: PhotometricAgg) -> Var {
    match agg {
        PhotometricAgg::Sum => t.add(pe1, pe2),
        PhotometricAgg::Min => t.min2(pe1, pe2),
    }
}

pub fn photometric_loss(
    target: &Array3<f64>,
    recon_prev: &Array3<f64>,
    recon_next: &Array3<f64>,
    alpha: f64,
    agg: PhotometricAgg,
) -> Result<Array2<f64>> {
    let pe1 = photometric_error(target, recon_prev, alpha)?;
    let pe2 = photometric_error(target, recon_next, alpha)?;
    Ok(match agg {
        PhotometricAgg::Sum => &pe1 + &pe2,
        PhotometricAgg::Min => {
            let mut m = pe1.clone();
            m.zip_mut_with(&pe2, |x, &y| *x = x.min(y));
            m
        }
    })
}

/// Binary stationary-pixel mask: 1 where the best reconstruction beats the
/// best unwarped reference (strict inequality), 0 otherwise.
pub fn auto_mask(
    pe_recon: &[Array2<f64>],
    pe_static: &[Array2<f64>],
) -> Array2<f64> {
    let shape = pe_recon[0].raw_dim();
    let mut mask = Array2::<f64>::zeros(shape);
    for ((i, j), m) in mask.indexed_iter_mut() {
        let best_recon = pe_recon
            .iter()
            .map(|p| p[[i, j]])
            .fold(f64::INFINITY, f64::min);
        let best_static = pe_static
            .iter()
            .map(|p| p[[i, j]])
            .fold(f64::INFINITY, f64::min);
        if best_recon < best_static {
            *m = 1.0;
        }
    }
    mask
}

// ---- smoothness ----

fn forward_diff_x(t: &mut Tape, v: Var) -> Var {
    let shape = t.value(v).shape().to_vec();
    match shape.len() {
        2 => {
            let (h, w) = (shape[0], shape[1]);
            let right: Vec<usize> = (0..h)
                .flat_map(|i| (1..w).map(move |j| i * w + j))
                .collect();
            let left: Vec<usize> = (0..h)
                .flat_map(|i| (0..w - 1).map(move |j| i * w + j))
                .collect();
            let r = t.gather(v, right, &[h, w - 1]);
            let l = t.gather(v, left, &[h, w - 1]);
            t.sub(r, l)
        }
        3 => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let right: Vec<usize> = (0..c)
                .flat_map(|ci| {
                    (0..h).flat_map(move |i| (1..w).map(move |j| ci * h * w + i * w + j))
                })
                .collect();
            let left: Vec<usize> = (0..c)
                .flat_map(|ci| {
                    (0..h).flat_map(move |i| (0..w - 1).map(move |j| ci * h * w + i * w + j))
                })
                .collect();
            let r = t.gather(v, right, &[c, h, w - 1]);
            let l = t.gather(v, left, &[c, h, w - 1]);
            t.sub(r, l)
        }
        _ => panic!("forward_diff_x expects 2D or 3D"),
    }
}

fn forward_diff_y(t: &mut Tape, v: Var) -> Var {
    let shape = t.value(v).shape().to_vec();
    match shape.len() {
        2 => {
            let (h, w) = (shape[0], shape[1]);
            let down: Vec<usize> = (1..h).flat_map(|i| (0..w).map(move |j| i * w + j)).collect();
            let up: Vec<usize> = (0..h - 1)
                .flat_map(|i| (0..w).map(move |j| i * w + j))
                .collect();
            let d = t.gather(v, down, &[h - 1, w]);
            let u = t.gather(v, up, &[h - 1, w]);
            t.sub(d, u)
        }
        3 => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let down: Vec<usize> = (0..c)
                .flat_map(|ci| {
                    (1..h).flat_map(move |i| (0..w).map(move |j| ci * h * w + i * w + j))
                })
                .collect();
            let up: Vec<usize> = (0..c)
                .flat_map(|ci| {
                    (0..h - 1).flat_map(move |i| (0..w).map(move |j| ci * h * w + i * w + j))
                })
                .collect();
            let d = t.gather(v, down, &[c, h - 1, w]);
            let u = t.gather(v, up, &[c, h - 1, w]);
            t.sub(d, u)
        }
        _ => panic!("forward_diff_y expects 2D or 3D"),
    }
}

/// Edge-aware smoothness on the mean-normalized disparity: forward
/// differences, image-gradient weights e^{-|dI|}, channel-averaged.
pub fn smoothness_loss_t(t: &mut Tape, disp: Var, image: Var) -> Var {
    let shape = t.value(disp).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let m = t.mean(disp);
    let m_guard = t.offset(m, 1e-7);
    let dstar = t.div(disp, m_guard);

    let mean_x = if w > 1 {
        let ddx = forward_diff_x(t, dstar);
        let ddx_abs = t.abs(ddx);
        let idx = forward_diff_x(t, image);
        let idx_abs = t.abs(idx);
        let idx_mean = t.mean_axis0(idx_abs);
        let neg_x = t.neg(idx_mean);
        let wx = t.exp(neg_x);
        let term_x = t.mul(ddx_abs, wx);
        t.mean(term_x)
    } else {
        t.scalar(0.0)
    };

    let mean_y = if h > 1 {
        let ddy = forward_diff_y(t, dstar);
        let ddy_abs = t.abs(ddy);
        let idy = forward_diff_y(t, image);
        let idy_abs = t.abs(idy);
        let idy_mean = t.mean_axis0(idy_abs);
        let neg_y = t.neg(idy_mean);
        let wy = t.exp(neg_y);
        let term_y = t.mul(ddy_abs, wy);
        t.mean(term_y)
    } else {
        t.scalar(0.0)
    };

    t.add(mean_x, mean_y)
}

pub fn smoothness_loss(disp: &Array2<f64>, image: &Array3<f64>) -> Result<f64> {
    if disp.dim() != (image.dim().1, image.dim().2) {
        return Err(CcError::Shape("smoothness_loss: spatial dims differ".into()));
    }
    let mut t = Tape::new();
    let d = t.leaf2(disp.clone());
    let i = t.leaf3(image.clone());
    let l = smoothness_loss_t(&mut t, d, i);
    Ok(t.scalar_value(l))
}

// ---- per-scale and total loss ----

/// L_n = mean over masked pixels of L_p + lambda L_s. The mean divides by the
/// count of mask-1 pixels; an empty mask contributes zero photometric term.
pub fn scale_loss_t(
    t: &mut Tape,
    lp: Var,
    mask: &Array2<f64>,
    smooth: Var,
    lambda: f64,
) -> (Var, Var) {
    let count = mask.sum();
    let photo = if count > 0.0 {
        let mv = t.leaf2(mask.clone());
        let masked = t.mul(lp, mv);
        let s = t.sum(masked);
        t.scale(s, 1.0 / count)
    } else {
        t.scalar(0.0)
    };
    let sm = t.scale(smooth, lambda);
    (t.add(photo, sm), photo)
}

pub fn scale_loss(masked_photometric_mean: f64, smoothness: f64, lambda: f64) -> f64 {
    masked_photometric_mean + lambda * smoothness
}

/// L = sum_n L_n / 2^{n-1} over up to four scales (scale 1 = full resolution).
pub fn total_loss(per_scale: &[f64]) -> Result<f64> {
    if per_scale.is_empty() || per_scale.len() > 4 {
        return Err(CcError::Domain(format!(
            "need 1..=4 scales, got {}",
            per_scale.len()
        )));
    }
    Ok(per_scale
        .iter()
        .enumerate()
        .map(|(n, l)| l / 2f64.powi(n as i32))
        .sum())
}

pub fn total_loss_t(t: &mut Tape, per_scale: &[Var]) -> Var {
    assert!(!per_scale.is_empty() && per_scale.len() <= 4);
    let mut acc = t.scale(per_scale[0], 1.0);
    for (n, &l) in per_scale.iter().enumerate().skip(1) {
        let wl = t.scale(l, 1.0 / 2f64.powi(n as i32));
        acc = t.add(acc, wl);
    }
    acc
}

/// One reference frame bound on the tape together with its predicted motion.
pub struct ReferenceVars {
    pub image: Var,
    pub axis_angle: Var,
    pub translation: Var,
}

/// Assemble the full multi-scale objective on the tape.
///
/// `disparities` are the raw sigmoid heads ordered fine-to-coarse (scale 1
/// first, full resolution). Returns the total-loss node plus a value-level
/// [`LossBundle`] for logging.
pub fn multi_scale_loss_t(
    t: &mut Tape,
    disparities: &[Var],
    target: Var,
    refs: &[ReferenceVars; 2],
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<(Var, LossBundle)> {
    let tshape = t.value(target).shape().to_vec();
    let (full_h, full_w) = (tshape[1], tshape[2]);

    // static (unwarped) photometric baselines for the auto-mask, full resolution
    let pe_static_full: Vec<Array2<f64>> = refs
        .iter()
        .map(|r| {
            let pe = photometric_error_t(t, target, r.image, cfg.alpha);
            t.value2(pe)
        })
        .collect();

    let mut per_scale_vars = Vec::new();
    let mut bundle = LossBundle::default();
    for (n, &disp_raw) in disparities.iter().enumerate() {
        let dshape = t.value(disp_raw).shape().to_vec();
        let (dh, dw) = (dshape[0], dshape[1]);

        // evaluation resolution for this scale
        let (target_n, refs_n, disp_n, k_n, h_n, w_n) = match cfg.loss_at_scale {
            LossAtScale::Upsampled => {
                let mut d = disp_raw;
                let mut cur_h = dh;
                // disparity comes as (H, W); upsample via a 1-channel reshape
                while cur_h < full_h {
                    let d3 = t.reshape(d, &[1, cur_h, t.value(d).shape().to_vec()[1]]);
                    let up = t.upsample2(d3);
                    let us = t.value(up).shape().to_vec();
                    d = t.reshape(up, &[us[1], us[2]]);
                    cur_h *= 2;
                }
                let rv: Vec<Var> = refs.iter().map(|r| r.image).collect();
                (target, rv, d, *k, full_h, full_w)
            }
            LossAtScale::Native => {
                let mut tgt = target;
                let mut rv: Vec<Var> = refs.iter().map(|r| r.image).collect();
                let mut cur_h = full_h;
                while cur_h > dh {
                    tgt = t.avgpool2(tgt);
                    rv = rv.iter().map(|&r| t.avgpool2(r)).collect();
                    cur_h /= 2;
                }
                let s = dh as f64 / full_h as f64;
                (tgt, rv, disp_raw, k.scaled(s, s), dh, dw)
            }
        };

        let depth = disp_to_depth_t(t, disp_n, cfg.min_depth, cfg.max_depth);

        let mut pe_vars = Vec::new();
        let mut validities = Vec::new();
        for (r, &rimg) in refs.iter().zip(refs_n.iter()) {
            let (recon, validity) =
                warp_reference_t(t, rimg, depth, r.axis_angle, r.translation, &k_n)?;
            let pe = photometric_error_t(t, target_n, recon, cfg.alpha);
            pe_vars.push(pe);
            validities.push(validity);
        }

        let lp = photometric_loss_t(t, pe_vars[0], pe_vars[1], cfg.photometric_agg);

        // mask: auto-mask (at this scale's resolution) intersected with both
        // warps' validity
        let pe_vals: Vec<Array2<f64>> = pe_vars.iter().map(|&p| t.value2(p)).collect();
        let pe_static: Vec<Array2<f64>> = if h_n == full_h {
            pe_static_full.clone()
        } else {
            refs_n
                .iter()
                .map(|&r| {
                    let pe = photometric_error_t(t, target_n, r, cfg.alpha);
                    t.value2(pe)
                })
                .collect()
        };
        let mut mask = if cfg.automask {
            auto_mask(&pe_vals, &pe_static)
        } else {
            Array2::ones((h_n, w_n))
        };
        for v in &validities {
            mask.zip_mut_with(v, |m, &x| *m *= x);
        }

        let smooth = smoothness_loss_t(t, disp_n, target_n);
        let (ln, photo) = scale_loss_t(t, lp, &mask, smooth, cfg.smoothness_lambda);
        per_scale_vars.push(ln);
        bundle.per_scale.push(t.scalar_value(ln));
        if n == 0 {
            bundle.photometric = t.scalar_value(photo);
            bundle.smoothness = t.scalar_value(smooth);
            bundle.mask_coverage = mask.sum() / (h_n * w_n) as f64;
        }
    }
    let total = total_loss_t(t, &per_scale_vars);
    bundle.total = t.scalar_value(total);
    Ok((total, bundle))
}
