//! Shared helpers for the integration suites: independent dense-loop oracles
//! for the CRATE operators (written with explicit scalar loops, no shared code
//! with the library implementations) and finite-difference gradient checking.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ccdepth::params::{Binder, ParamStore};
use ccdepth::selfsup_loss::{multi_scale_loss_t, CameraIntrinsics, LossConfig, ReferenceVars};
use ccdepth::tape::{Tape, Var};
use ccdepth::trainer::Models;

// ---------------------------------------------------------------------------
// dense-loop oracles
// ---------------------------------------------------------------------------

/// log det of a symmetric positive-definite matrix via an explicit Cholesky
/// factorization on nested Vecs.
pub fn oracle_logdet_spd(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(s > 0.0, "matrix not positive definite");
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    (0..n).map(|i| 2.0 * l[i][i].ln()).sum()
}

/// R(Z) = 1/2 logdet(I + d/(N eps^2) Z Z^T), entirely with scalar loops.
pub fn oracle_coding_rate(z: &Array2<f64>, eps: f64) -> f64 {
    let (d, n) = z.dim();
    let c = d as f64 / (n as f64 * eps * eps);
    let mut m = vec![vec![0.0f64; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for t in 0..n {
                s += z[[i, t]] * z[[j, t]];
            }
            m[i][j] = c * s + if i == j { 1.0 } else { 0.0 };
        }
    }
    0.5 * oracle_logdet_spd(&m)
}

/// Rate reduction R(Z) - sum_k R(U_k^T Z).
pub fn oracle_rate_reduction(z: &Array2<f64>, bases: &[Array2<f64>], eps: f64) -> f64 {
    let mut total = oracle_coding_rate(z, eps);
    for u in bases {
        let (d, p) = u.dim();
        let n = z.ncols();
        let mut proj = Array2::<f64>::zeros((p, n));
        for a in 0..p {
            for t in 0..n {
                let mut s = 0.0;
                for i in 0..d {
                    s += u[[i, a]] * z[[i, t]];
                }
                proj[[a, t]] = s;
            }
        }
        total -= oracle_coding_rate(&proj, eps);
    }
    total
}

/// SSA(Z | U_k) = (U_k^T Z) softmax((U_k^T Z)^T (U_k^T Z)), column softmax.
pub fn oracle_ssa(z: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    let (d, n) = z.dim();
    let p = u.ncols();
    let mut proj = vec![vec![0.0f64; n]; p];
    for a in 0..p {
        for t in 0..n {
            let mut s = 0.0;
            for i in 0..d {
                s += u[[i, a]] * z[[i, t]];
            }
            proj[a][t] = s;
        }
    }
    // gram[i][j] = <proj_i, proj_j> (token i vs token j)
    let mut gram = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for a in 0..p {
                s += proj[a][i] * proj[a][j];
            }
            gram[i][j] = s;
        }
    }
    // softmax over each column j
    let mut attn = vec![vec![0.0f64; n]; n];
    for j in 0..n {
        let mx = (0..n).map(|i| gram[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for i in 0..n {
            denom += (gram[i][j] - mx).exp();
        }
        for i in 0..n {
            attn[i][j] = (gram[i][j] - mx).exp() / denom;
        }
    }
    let mut out = Array2::<f64>::zeros((p, n));
    for a in 0..p {
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                s += proj[a][i] * attn[i][j];
            }
            out[[a, j]] = s;
        }
    }
    out
}

/// MSSA(Z | U_[K]) = p/(N eps^2) sum_k U_k SSA(Z | U_k).
pub fn oracle_mssa(z: &Array2<f64>, bases: &[Array2<f64>], eps: f64) -> Array2<f64> {
    let (d, n) = z.dim();
    let p = bases[0].ncols();
    let w = p as f64 / (n as f64 * eps * eps);
    let mut out = Array2::<f64>::zeros((d, n));
    for u in bases {
        let s = oracle_ssa(z, u);
        for i in 0..d {
            for t in 0..n {
                let mut acc = 0.0;
                for a in 0..p {
                    acc += u[[i, a]] * s[[a, t]];
                }
                out[[i, t]] += acc;
            }
        }
    }
    out.mapv_inplace(|v| v * w);
    out
}

/// Z + kappa p/(N eps^2) (MSSA(Z) - Z), with the MSSA operator itself carrying
/// its own p/(N eps^2) factor (the written composition, compounded).
pub fn oracle_mssa_residual_step(
    z: &Array2<f64>,
    bases: &[Array2<f64>],
    kappa: f64,
    eps: f64,
) -> Array2<f64> {
    let (d, n) = z.dim();
    let p = bases[0].ncols();
    let coeff = kappa * p as f64 / (n as f64 * eps * eps);
    let m = oracle_mssa(z, bases, eps);
    let mut out = Array2::<f64>::zeros((d, n));
    for i in 0..d {
        for t in 0..n {
            out[[i, t]] = (1.0 - coeff) * z[[i, t]] + coeff * m[[i, t]];
        }
    }
    out
}

/// ReLU(Z + eta D^T (Z - D Z) - eta lambda1).
pub fn oracle_ista_step(z: &Array2<f64>, dict: &Array2<f64>, eta: f64, lambda1: f64) -> Array2<f64> {
    let (d, n) = z.dim();
    let mut dz = vec![vec![0.0f64; n]; d];
    for i in 0..d {
        for t in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                s += dict[[i, j]] * z[[j, t]];
            }
            dz[i][t] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((d, n));
    for i in 0..d {
        for t in 0..n {
            let mut corr = 0.0;
            for j in 0..d {
                corr += dict[[j, i]] * (z[[j, t]] - dz[j][t]);
            }
            let v = z[[i, t]] + eta * corr - eta * lambda1;
            out[[i, t]] = v.max(0.0);
        }
    }
    out
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(1e-6)
}

/// Check analytic gradients of a scalar-valued tape program against central
/// finite differences on `coords_per_input` random coordinates of every input.
///
/// `f` must rebuild the same computation from the leaf handles it is given so
/// the forward value can be re-evaluated at perturbed inputs.
pub fn check_grads<F>(inputs: &[ArrayD<f64>], f: F, coords_per_input: usize, tol: f64, rng: &mut ChaCha8Rng)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| t.leaf(a.clone())).collect();
        let out = f(&mut t, &vars);
        t.scalar_value(out)
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone())).collect();
    let out = f(&mut t, &vars);
    t.backward(out);
    let analytic: Vec<ArrayD<f64>> = vars.iter().map(|&v| t.grad(v)).collect();

    for (idx, a) in inputs.iter().enumerate() {
        let n = a.len();
        for _ in 0..coords_per_input.min(n) {
            let flat = rng.gen_range(0..n);
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let p = plus[idx].as_slice_mut().unwrap();
                p[flat] += FD_STEP;
                let m = minus[idx].as_slice_mut().unwrap();
                m[flat] -= FD_STEP;
            }
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            // gradients may be non-contiguous views; index in logical order
            let ana = analytic[idx].iter().nth(flat).copied().unwrap();
            // absolute floor absorbs roundoff when both sides are ~0 (e.g. a
            // coordinate sitting in a dead ReLU region)
            assert!(
                rel_err(ana, fd) <= tol || (ana - fd).abs() < 5e-7,
                "input {idx} coord {flat}: analytic {ana:.10e} vs fd {fd:.10e}"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// full-network loss assembly (mirrors the trainer's per-sample graph)
// ---------------------------------------------------------------------------

/// Build the complete training objective for one triplet on a fresh tape and
/// return (tape, binder, total-loss var).
pub fn build_triplet_loss(
    models: &Models,
    store: &ParamStore,
    target: &ndarray::Array3<f64>,
    prev: &ndarray::Array3<f64>,
    next: &ndarray::Array3<f64>,
    k: &CameraIntrinsics,
    loss_cfg: &LossConfig,
) -> (Tape, Binder, Var) {
    let mut t = Tape::new();
    let mut bind = Binder::new(store);
    let target_v = t.leaf3(target.clone());
    let disparities = models
        .depth
        .forward_t(&mut t, store, &mut bind, target_v, None)
        .unwrap();
    let mut refs = Vec::with_capacity(2);
    for r in [prev, next] {
        let pair = ndarray::concatenate(ndarray::Axis(0), &[target.view(), r.view()]).unwrap();
        let pair_v = t.leaf3(pair);
        let (axis, trans) = models.pose.forward_t(&mut t, store, &mut bind, pair_v).unwrap();
        let image = t.leaf3(r.clone());
        refs.push(ReferenceVars {
            image,
            axis_angle: axis,
            translation: trans,
        });
    }
    let refs: [ReferenceVars; 2] = refs.try_into().ok().unwrap();
    let (total, _) =
        multi_scale_loss_t(&mut t, &disparities, target_v, &refs, k, loss_cfg).unwrap();
    (t, bind, total)
}

// ---------------------------------------------------------------------------
// op-level and full-network gradient-check bodies (shared with acceptance)
// ---------------------------------------------------------------------------

use ccdepth::crate_core::{
    crate_module_forward_t, ista_step_t, mssa_residual_step_t, mssa_t, patchify_embed_t, ssa_t,
    unpatchify_project_t, CrateModuleVars, CrateScalars, MssaScaleMode,
};
use ccdepth::kitti_data::{make_toy_dataset, ToyConfig};
use ccdepth::selfsup_loss::{
    disp_to_depth_t, photometric_error_t, smoothness_loss_t, ssim_t, warp_reference_t,
};
use ccdepth::trainer::{self, TrainConfig};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Random weights fixed per call site so "sum of weighted outputs" exercises
/// every output coordinate with distinct upstream gradients.
fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = t.value(v).shape().to_vec();
    let mut r = rng(seed);
    let w = t.leaf(rand_arr(&mut r, &shape));
    let prod = t.mul(v, w);
    t.sum(prod)
}

pub fn gc_ssa(coords: usize) {
    let mut r = rng(11);
    let z = rand_arr(&mut r, &[4, 5]);
    let u = rand_arr(&mut r, &[4, 2]);
    check_grads(
        &[z, u],
        |t, v| {
            let out = ssa_t(t, v[0], v[1]);
            weighted_sum(t, out, 101)
        },
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_mssa(coords: usize) {
    let mut r = rng(12);
    let z = rand_arr(&mut r, &[4, 5]);
    let u0 = rand_arr(&mut r, &[4, 2]);
    let u1 = rand_arr(&mut r, &[4, 2]);
    check_grads(
        &[z, u0, u1],
        |t, v| {
            let out = mssa_t(t, v[0], &[v[1], v[2]], 0.7, true);
            weighted_sum(t, out, 102)
        },
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_mssa_residual_step(coords: usize) {
    let mut r = rng(13);
    let z = rand_arr(&mut r, &[4, 5]);
    let u0 = rand_arr(&mut r, &[4, 2]);
    let u1 = rand_arr(&mut r, &[4, 2]);
    check_grads(
        &[z, u0, u1],
        |t, v| {
            let out =
                mssa_residual_step_t(t, v[0], &[v[1], v[2]], 0.8, 0.6, MssaScaleMode::AsWritten);
            weighted_sum(t, out, 103)
        },
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_ista_step(coords: usize) {
    let mut r = rng(14);
    let (eta, lam) = (0.2, 0.1);
    let z = rand_arr(&mut r, &[4, 5]);
    let d = rand_arr(&mut r, &[4, 4]);
    check_grads(
        &[z, d],
        |t, v| {
            let out = ista_step_t(t, v[0], v[1], eta, lam);
            weighted_sum(t, out, 104)
        },
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_crate_module(coords: usize) {
    let mut r = rng(15);
    let d = 6;
    let z = rand_arr(&mut r, &[d, 5]);
    let u0 = rand_arr(&mut r, &[d, 3]);
    let u1 = rand_arr(&mut r, &[d, 3]);
    let dict = rand_arr(&mut r, &[d, d]);
    let g1 = rand_arr(&mut r, &[d, 1]);
    let b1 = rand_arr(&mut r, &[d, 1]);
    let g2 = rand_arr(&mut r, &[d, 1]);
    let b2 = rand_arr(&mut r, &[d, 1]);
    check_grads(
        &[z, u0, u1, dict, g1, b1, g2, b2],
        |t, v| {
            let m = CrateModuleVars {
                bases: vec![v[1], v[2]],
                dict: v[3],
                ln1_gain: v[4],
                ln1_bias: v[5],
                ln2_gain: v[6],
                ln2_bias: v[7],
                scalars: CrateScalars {
                    kappa: 0.5,
                    eps: 0.7,
                    eta: 0.2,
                    lambda1: 0.05,
                    pre_norm: true,
                    scale_mode: MssaScaleMode::AsWritten,
                },
            };
            let out = crate_module_forward_t(t, v[0], &m);
            weighted_sum(t, out, 105)
        },
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_patchify_unpatchify(coords: usize) {
    let mut r = rng(16);
    let x = rand_arr(&mut r, &[2, 4, 6]);
    let d = 8; // patch 2, C=2 -> 8 rows per patch
    let proj_w = rand_arr(&mut r, &[d, 8]);
    let proj_b = rand_arr(&mut r, &[d, 1]);
    let inv_w = rand_arr(&mut r, &[3, d]); // 3 out channels at patch 1
    let inv_b = rand_arr(&mut r, &[3, 1]);
    check_grads(
        &[x, proj_w, proj_b, inv_w, inv_b],
        |t, v| {
            let z = patchify_embed_t(t, v[0], v[1], v[2], 2).unwrap();
            let y = unpatchify_project_t(t, z, (2, 3), v[3], v[4], 1).unwrap();
            weighted_sum(t, y, 106)
        },
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_ssim_and_photometric(coords: usize) {
    let mut r = rng(17);
    let a = ArrayD::from_shape_fn(IxDyn(&[3, 6, 8]), |_| r.gen_range(0.1..0.9));
    let b = ArrayD::from_shape_fn(IxDyn(&[3, 6, 8]), |_| r.gen_range(0.1..0.9));
    check_grads(
        &[a.clone(), b.clone()],
        |t, v| {
            let s = ssim_t(t, v[0], v[1]);
            weighted_sum(t, s, 107)
        },
        coords,
        1e-4,
        &mut r,
    );
    check_grads(
        &[a, b],
        |t, v| {
            let pe = photometric_error_t(t, v[0], v[1], 0.85);
            weighted_sum(t, pe, 108)
        },
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_smoothness(coords: usize) {
    let mut r = rng(18);
    let disp = ArrayD::from_shape_fn(IxDyn(&[5, 7]), |_| r.gen_range(0.1..0.9));
    let img = ArrayD::from_shape_fn(IxDyn(&[3, 5, 7]), |_| r.gen_range(0.0..1.0));
    check_grads(
        &[disp, img],
        |t, v| smoothness_loss_t(t, v[0], v[1]),
        coords,
        1e-4,
        &mut r,
    );
}

pub fn gc_disp_to_depth(coords: usize) {
    let mut r = rng(19);
    let disp = ArrayD::from_shape_fn(IxDyn(&[4, 6]), |_| r.gen_range(0.05..0.95));
    check_grads(
        &[disp],
        |t, v| {
            let d = disp_to_depth_t(t, v[0], 0.1, 100.0);
            weighted_sum(t, d, 109)
        },
        coords,
        1e-4,
        &mut r,
    );
}

/// Rodrigues rotation of `p` by axis-angle `a`, written with plain loops.
pub fn rodrigues_rotate(a: &[f64; 3], p: &[f64; 3]) -> [f64; 3] {
    let theta = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if theta < 1e-12 {
        return *p;
    }
    let k = [a[0] / theta, a[1] / theta, a[2] / theta];
    let cross = [
        k[1] * p[2] - k[2] * p[1],
        k[2] * p[0] - k[0] * p[2],
        k[0] * p[1] - k[1] * p[0],
    ];
    let dot = k[0] * p[0] + k[1] * p[1] + k[2] * p[2];
    let (s, c) = (theta.sin(), theta.cos());
    [
        p[0] * c + cross[0] * s + k[0] * dot * (1.0 - c),
        p[1] * c + cross[1] * s + k[1] * dot * (1.0 - c),
        p[2] * c + cross[2] * s + k[2] * dot * (1.0 - c),
    ]
}

pub fn gc_warp(coords: usize) {
    let mut r = rng(20);
    let (h, w) = (8usize, 10usize);
    let k = CameraIntrinsics {
        fx: 6.0,
        fy: 6.0,
        cx: 4.5,
        cy: 3.5,
        width: w,
        height: h,
    };
    // smooth reference image so grid-sample interpolation is well-conditioned
    let ref_img = ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| {
        let (c, y, x) = (ix[0] as f64, ix[1] as f64, ix[2] as f64);
        0.5 + 0.3 * ((x * 0.7 + c) * 0.9).sin() * (y * 0.5).cos()
    });
    let depth = ArrayD::from_shape_fn(IxDyn(&[h, w]), |_| r.gen_range(2.0..4.0));
    let axis = [0.02, -0.03, 0.01];
    let trans = [0.25, -0.22, 0.05];

    // kink avoidance: bilinear sampling is only piecewise smooth, so restrict
    // the objective to pixels whose sample point sits well inside a pixel
    // cell and away from the image border (replicating the projection with
    // plain loops)
    let mut weights = ArrayD::<f64>::zeros(IxDyn(&[3, h, w]));
    let mut n_safe = 0;
    for y in 0..h {
        for x in 0..w {
            let d = depth[[y, x]];
            let p = [
                (x as f64 - k.cx) / k.fx * d,
                (y as f64 - k.cy) / k.fy * d,
                d,
            ];
            let rp = rodrigues_rotate(&axis, &p);
            let cam = [rp[0] + trans[0], rp[1] + trans[1], rp[2] + trans[2]];
            let gx = k.fx * cam[0] / cam[2] + k.cx;
            let gy = k.fy * cam[1] / cam[2] + k.cy;
            let safe = cam[2] > 0.1
                && (1.0..=(w as f64 - 2.0)).contains(&gx)
                && (1.0..=(h as f64 - 2.0)).contains(&gy)
                && (0.2..=0.8).contains(&(gx - gx.floor()))
                && (0.2..=0.8).contains(&(gy - gy.floor()));
            if safe {
                n_safe += 1;
                for c in 0..3 {
                    weights[[c, y, x]] = r.gen_range(0.2..1.0);
                }
            }
        }
    }
    assert!(n_safe >= 8, "only {n_safe} kink-safe pixels");

    let axis_a = ArrayD::from_shape_vec(IxDyn(&[3]), axis.to_vec()).unwrap();
    let trans_a = ArrayD::from_shape_vec(IxDyn(&[3]), trans.to_vec()).unwrap();
    check_grads(
        &[ref_img, depth, axis_a, trans_a],
        |t, v| {
            let (recon, _) = warp_reference_t(t, v[0], v[1], v[2], v[3], &k).unwrap();
            let wv = t.leaf(weights.clone());
            let masked = t.mul(recon, wv);
            t.sum(masked)
        },
        coords,
        1e-4,
        &mut r,
    );
}

/// Run every op-level gradient check once.
pub fn run_all_op_gradchecks(coords: usize) {
    gc_ssa(coords);
    gc_mssa(coords);
    gc_mssa_residual_step(coords);
    gc_ista_step(coords);
    gc_crate_module(coords);
    gc_patchify_unpatchify(coords);
    gc_ssim_and_photometric(coords);
    gc_smoothness(coords);
    gc_disp_to_depth(coords);
    gc_warp(coords);
}

/// Full-network check on a 64x32 toy input: the analytic gradient of the
/// complete multi-scale objective matches finite differences on parameters
/// drawn from every stage type (encoder CNN, encoder CRATE, decoder CRATE,
/// decoder CNN, disparity head, pose trunk, pose head).
pub fn full_network_fd_check(coords_per_stage: usize) {
    let mut tc = TrainConfig::toy();
    tc.network.input_width = 64;
    tc.network.input_height = 32;
    tc.network.channels = [4, 6, 8];
    tc.network.crate_dims = [12, 18];
    tc.network.num_scales = 2;
    let mut store = ParamStore::new();
    let models = trainer::build_models(&mut store, &tc).unwrap();

    let toy = ToyConfig {
        width: 64,
        height: 32,
        scenes: 1,
        ..ToyConfig::default()
    };
    let scene = make_toy_dataset(&toy).remove(0);
    let trip = scene.triplet;
    // the auto-mask is deliberately detached (a binary value-level quantity);
    // finite differences would see its flips, so gradcheck without it
    let loss_cfg = LossConfig {
        automask: false,
        ..LossConfig::default()
    };

    let eval = |s: &ParamStore| -> f64 {
        let (t, _, total) = build_triplet_loss(
            &models, s, &trip.target, &trip.prev, &trip.next, &trip.intrinsics, &loss_cfg,
        );
        t.scalar_value(total)
    };

    let (t, bind, total) = build_triplet_loss(
        &models,
        &store,
        &trip.target,
        &trip.prev,
        &trip.next,
        &trip.intrinsics,
        &loss_cfg,
    );
    let mut tape = t;
    tape.backward(total);
    let grads = bind.grads(&tape);
    let grad_by_name: std::collections::HashMap<String, ArrayD<f64>> = grads
        .into_iter()
        .map(|(id, g)| (store.name(id).to_string(), g))
        .collect();

    let stage_prefixes = [
        "depth.enc1.", // encoder CNN
        "depth.enc4.", // encoder CRATE
        "depth.dec6.", // decoder CRATE
        "depth.dec9.", // decoder CNN
        "depth.head",  // disparity heads
        "pose.conv",   // pose trunk
        "pose.head",   // pose head
    ];
    // a small step keeps the finite difference on one side of the piecewise
    // boundaries (ReLU, pooling argmax) that a network this deep crosses often
    let h = 1e-7;
    let mut r = rng(21);
    for prefix in stage_prefixes {
        let names: Vec<String> = store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, n, _)| n.to_string())
            .collect();
        assert!(!names.is_empty(), "no parameters under {prefix}");
        for _ in 0..coords_per_stage {
            let name = &names[r.gen_range(0..names.len())];
            let id = store.id(name).unwrap();
            let n = store.value(id).len();
            let coord = r.gen_range(0..n);
            let mut s2 = ParamStore::new();
            for (_, nm, v) in store.iter() {
                s2.define(nm, v.clone()).unwrap();
            }
            let id2 = s2.id(name).unwrap();
            s2.value_mut(id2).as_slice_mut().unwrap()[coord] += h;
            let fp = eval(&s2);
            s2.value_mut(id2).as_slice_mut().unwrap()[coord] -= 2.0 * h;
            let fm = eval(&s2);
            let fd = (fp - fm) / (2.0 * h);
            let ana = grad_by_name[name].iter().nth(coord).copied().unwrap();
            let denom = ana.abs().max(fd.abs()).max(1e-6);
            let rel = (ana - fd).abs() / denom;
            assert!(
                rel <= 1e-3 || (ana - fd).abs() < 5e-7,
                "{name}[{coord}]: analytic {ana:.8e} vs fd {fd:.8e} (rel {rel:.2e})"
            );
        }
    }
}
