//! Relative camera pose: 6-DoF axis-angle + translation, the Rodrigues
//! rotation construction, and the small CNN that regresses pose from a pair of
//! consecutive frames.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcError, Result};
use crate::linalg::randn;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tape::{PadMode, Tape, Var};

/// 6-DoF relative motion between consecutive frames.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RelativePose {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl RelativePose {
    pub fn identity() -> Self {
        RelativePose {
            axis_angle: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .axis_angle
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !ok {
            return Err(CcError::Numeric("pose has non-finite entries".into()));
        }
        Ok(())
    }

    /// 3x3 rotation matrix via the Rodrigues formula.
    pub fn rotation(&self) -> Array2<f64> {
        let [x, y, z] = self.axis_angle;
        let s = x * x + y * y + z * z;
        let theta = (s + 1e-24).sqrt();
        let (a, b) = (sinc(theta), cosc(theta));
        let mut r = Array2::eye(3);
        r[[0, 0]] += b * (-y * y - z * z);
        r[[0, 1]] = -a * z + b * x * y;
        r[[0, 2]] = a * y + b * x * z;
        r[[1, 0]] = a * z + b * x * y;
        r[[1, 1]] += b * (-x * x - z * z);
        r[[1, 2]] = -a * x + b * y * z;
        r[[2, 0]] = -a * y + b * x * z;
        r[[2, 1]] = a * x + b * y * z;
        r[[2, 2]] += b * (-x * x - y * y);
        r
    }

    /// Homogeneous 4x4 rigid transform.
    pub fn to_matrix(&self) -> Array2<f64> {
        let rot = self.rotation();
        let mut m = Array2::eye(4);
        for i in 0..3 {
            for j in 0..3 {
                m[[i, j]] = rot[[i, j]];
            }
            m[[i, 3]] = self.translation[i];
        }
        m
    }

    pub fn inverse(&self) -> RelativePose {
        let rot = self.rotation();
        let t = self.translation;
        // R^T and -R^T t; axis-angle of the inverse rotation is just negated
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(rot[[0, i]] * t[0] + rot[[1, i]] * t[1] + rot[[2, i]] * t[2]);
        }
        RelativePose {
            axis_angle: [-self.axis_angle[0], -self.axis_angle[1], -self.axis_angle[2]],
            translation: ti,
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn cosc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        0.5 - x * x / 24.0
    } else {
        (1.0 - x.cos()) / (x * x)
    }
}

/// Rodrigues rotation on the tape: axis-angle (3,) -> rotation (3, 3).
pub fn rotation_from_axis_angle_t(t: &mut Tape, r: Var) -> Var {
    let x = t.index_scalar(r, 0);
    let y = t.index_scalar(r, 1);
    let z = t.index_scalar(r, 2);
    let rr = t.mul(r, r);
    let s = t.sum(rr);
    let s_guard = t.offset(s, 1e-24);
    let theta = t.sqrt(s_guard);
    let a = t.sinc(theta);
    let b = t.cosc(theta);

    let xx = t.mul(x, x);
    let yy = t.mul(y, y);
    let zz = t.mul(z, z);
    let xy = t.mul(x, y);
    let xz = t.mul(x, z);
    let yz = t.mul(y, z);

    let az = t.mul(a, z);
    let ay = t.mul(a, y);
    let ax = t.mul(a, x);
    let bxy = t.mul(b, xy);
    let bxz = t.mul(b, xz);
    let byz = t.mul(b, yz);

    let mk_diag = |t: &mut Tape, m1: Var, m2: Var| {
        let sum = t.add(m1, m2);
        let nb = t.mul(b, sum);
        let neg = t.neg(nb);
        t.offset(neg, 1.0)
    };
    let r00 = mk_diag(t, yy, zz);
    let r11 = mk_diag(t, xx, zz);
    let r22 = mk_diag(t, xx, yy);

    let r01 = {
        let n = t.neg(az);
        t.add(n, bxy)
    };
    let r02 = t.add(ay, bxz);
    let r10 = t.add(az, bxy);
    let r12 = {
        let n = t.neg(ax);
        t.add(n, byz)
    };
    let r20 = {
        let n = t.neg(ay);
        t.add(n, bxz)
    };
    let r21 = t.add(ax, byz);

    let flat = t.concat_scalars(&[r00, r01, r02, r10, r11, r12, r20, r21, r22]);
    t.reshape(flat, &[3, 3])
}

/// Pose regression CNN: strided 3x3 convolutions, global average pooling, and
/// a linear head to 6 outputs scaled by 0.01.
pub struct PoseNet {
    convs: Vec<(ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
    widths: Vec<usize>,
}

pub const POSE_OUTPUT_SCALE: f64 = 0.01;

impl PoseNet {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, widths: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 6usize;
        for (i, &c_out) in widths.iter().enumerate() {
            let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
            let w = ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, 3, 3]), |_| randn(rng) * std);
            let b = ArrayD::zeros(IxDyn(&[c_out]));
            let wid = store.define(&format!("pose.conv{i}.weight"), w)?;
            let bid = store.define(&format!("pose.conv{i}.bias"), b)?;
            convs.push((wid, bid));
            c_in = c_out;
        }
        let std = (1.0 / c_in as f64).sqrt();
        let head_w = store.define(
            "pose.head.weight",
            ArrayD::from_shape_fn(IxDyn(&[6, c_in]), |_| randn(rng) * std),
        )?;
        let head_b = store.define("pose.head.bias", ArrayD::zeros(IxDyn(&[6, 1])))?;
        Ok(PoseNet {
            convs,
            head_w,
            head_b,
            widths: widths.to_vec(),
        })
    }

    /// Forward pass on a (6, H, W) frame pair; returns (axis_angle, translation).
    pub fn forward_t(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        binder: &mut Binder,
        frames: Var,
    ) -> Result<(Var, Var)> {
        let shape = t.value(frames).shape().to_vec();
        if shape.len() != 3 || shape[0] != 6 {
            return Err(CcError::Shape(format!(
                "pose net expects (6, H, W) input, got {shape:?}"
            )));
        }
        let mut x = frames;
        for &(wid, bid) in &self.convs {
            let w = binder.var(t, store, wid);
            let b = binder.var(t, store, bid);
            let cur = t.value(x).shape().to_vec();
            let stride = if cur[1] > 1 && cur[2] > 1 { 2 } else { 1 };
            let y = t.conv2d(x, w, b, PadMode::Zeros, stride);
            x = t.relu(y);
        }
        // global average pool
        let shp = t.value(x).shape().to_vec();
        let (c, hw) = (shp[0], shp[1] * shp[2]);
        let flat = t.reshape(x, &[c, hw]);
        let ones = t.leaf2(Array2::from_elem((hw, 1), 1.0 / hw as f64));
        let pooled = t.matmul(flat, ones);
        let hw_ = binder.var(t, store, self.head_w);
        let hb = binder.var(t, store, self.head_b);
        let pre = t.matmul(hw_, pooled);
        let pre_b = t.add(pre, hb);
        let out = t.scale(pre_b, POSE_OUTPUT_SCALE);
        let flat6 = t.reshape(out, &[6]);
        let axis = t.gather(flat6, vec![0, 1, 2], &[3]);
        let trans = t.gather(flat6, vec![3, 4, 5], &[3]);
        Ok((axis, trans))
    }

    /// Convenience evaluation returning a plain pose.
    pub fn predict(&self, store: &ParamStore, frames: &Array3<f64>) -> Result<RelativePose> {
        let mut t = Tape::new();
        let mut binder = Binder::new(store);
        let f = t.leaf3(frames.clone());
        let (axis, trans) = self.forward_t(&mut t, store, &mut binder, f)?;
        let a = t.value(axis);
        let tr = t.value(trans);
        let pose = RelativePose {
            axis_angle: [a[[0]], a[[1]], a[[2]]],
            translation: [tr[[0]], tr[[1]], tr[[2]]],
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
}
