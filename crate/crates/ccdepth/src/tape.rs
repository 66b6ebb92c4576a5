//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward pass builds a fresh `Tape`; nodes are appended in topological
//! order, so backpropagation is a single reverse sweep over the node vector.
//! All values are f64. Shapes are dynamic (`ArrayD`), with 2D/3D ops checking
//! dimensionality at call time.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

/// Convolution padding behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Reflect,
    Zeros,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    /// sin(x)/x with series continuation at 0.
    Sinc(Var),
    /// (1 - cos(x))/x^2 with series continuation at 0.
    Cosc(Var),
    SoftmaxCols(Var),
    LayerNormCols {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: PadMode,
        stride: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    AvgPool2(Var),
    ConcatChannels(Var, Var),
    GridSample {
        src: Var,
        gx: Var,
        gy: Var,
    },
    IndexScalar(Var, usize),
    ConcatScalars(Vec<Var>),
    Reshape(Var),
    Min2(Var, Var),
    Gather { src: Var, idx: Vec<usize> },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
}

/// The autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected 2D")
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("expected 3D")
}

/// Sum `g` down to `shape` (handles the scalar and column-vector broadcasts).
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    if n == 1 {
        let s = g.sum();
        return ArrayD::from_shape_vec(IxDyn(shape), vec![s]).unwrap();
    }
    // (r, 1) target against (r, c) gradient
    if shape.len() == 2 && shape[1] == 1 && g.ndim() == 2 && g.shape()[0] == shape[0] {
        let summed = as2(g).sum_axis(Axis(1));
        return summed
            .into_shape(IxDyn(&[shape[0], 1]))
            .unwrap();
    }
    panic!(
        "unsupported gradient reduction from {:?} to {:?}",
        g.shape(),
        shape
    );
}

/// Elementwise combine with limited broadcasting (equal shapes, a 1-element
/// operand, or a (r,1) column against (r,c)).
fn bcast_zip(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    if b.len() == 1 {
        let bv = *b.iter().next().unwrap();
        return a.mapv(|x| f(x, bv));
    }
    if a.len() == 1 {
        let av = *a.iter().next().unwrap();
        return b.mapv(|y| f(av, y));
    }
    if a.ndim() == 2 && b.ndim() == 2 && b.shape()[1] == 1 && a.shape()[0] == b.shape()[0] {
        let a2 = as2(a);
        let b2 = as2(b);
        let mut out = a2.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let bv = b2[[i, 0]];
            row.mapv_inplace(|x| f(x, bv));
        }
        return out.into_dyn();
    }
    if a.ndim() == 2 && b.ndim() == 2 && a.shape()[1] == 1 && b.shape()[0] == a.shape()[0] {
        let a2 = as2(a);
        let b2 = as2(b);
        let mut out = Array2::<f64>::zeros(b2.raw_dim());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let av = a2[[i, 0]];
            for (j, o) in row.iter_mut().enumerate() {
                *o = f(av, b2[[i, j]]);
            }
        }
        return out.into_dyn();
    }
    panic!("incompatible shapes {:?} vs {:?}", a.shape(), b.shape());
}

const SERIES_CUT: f64 = 1e-4;

fn sinc_val(x: f64) -> f64 {
    if x.abs() < SERIES_CUT {
        1.0 - x * x / 6.0 + x.powi(4) / 120.0
    } else {
        x.sin() / x
    }
}

fn sinc_deriv(x: f64) -> f64 {
    if x.abs() < SERIES_CUT {
        -x / 3.0 + x.powi(3) / 30.0
    } else {
        (x * x.cos() - x.sin()) / (x * x)
    }
}

fn cosc_val(x: f64) -> f64 {
    if x.abs() < SERIES_CUT {
        0.5 - x * x / 24.0 + x.powi(4) / 720.0
    } else {
        (1.0 - x.cos()) / (x * x)
    }
}

fn cosc_deriv(x: f64) -> f64 {
    if x.abs() < SERIES_CUT {
        -x / 12.0 + x.powi(3) / 180.0
    } else {
        (x * x.sin() - 2.0 * (1.0 - x.cos())) / (x * x * x)
    }
}

/// Reflected index for reflection padding (no edge repeat).
fn reflect_idx(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(ArrayD::from_elem(IxDyn(&[1]), v), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        as2(self.value(v)).to_owned()
    }

    pub fn value3(&self, v: Var) -> Array3<f64> {
        as3(self.value(v)).to_owned()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> ArrayD<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    fn accumulate(&mut self, v: Var, g: ArrayD<f64>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(acc) => *acc += &g,
            None => node.grad = Some(g),
        }
    }

    // ---- elementwise / arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b)));
        self.push(v.into_dyn(), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = as2(self.value(a)).t().to_owned();
        self.push(v.into_dyn(), Op::Transpose(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(&f);
        self.push(v, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sinc(&mut self, a: Var) -> Var {
        self.unary(a, sinc_val, Op::Sinc(a))
    }

    pub fn cosc(&mut self, a: Var) -> Var {
        self.unary(a, cosc_val, Op::Cosc(a))
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_zip(self.value(a), self.value(b), f64::min);
        self.push(v, Op::Min2(a, b))
    }

    /// Column-wise softmax of a 2D matrix: each column sums to 1.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let mut out = x.to_owned();
        for mut col in out.columns_mut() {
            let m = col.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            col.mapv_inplace(|v| (v - m).exp());
            let s = col.sum();
            col.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxCols(a))
    }

    /// Token-wise layer norm: normalizes each column of a (d, N) matrix over d,
    /// then applies per-row gain and bias of shape (d, 1).
    pub fn layer_norm_cols(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = 1e-6;
        let xv = as2(self.value(x));
        let g = as2(self.value(gain));
        let b = as2(self.value(bias));
        let d = xv.nrows();
        let mut out = xv.to_owned();
        for mut col in out.columns_mut() {
            let mu = col.sum() / d as f64;
            let var = col.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|v| (v - mu) * inv);
        }
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (gi, bi) = (g[[i, 0]], b[[i, 0]]);
            row.mapv_inplace(|v| gi * v + bi);
        }
        self.push(out.into_dyn(), Op::LayerNormCols { x, gain, bias, eps })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.value(a).sum() / n;
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Mean(a))
    }

    /// (C, H, W) -> (H, W) channel average.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let x = as3(self.value(a));
        let c = x.dim().0 as f64;
        let v = x.sum_axis(Axis(0)) / c;
        self.push(v.into_dyn(), Op::MeanAxis0(a))
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: PadMode, stride: usize) -> Var {
        let out = conv2d_forward(
            &as3(self.value(x)).to_owned(),
            &self.value(w).view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned(),
            &self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned(),
            pad,
            stride,
        );
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, pad, stride })
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::<f64>::zeros((c, ho, wo));
        let mut argmax = vec![0usize; c * ho * wo];
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bidx = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (y, xx) = (2 * i + di, 2 * j + dj);
                            let v = xv[[ci, y, xx]];
                            if v > best {
                                best = v;
                                bidx = ci * h * w + y * w + xx;
                            }
                        }
                    }
                    out[[ci, i, j]] = best;
                    argmax[ci * ho * wo + i * wo + j] = bidx;
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax })
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::<f64>::zeros((c, ho, wo));
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[[ci, i, j]] = 0.25
                        * (xv[[ci, 2 * i, 2 * j]]
                            + xv[[ci, 2 * i, 2 * j + 1]]
                            + xv[[ci, 2 * i + 1, 2 * j]]
                            + xv[[ci, 2 * i + 1, 2 * j + 1]]);
                }
            }
        }
        self.push(out.into_dyn(), Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[[ci, i, j]] = xv[[ci, i / 2, j / 2]];
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = as3(self.value(a));
        let bv = as3(self.value(b));
        assert_eq!(av.dim().1, bv.dim().1);
        assert_eq!(av.dim().2, bv.dim().2);
        let v = ndarray::concatenate(Axis(0), &[av, bv]).unwrap();
        self.push(v.into_dyn(), Op::ConcatChannels(a, b))
    }

    /// Bilinear sampling of `src` (C,H,W) at pixel coordinates (gx, gy), each
    /// (H', W'). Coordinates are clamped to the border; use
    /// [`grid_sample_validity`] to mask samples that fell outside.
    pub fn grid_sample(&mut self, src: Var, gx: Var, gy: Var) -> Var {
        let s = as3(self.value(src)).to_owned();
        let gxv = as2(self.value(gx)).to_owned();
        let gyv = as2(self.value(gy)).to_owned();
        let out = grid_sample_forward(&s, &gxv, &gyv);
        self.push(out.into_dyn(), Op::GridSample { src, gx, gy })
    }

    pub fn index_scalar(&mut self, a: Var, idx: usize) -> Var {
        let v = self.value(a).as_slice().unwrap()[idx];
        self.push(ArrayD::from_elem(IxDyn(&[1]), v), Op::IndexScalar(a, idx))
    }

    pub fn concat_scalars(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<f64> = parts.iter().map(|&p| self.scalar_value(p)).collect();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals).unwrap(),
            Op::ConcatScalars(parts.to_vec()),
        )
    }

    /// Permutation/gather: output element k reads flat element `idx[k]` of `src`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        let sv: Vec<f64> = self.value(src).iter().copied().collect();
        let vals: Vec<f64> = idx.iter().map(|&k| sv[k]).collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), vals).expect("gather: shape/idx mismatch");
        self.push(v, Op::Gather { src, idx })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    // ---- backward ----

    /// Backpropagate from a scalar output node.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward target must be scalar");
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed = ArrayD::from_elem(self.nodes[out.0].value.raw_dim(), 1.0);
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.step_backward(i, g);
        }
    }

    fn step_backward(&mut self, i: usize, g: ArrayD<f64>) {
        // Ops only reference earlier nodes, so reading values of parents while
        // accumulating their grads is fine.
        macro_rules! val {
            ($v:expr) => {
                self.nodes[$v.0].value.clone()
            };
        }
        let out_val = self.nodes[i].value.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let ga = reduce_to_shape(&g, &val!(a).shape().to_vec());
                let gb = reduce_to_shape(&g, &val!(b).shape().to_vec());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let ga = reduce_to_shape(&g, &val!(a).shape().to_vec());
                let gneg = g.mapv(|x| -x);
                let gb = reduce_to_shape(&gneg, &val!(b).shape().to_vec());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val!(a), val!(b));
                let ga = reduce_to_shape(&bcast_zip(&g, &bv, |x, y| x * y), av.shape());
                let gb = reduce_to_shape(&bcast_zip(&g, &av, |x, y| x * y), bv.shape());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val!(a), val!(b));
                let ga = reduce_to_shape(&bcast_zip(&g, &bv, |x, y| x / y), av.shape());
                let num = bcast_zip(&g, &out_val, |x, y| x * y);
                let gb_full = bcast_zip(&num, &bv, |x, y| -x / y);
                let gb = reduce_to_shape(&gb_full, bv.shape());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Neg(a) => {
                let a = *a;
                self.accumulate(a, g.mapv(|x| -x));
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, g.mapv(|x| c * x));
            }
            Op::Offset(a) => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let g2 = as2(&g).to_owned();
                let av = as2(&self.nodes[a.0].value).to_owned();
                let bv = as2(&self.nodes[b.0].value).to_owned();
                let ga = g2.dot(&bv.t());
                let gb = av.t().dot(&g2);
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::Transpose(a) => {
                let a = *a;
                let gt = as2(&g).t().to_owned();
                self.accumulate(a, gt.into_dyn());
            }
            Op::Relu(a) => {
                let a = *a;
                let xv = val!(a);
                let ga = bcast_zip(&g, &xv, |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let ga = bcast_zip(&g, &out_val, |gi, y| gi * y * (1.0 - y));
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let a = *a;
                let ga = bcast_zip(&g, &out_val, |gi, y| gi * y);
                self.accumulate(a, ga);
            }
            Op::Ln(a) => {
                let a = *a;
                let xv = val!(a);
                let ga = bcast_zip(&g, &xv, |gi, x| gi / x);
                self.accumulate(a, ga);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let ga = bcast_zip(&g, &out_val, |gi, y| gi * 0.5 / y);
                self.accumulate(a, ga);
            }
            Op::Sin(a) => {
                let a = *a;
                let xv = val!(a);
                let ga = bcast_zip(&g, &xv, |gi, x| gi * x.cos());
                self.accumulate(a, ga);
            }
            Op::Cos(a) => {
                let a = *a;
                let xv = val!(a);
                let ga = bcast_zip(&g, &xv, |gi, x| -gi * x.sin());
                self.accumulate(a, ga);
            }
            Op::Abs(a) => {
                let a = *a;
                let xv = val!(a);
                let ga = bcast_zip(&g, &xv, |gi, x| gi * x.signum() * if x == 0.0 { 0.0 } else { 1.0 });
                self.accumulate(a, ga);
            }
            Op::Sinc(a) => {
                let a = *a;
                let xv = val!(a);
                let ga = bcast_zip(&g, &xv, |gi, x| gi * sinc_deriv(x));
                self.accumulate(a, ga);
            }
            Op::Cosc(a) => {
                let a = *a;
                let xv = val!(a);
                let ga = bcast_zip(&g, &xv, |gi, x| gi * cosc_deriv(x));
                self.accumulate(a, ga);
            }
            Op::Min2(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val!(a), val!(b));
                assert_eq!(av.shape(), bv.shape(), "min2 backward: equal shapes only");
                let ga = bcast_zip(&g, &bcast_zip(&av, &bv, |x, y| if x <= y { 1.0 } else { 0.0 }), |gi, m| gi * m);
                let gb = bcast_zip(&g, &bcast_zip(&av, &bv, |x, y| if x <= y { 0.0 } else { 1.0 }), |gi, m| gi * m);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::SoftmaxCols(a) => {
                let a = *a;
                let s = as2(&out_val);
                let g2 = as2(&g);
                let mut ga = Array2::<f64>::zeros(s.raw_dim());
                for j in 0..s.ncols() {
                    let dot: f64 = s.column(j).dot(&g2.column(j));
                    for ii in 0..s.nrows() {
                        ga[[ii, j]] = s[[ii, j]] * (g2[[ii, j]] - dot);
                    }
                }
                self.accumulate(a, ga.into_dyn());
            }
            Op::LayerNormCols { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let xv = as2(&self.nodes[x.0].value).to_owned();
                let gv = as2(&self.nodes[gain.0].value).to_owned();
                let g2 = as2(&g).to_owned();
                let d = xv.nrows();
                let df = d as f64;
                let mut gx = Array2::<f64>::zeros(xv.raw_dim());
                let mut ggain = Array2::<f64>::zeros((d, 1));
                let mut gbias = Array2::<f64>::zeros((d, 1));
                for j in 0..xv.ncols() {
                    let col = xv.column(j);
                    let mu = col.sum() / df;
                    let var = col.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_i = (x_i - mu) * inv
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ii in 0..d {
                        let xhat = (col[ii] - mu) * inv;
                        let dy = g2[[ii, j]];
                        let dxhat = dy * gv[[ii, 0]];
                        ggain[[ii, 0]] += dy * xhat;
                        gbias[[ii, 0]] += dy;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for ii in 0..d {
                        let xhat = (col[ii] - mu) * inv;
                        let dxhat = g2[[ii, j]] * gv[[ii, 0]];
                        gx[[ii, j]] =
                            inv * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
                    }
                }
                self.accumulate(x, gx.into_dyn());
                self.accumulate(gain, ggain.into_dyn());
                self.accumulate(bias, gbias.into_dyn());
            }
            Op::Sum(a) => {
                let a = *a;
                let gv = *g.iter().next().unwrap();
                let shape = self.nodes[a.0].value.raw_dim();
                self.accumulate(a, ArrayD::from_elem(shape, gv));
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.len() as f64;
                let gv = *g.iter().next().unwrap() / n;
                let shape = self.nodes[a.0].value.raw_dim();
                self.accumulate(a, ArrayD::from_elem(shape, gv));
            }
            Op::MeanAxis0(a) => {
                let a = *a;
                let xshape = self.nodes[a.0].value.shape().to_vec();
                let c = xshape[0] as f64;
                let g2 = as2(&g).to_owned();
                let mut ga = Array3::<f64>::zeros((xshape[0], xshape[1], xshape[2]));
                for ci in 0..xshape[0] {
                    for ii in 0..xshape[1] {
                        for jj in 0..xshape[2] {
                            ga[[ci, ii, jj]] = g2[[ii, jj]] / c;
                        }
                    }
                }
                self.accumulate(a, ga.into_dyn());
            }
            Op::Conv2d { x, w, b, pad, stride } => {
                let (x, w, b, pad, stride) = (*x, *w, *b, *pad, *stride);
                let xv = as3(&self.nodes[x.0].value).to_owned();
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let g3 = as3(&g).to_owned();
                let (gx, gw, gb) = conv2d_backward(&xv, &wv, &g3, pad, stride);
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let shape = self.nodes[x.0].value.shape().to_vec();
                let mut gx = vec![0.0f64; shape.iter().product()];
                for (k, gv) in g.iter().enumerate() {
                    gx[argmax[k]] += *gv;
                }
                let ga = ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap();
                self.accumulate(x, ga);
            }
            Op::AvgPool2(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g3 = as3(&g).to_owned();
                let mut ga = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
                for ci in 0..shape[0] {
                    for ii in 0..shape[1] {
                        for jj in 0..shape[2] {
                            ga[[ci, ii, jj]] = 0.25 * g3[[ci, ii / 2, jj / 2]];
                        }
                    }
                }
                self.accumulate(a, ga.into_dyn());
            }
            Op::Upsample2(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g3 = as3(&g).to_owned();
                let mut ga = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
                for ci in 0..shape[0] {
                    for ii in 0..2 * shape[1] {
                        for jj in 0..2 * shape[2] {
                            ga[[ci, ii / 2, jj / 2]] += g3[[ci, ii, jj]];
                        }
                    }
                }
                self.accumulate(a, ga.into_dyn());
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a.0].value.shape()[0];
                let g3 = as3(&g).to_owned();
                let ga = g3.slice(ndarray::s![..ca, .., ..]).to_owned();
                let gb = g3.slice(ndarray::s![ca.., .., ..]).to_owned();
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::GridSample { src, gx, gy } => {
                let (src, gx, gy) = (*src, *gx, *gy);
                let s = as3(&self.nodes[src.0].value).to_owned();
                let gxv = as2(&self.nodes[gx.0].value).to_owned();
                let gyv = as2(&self.nodes[gy.0].value).to_owned();
                let g3 = as3(&g).to_owned();
                let (gsrc, ggx, ggy) = grid_sample_backward(&s, &gxv, &gyv, &g3);
                self.accumulate(src, gsrc.into_dyn());
                self.accumulate(gx, ggx.into_dyn());
                self.accumulate(gy, ggy.into_dyn());
            }
            Op::IndexScalar(a, idx) => {
                let (a, idx) = (*a, *idx);
                let gv = *g.iter().next().unwrap();
                let shape = self.nodes[a.0].value.shape().to_vec();
                let mut ga = vec![0.0f64; shape.iter().product()];
                ga[idx] = gv;
                self.accumulate(a, ArrayD::from_shape_vec(IxDyn(&shape), ga).unwrap());
            }
            Op::ConcatScalars(parts) => {
                let parts = parts.clone();
                let gs = g.as_slice().unwrap().to_vec();
                for (k, p) in parts.iter().enumerate() {
                    self.accumulate(*p, ArrayD::from_elem(IxDyn(&[1]), gs[k]));
                }
            }
            Op::Gather { src, idx } => {
                let src = *src;
                let idx = idx.clone();
                let shape = self.nodes[src.0].value.shape().to_vec();
                let mut gs = vec![0.0f64; shape.iter().product()];
                for (k, gv) in g.iter().enumerate() {
                    gs[idx[k]] += *gv;
                }
                self.accumulate(src, ArrayD::from_shape_vec(IxDyn(&shape), gs).unwrap());
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = g.into_shape(IxDyn(&shape)).unwrap();
                self.accumulate(a, ga);
            }
        }
    }
}

// ---- conv2d plumbing ----

fn pad_input(x: &Array3<f64>, ph: usize, pw: usize, pad: PadMode) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h + 2 * ph, w + 2 * pw));
    match pad {
        PadMode::Zeros => {
            out.slice_mut(ndarray::s![.., ph..ph + h, pw..pw + w]).assign(x);
        }
        PadMode::Reflect => {
            for ci in 0..c {
                for i in 0..h + 2 * ph {
                    let si = reflect_idx(i as isize - ph as isize, h);
                    for j in 0..w + 2 * pw {
                        let sj = reflect_idx(j as isize - pw as isize, w);
                        out[[ci, i, j]] = x[[ci, si, sj]];
                    }
                }
            }
        }
    }
    out
}

fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> (usize, usize, usize, usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (w + 2 * pw - kw) / stride + 1;
    (ph, pw, ho, wo)
}

fn im2col(xp: &Array3<f64>, kh: usize, kw: usize, stride: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, _, _) = xp.dim();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..ho {
                    for oj in 0..wo {
                        cols[[row, oi * wo + oj]] = xp[[ci, oi * stride + ki, oj * stride + kj]];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn conv2d_forward(
    x: &Array3<f64>,
    w: &ndarray::Array4<f64>,
    b: &Array1<f64>,
    pad: PadMode,
    stride: usize,
) -> Array3<f64> {
    let (ci, h, wd) = x.dim();
    let (co, ciw, kh, kw) = w.dim();
    assert_eq!(ci, ciw, "conv2d: channel mismatch");
    let (ph, pw, ho, wo) = conv_out_dims(h, wd, kh, kw, stride);
    let xp = pad_input(x, ph, pw, pad);
    let cols = im2col(&xp, kh, kw, stride, ho, wo);
    let w2 = w.view().into_shape((co, ci * kh * kw)).unwrap();
    let mut out2 = w2.dot(&cols);
    for (oi, mut row) in out2.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v + b[oi]);
    }
    out2.into_shape((co, ho, wo)).unwrap()
}

fn conv2d_backward(
    x: &Array3<f64>,
    w: &ndarray::Array4<f64>,
    gout: &Array3<f64>,
    pad: PadMode,
    stride: usize,
) -> (Array3<f64>, ndarray::Array4<f64>, Array1<f64>) {
    let (ci, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let (ph, pw, ho, wo) = conv_out_dims(h, wd, kh, kw, stride);
    let xp = pad_input(x, ph, pw, pad);
    let cols = im2col(&xp, kh, kw, stride, ho, wo);
    let g2 = gout.view().into_shape((co, ho * wo)).unwrap().to_owned();
    let w2 = w.view().into_shape((co, ci * kh * kw)).unwrap();

    let gb = g2.sum_axis(Axis(1));
    let gw2 = g2.dot(&cols.t());
    let gw = gw2.into_shape((co, ci, kh, kw)).unwrap();

    // cols gradient, scattered back through the padding map
    let gcols = w2.t().dot(&g2);
    let mut gxp = Array3::<f64>::zeros(xp.raw_dim());
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = c * kh * kw + ki * kw + kj;
                for oi in 0..ho {
                    for oj in 0..wo {
                        gxp[[c, oi * stride + ki, oj * stride + kj]] += gcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    let mut gx = Array3::<f64>::zeros((ci, h, wd));
    match pad {
        PadMode::Zeros => {
            gx.assign(&gxp.slice(ndarray::s![.., ph..ph + h, pw..pw + wd]));
        }
        PadMode::Reflect => {
            for c in 0..ci {
                for i in 0..h + 2 * ph {
                    let si = reflect_idx(i as isize - ph as isize, h);
                    for j in 0..wd + 2 * pw {
                        let sj = reflect_idx(j as isize - pw as isize, wd);
                        gx[[c, si, sj]] += gxp[[c, i, j]];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---- grid sampling plumbing ----

fn grid_sample_forward(src: &Array3<f64>, gx: &Array2<f64>, gy: &Array2<f64>) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let (ho, wo) = gx.dim();
    let mut out = Array3::<f64>::zeros((c, ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            let xc = gx[[i, j]].clamp(0.0, (w - 1) as f64);
            let yc = gy[[i, j]].clamp(0.0, (h - 1) as f64);
            let x0 = xc.floor() as usize;
            let y0 = yc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wx = xc - x0 as f64;
            let wy = yc - y0 as f64;
            for ci in 0..c {
                out[[ci, i, j]] = (1.0 - wy) * ((1.0 - wx) * src[[ci, y0, x0]] + wx * src[[ci, y0, x1]])
                    + wy * ((1.0 - wx) * src[[ci, y1, x0]] + wx * src[[ci, y1, x1]]);
            }
        }
    }
    out
}

fn grid_sample_backward(
    src: &Array3<f64>,
    gx: &Array2<f64>,
    gy: &Array2<f64>,
    gout: &Array3<f64>,
) -> (Array3<f64>, Array2<f64>, Array2<f64>) {
    let (c, h, w) = src.dim();
    let (ho, wo) = gx.dim();
    let mut gsrc = Array3::<f64>::zeros((c, h, w));
    let mut ggx = Array2::<f64>::zeros((ho, wo));
    let mut ggy = Array2::<f64>::zeros((ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            let rawx = gx[[i, j]];
            let rawy = gy[[i, j]];
            let xc = rawx.clamp(0.0, (w - 1) as f64);
            let yc = rawy.clamp(0.0, (h - 1) as f64);
            let x_active = rawx > 0.0 && rawx < (w - 1) as f64;
            let y_active = rawy > 0.0 && rawy < (h - 1) as f64;
            let x0 = xc.floor() as usize;
            let y0 = yc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wx = xc - x0 as f64;
            let wy = yc - y0 as f64;
            for ci in 0..c {
                let g = gout[[ci, i, j]];
                gsrc[[ci, y0, x0]] += g * (1.0 - wy) * (1.0 - wx);
                gsrc[[ci, y0, x1]] += g * (1.0 - wy) * wx;
                gsrc[[ci, y1, x0]] += g * wy * (1.0 - wx);
                gsrc[[ci, y1, x1]] += g * wy * wx;
                if x_active {
                    ggx[[i, j]] += g
                        * ((1.0 - wy) * (src[[ci, y0, x1]] - src[[ci, y0, x0]])
                            + wy * (src[[ci, y1, x1]] - src[[ci, y1, x0]]));
                }
                if y_active {
                    ggy[[i, j]] += g
                        * ((1.0 - wx) * (src[[ci, y1, x0]] - src[[ci, y0, x0]])
                            + wx * (src[[ci, y1, x1]] - src[[ci, y0, x1]]));
                }
            }
        }
    }
    (gsrc, ggx, ggy)
}

/// In-bounds/valid-sample mask for [`Tape::grid_sample`] coordinates: 1.0 where
/// the un-clamped sample point lies inside the source image.
pub fn grid_sample_validity(gx: &Array2<f64>, gy: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros(gx.raw_dim());
    for ((i, j), v) in m.indexed_iter_mut() {
        let x = gx[[i, j]];
        let y = gy[[i, j]];
        if x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64 {
            *v = 1.0;
        }
    }
    m
}
