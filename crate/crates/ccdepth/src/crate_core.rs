//! CRATE layer primitives: tokenization, coding rate, rate reduction,
//! subspace self-attention, the ISTA sparsification step, and their
//! composition into basic modules and full layers.
//!
//! Every network-path operation is built on the autodiff [`Tape`] so the same
//! code serves forward evaluation and training. `coding_rate` and
//! `rate_reduction` are not part of the forward pass (the MSSA step is their
//! approximate gradient) and are implemented directly with analytic gradients.

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcError, Result};
use crate::linalg;
use crate::tape::{Tape, Var};

/// How the p/(N eps^2) factor of the MSSA operator combines with the residual
/// step. `AsWritten` keeps both factors (they compound); `SingleFactor`
/// applies the factor once in the residual step only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MssaScaleMode {
    AsWritten,
    SingleFactor,
}

/// Token matrix Z: d-dimensional vectors for N patches, stored (d, N).
#[derive(Clone, Debug)]
pub struct TokenMatrix {
    data: Array2<f64>,
}

impl TokenMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CcError::Numeric("token matrix has non-finite entries".into()));
        }
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(CcError::Shape("token matrix must be non-empty".into()));
        }
        Ok(TokenMatrix { data })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// The K learnable subspace bases of one MSSA operator.
#[derive(Clone, Debug)]
pub struct SubspaceBases {
    bases: Vec<Array2<f64>>,
}

impl SubspaceBases {
    pub fn new(bases: Vec<Array2<f64>>) -> Result<Self> {
        if bases.is_empty() {
            return Err(CcError::Shape("need at least one basis".into()));
        }
        let (d, p) = bases[0].dim();
        for (k, u) in bases.iter().enumerate() {
            if u.dim() != (d, p) {
                return Err(CcError::Shape(format!(
                    "basis {k} has shape {:?}, expected ({d}, {p})",
                    u.dim()
                )));
            }
        }
        Ok(SubspaceBases { bases })
    }

    /// QR-orthonormal initialization of K bases of shape (d, p).
    pub fn init_orthonormal(rng: &mut ChaCha8Rng, k: usize, d: usize, p: usize) -> Self {
        let bases = (0..k).map(|_| linalg::random_orthonormal(rng, d, p)).collect();
        SubspaceBases { bases }
    }

    pub fn head_count(&self) -> usize {
        self.bases.len()
    }

    pub fn token_dim(&self) -> usize {
        self.bases[0].nrows()
    }

    pub fn subspace_dim(&self) -> usize {
        self.bases[0].ncols()
    }

    pub fn bases(&self) -> &[Array2<f64>] {
        &self.bases
    }

    /// Max deviation of U_k^T U_k from the identity, over all heads.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for u in &self.bases {
            let g = u.t().dot(u);
            for ((i, j), v) in g.indexed_iter() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - want).abs());
            }
        }
        worst
    }
}

/// Complete (square) sparse-coding dictionary D.
#[derive(Clone, Debug)]
pub struct Dictionary {
    matrix: Array2<f64>,
}

impl Dictionary {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(CcError::Shape(format!(
                "dictionary must be square, got {:?}",
                matrix.dim()
            )));
        }
        Ok(Dictionary { matrix })
    }

    pub fn init_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Dictionary {
            matrix: linalg::random_orthonormal(rng, d, d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Dictionary {
            matrix: Array2::eye(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Max-norm deviation of D^T D from the identity.
    pub fn orthogonality_defect(&self) -> f64 {
        let g = self.matrix.t().dot(&self.matrix);
        let mut worst = 0.0f64;
        for ((i, j), v) in g.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - want).abs());
        }
        worst
    }
}

/// Parameters of one CRATE basic module (pure-array form).
#[derive(Clone, Debug)]
pub struct CrateModuleParams {
    pub bases: SubspaceBases,
    pub dictionary: Dictionary,
    pub kappa: f64,
    pub eps: f64,
    pub eta: f64,
    pub lambda1: f64,
    pub pre_norm: bool,
    pub scale_mode: MssaScaleMode,
    /// Layer-norm gain/bias before the MSSA block, shape (d, 1).
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    /// Layer-norm gain/bias before the ISTA block, shape (d, 1).
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
}

impl CrateModuleParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, heads: usize, scalars: CrateScalars) -> Result<Self> {
        if d % heads != 0 {
            return Err(CcError::Config(format!(
                "token dim {d} not divisible by head count {heads}"
            )));
        }
        scalars.validate()?;
        let p = d / heads;
        Ok(CrateModuleParams {
            bases: SubspaceBases::init_orthonormal(rng, heads, d, p),
            dictionary: Dictionary::init_orthogonal(rng, d),
            kappa: scalars.kappa,
            eps: scalars.eps,
            eta: scalars.eta,
            lambda1: scalars.lambda1,
            pre_norm: scalars.pre_norm,
            scale_mode: scalars.scale_mode,
            ln1_gain: Array2::ones((d, 1)),
            ln1_bias: Array2::zeros((d, 1)),
            ln2_gain: Array2::ones((d, 1)),
            ln2_bias: Array2::zeros((d, 1)),
        })
    }
}

/// Scalar hyperparameters of a CRATE module.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CrateScalars {
    pub kappa: f64,
    pub eps: f64,
    pub eta: f64,
    pub lambda1: f64,
    pub pre_norm: bool,
    pub scale_mode: MssaScaleMode,
}

impl Default for CrateScalars {
    fn default() -> Self {
        CrateScalars {
            kappa: 1.0,
            eps: 0.1,
            eta: 0.1,
            lambda1: 0.1,
            pre_norm: true,
            scale_mode: MssaScaleMode::AsWritten,
        }
    }
}

impl CrateScalars {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(CcError::Domain(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.kappa >= 0.0) {
            return Err(CcError::Domain(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.eta > 0.0) {
            return Err(CcError::Domain(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.lambda1 < 0.0 {
            return Err(CcError::Domain(format!(
                "lambda1 must be >= 0, got {}",
                self.lambda1
            )));
        }
        Ok(())
    }
}

/// Patch embedding: linear maps between pixel patches and tokens.
#[derive(Clone, Debug)]
pub struct PatchEmbedParams {
    /// (d, patch_size^2 * C_in)
    pub projection: Array2<f64>,
    pub proj_bias: Array1<f64>,
    /// (out_patch^2 * C_out, d)
    pub inverse_projection: Array2<f64>,
    pub inv_bias: Array1<f64>,
    pub patch_size: usize,
    /// Patch size used on the output side by `unpatchify_project`.
    pub out_patch_size: usize,
}

impl PatchEmbedParams {
    /// Identity patch reordering: d = patch^2 * C, projection and inverse are
    /// identity maps. Round-trips exactly.
    pub fn identity(c: usize, patch_size: usize) -> Self {
        let d = patch_size * patch_size * c;
        PatchEmbedParams {
            projection: Array2::eye(d),
            proj_bias: Array1::zeros(d),
            inverse_projection: Array2::eye(d),
            inv_bias: Array1::zeros(d),
            patch_size,
            out_patch_size: patch_size,
        }
    }
}

// ---- coding rate and rate reduction (analytic, off-tape) ----

/// R(Z) = 1/2 logdet(I + d/(N eps^2) Z Z^T).
pub fn coding_rate(z: &Array2<f64>, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(CcError::Domain(format!("eps must be > 0, got {eps}")));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(CcError::Numeric("coding_rate: non-finite entries".into()));
    }
    let (d, n) = z.dim();
    let c = d as f64 / (n as f64 * eps * eps);
    let mut m = z.dot(&z.t()) * c;
    for i in 0..d {
        m[[i, i]] += 1.0;
    }
    Ok(0.5 * linalg::logdet_spd(m.view())?)
}

/// Analytic gradient of `coding_rate` with respect to Z:
/// c (I + c Z Z^T)^{-1} Z with c = d/(N eps^2).
pub fn coding_rate_grad(z: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    let (d, n) = z.dim();
    let c = d as f64 / (n as f64 * eps * eps);
    let mut m = z.dot(&z.t()) * c;
    for i in 0..d {
        m[[i, i]] += 1.0;
    }
    let solved = linalg::solve_spd(m.view(), z.view())?;
    Ok(solved * c)
}

/// Rate reduction: R(Z) - sum_k R(U_k^T Z), each term at its own dimension.
pub fn rate_reduction(z: &TokenMatrix, u: &SubspaceBases, eps: f64) -> Result<f64> {
    if u.token_dim() != z.dim() {
        return Err(CcError::Shape(format!(
            "basis dim {} does not match token dim {}",
            u.token_dim(),
            z.dim()
        )));
    }
    let mut total = coding_rate(z.data(), eps)?;
    for uk in u.bases() {
        let proj = uk.t().dot(z.data());
        total -= coding_rate(&proj, eps)?;
    }
    Ok(total)
}

/// Analytic gradient of `rate_reduction` with respect to Z.
pub fn rate_reduction_grad(z: &TokenMatrix, u: &SubspaceBases, eps: f64) -> Result<Array2<f64>> {
    let mut g = coding_rate_grad(z.data(), eps)?;
    for uk in u.bases() {
        let proj = uk.t().dot(z.data());
        let gp = coding_rate_grad(&proj, eps)?;
        g -= &uk.dot(&gp);
    }
    Ok(g)
}

// ---- tape-level operations (network path) ----

/// SSA(Z|U_k) = (U_k^T Z) softmax((U_k^T Z)^T (U_k^T Z)), column-normalized.
pub fn ssa_t(t: &mut Tape, z: Var, u_k: Var) -> Var {
    let ut = t.transpose(u_k);
    let proj = t.matmul(ut, z);
    let projt = t.transpose(proj);
    let gram = t.matmul(projt, proj);
    let attn = t.softmax_cols(gram);
    t.matmul(proj, attn)
}

/// MSSA(Z|U_[K]): p/(N eps^2) * sum_k U_k SSA(Z|U_k). The factor is included
/// when `with_factor` (Eq. (8) as printed).
pub fn mssa_t(t: &mut Tape, z: Var, bases: &[Var], eps: f64, with_factor: bool) -> Var {
    let n = t.value(z).shape()[1];
    let p = t.value(bases[0]).shape()[1];
    let mut acc: Option<Var> = None;
    for &u_k in bases {
        let s = ssa_t(t, z, u_k);
        let contrib = t.matmul(u_k, s);
        acc = Some(match acc {
            Some(a) => t.add(a, contrib),
            None => contrib,
        });
    }
    let summed = acc.expect("at least one head");
    if with_factor {
        let w = p as f64 / (n as f64 * eps * eps);
        t.scale(summed, w)
    } else {
        summed
    }
}

/// Z_{l+1/2} = (1 - kappa p/(N eps^2)) Z + kappa p/(N eps^2) MSSA(Z|U_[K]).
/// `z_branch` feeds the MSSA operator (pre-norm applies there only);
/// `z_identity` carries the residual path.
pub fn mssa_residual_step_branched(
    t: &mut Tape,
    z_identity: Var,
    z_branch: Var,
    bases: &[Var],
    kappa: f64,
    eps: f64,
    scale_mode: MssaScaleMode,
) -> Var {
    let n = t.value(z_identity).shape()[1];
    let p = t.value(bases[0]).shape()[1];
    let w = p as f64 / (n as f64 * eps * eps);
    let coeff = kappa * w;
    let with_factor = matches!(scale_mode, MssaScaleMode::AsWritten);
    let m = mssa_t(t, z_branch, bases, eps, with_factor);
    let id_part = t.scale(z_identity, 1.0 - coeff);
    let m_part = t.scale(m, coeff);
    t.add(id_part, m_part)
}

pub fn mssa_residual_step_t(
    t: &mut Tape,
    z: Var,
    bases: &[Var],
    kappa: f64,
    eps: f64,
    scale_mode: MssaScaleMode,
) -> Var {
    mssa_residual_step_branched(t, z, z, bases, kappa, eps, scale_mode)
}

/// ISTA step: ReLU(Z + eta D^T (Z - D Z) - eta lambda1). Output entries >= 0.
pub fn ista_step_t(t: &mut Tape, z_half: Var, dict: Var, eta: f64, lambda1: f64) -> Var {
    let dz = t.matmul(dict, z_half);
    let resid = t.sub(z_half, dz);
    let dt = t.transpose(dict);
    let corr = t.matmul(dt, resid);
    let corr_s = t.scale(corr, eta);
    let pre = t.add(z_half, corr_s);
    let shifted = t.offset(pre, -eta * lambda1);
    t.relu(shifted)
}

/// Tape handles for one CRATE basic module's parameters.
#[derive(Clone)]
pub struct CrateModuleVars {
    pub bases: Vec<Var>,
    pub dict: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub scalars: CrateScalars,
}

/// One basic module: MSSA residual step then ISTA step, each preceded by its
/// layer norm when pre-norm is enabled.
pub fn crate_module_forward_t(t: &mut Tape, z: Var, m: &CrateModuleVars) -> Var {
    let s = &m.scalars;
    let branch = if s.pre_norm {
        t.layer_norm_cols(z, m.ln1_gain, m.ln1_bias)
    } else {
        z
    };
    let z_half = mssa_residual_step_branched(t, z, branch, &m.bases, s.kappa, s.eps, s.scale_mode);
    let ista_in = if s.pre_norm {
        t.layer_norm_cols(z_half, m.ln2_gain, m.ln2_bias)
    } else {
        z_half
    };
    ista_step_t(t, ista_in, m.dict, s.eta, s.lambda1)
}

// ---- tokenization ----

fn patchify_indices(c: usize, h: usize, w: usize, ps: usize) -> (Vec<usize>, usize, usize) {
    let (gh, gw) = (h / ps, w / ps);
    let n = gh * gw;
    let rows = c * ps * ps;
    let mut idx = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let ci = r / (ps * ps);
        let di = (r / ps) % ps;
        let dj = r % ps;
        for pi in 0..gh {
            for pj in 0..gw {
                idx.push(ci * h * w + (pi * ps + di) * w + (pj * ps + dj));
            }
        }
    }
    (idx, rows, n)
}

/// Split a (C, H, W) feature map into row-major patches and embed each as a
/// d-vector: tokens = proj * P + bias, shape (d, N).
pub fn patchify_embed_t(
    t: &mut Tape,
    x: Var,
    proj_w: Var,
    proj_b: Var,
    ps: usize,
) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % ps != 0 {
        return Err(CcError::Shape(format!(
            "height {h} not divisible by patch size {ps}"
        )));
    }
    if w % ps != 0 {
        return Err(CcError::Shape(format!(
            "width {w} not divisible by patch size {ps}"
        )));
    }
    let (idx, rows, n) = patchify_indices(c, h, w, ps);
    let patches = t.gather(x, idx, &[rows, n]);
    let proj = t.matmul(proj_w, patches);
    Ok(t.add(proj, proj_b))
}

/// Inverse of `patchify_embed_t`: project tokens back to patch pixel space and
/// reassemble the (C_out, h, w) map on the given grid.
pub fn unpatchify_project_t(
    t: &mut Tape,
    z: Var,
    grid: (usize, usize),
    inv_w: Var,
    inv_b: Var,
    ps: usize,
) -> Result<Var> {
    let (h, w) = grid;
    let n_tokens = t.value(z).shape()[1];
    if h % ps != 0 || w % ps != 0 {
        return Err(CcError::Shape(format!(
            "grid {h}x{w} not divisible by patch size {ps}"
        )));
    }
    let (gh, gw) = (h / ps, w / ps);
    if gh * gw != n_tokens {
        return Err(CcError::Shape(format!(
            "token count {n_tokens} does not match grid {h}x{w} with patch size {ps} (expected {})",
            gh * gw
        )));
    }
    let rows = t.value(inv_w).shape()[0];
    if rows % (ps * ps) != 0 {
        return Err(CcError::Shape(format!(
            "inverse projection rows {rows} not divisible by patch_size^2 {}",
            ps * ps
        )));
    }
    let c_out = rows / (ps * ps);
    let proj = t.matmul(inv_w, z);
    let y = t.add(proj, inv_b);
    // out[c, pi*ps+di, pj*ps+dj] = y[c*ps^2 + di*ps + dj, pi*gw + pj]
    let mut idx = Vec::with_capacity(c_out * h * w);
    for c in 0..c_out {
        for i in 0..h {
            for j in 0..w {
                let (pi, di) = (i / ps, i % ps);
                let (pj, dj) = (j / ps, j % ps);
                let row = c * ps * ps + di * ps + dj;
                let col = pi * gw + pj;
                idx.push(row * n_tokens + col);
            }
        }
    }
    Ok(t.gather(y, idx, &[c_out, h, w]))
}

/// Tape handles for a full CRATE layer: patch embedding plus L basic modules.
#[derive(Clone)]
pub struct CrateLayerVars {
    pub proj_w: Var,
    /// (d, 1) bias column
    pub proj_b: Var,
    pub inv_w: Var,
    pub inv_b: Var,
    pub patch_size: usize,
    pub modules: Vec<CrateModuleVars>,
}

/// Full CRATE layer: patchify/embed, L basic modules, reassemble one output
/// pixel per token (spatial dims divide by `patch_size`). Post-ISTA token
/// matrices are appended to `observed` when provided.
pub fn crate_layer_forward_t(
    t: &mut Tape,
    x: Var,
    layer: &CrateLayerVars,
    mut observed: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let ps = layer.patch_size;
    let mut z = patchify_embed_t(t, x, layer.proj_w, layer.proj_b, ps)?;
    for m in &layer.modules {
        z = crate_module_forward_t(t, z, m);
        if let Some(obs) = observed.as_deref_mut() {
            obs.push(z);
        }
    }
    unpatchify_project_t(t, z, (h / ps, w / ps), layer.inv_w, layer.inv_b, 1)
}

// ---- pure-array wrappers over the tape implementations ----

fn module_vars_on(t: &mut Tape, p: &CrateModuleParams) -> CrateModuleVars {
    CrateModuleVars {
        bases: p.bases.bases().iter().map(|u| t.leaf2(u.clone())).collect(),
        dict: t.leaf2(p.dictionary.matrix().clone()),
        ln1_gain: t.leaf2(p.ln1_gain.clone()),
        ln1_bias: t.leaf2(p.ln1_bias.clone()),
        ln2_gain: t.leaf2(p.ln2_gain.clone()),
        ln2_bias: t.leaf2(p.ln2_bias.clone()),
        scalars: CrateScalars {
            kappa: p.kappa,
            eps: p.eps,
            eta: p.eta,
            lambda1: p.lambda1,
            pre_norm: p.pre_norm,
            scale_mode: p.scale_mode,
        },
    }
}

pub fn ssa(z: &TokenMatrix, u_k: &Array2<f64>) -> Result<Array2<f64>> {
    if u_k.nrows() != z.dim() {
        return Err(CcError::Shape(format!(
            "basis rows {} != token dim {}",
            u_k.nrows(),
            z.dim()
        )));
    }
    let mut t = Tape::new();
    let zv = t.leaf2(z.data().clone());
    let uv = t.leaf2(u_k.clone());
    let out = ssa_t(&mut t, zv, uv);
    Ok(t.value2(out))
}

pub fn mssa(z: &TokenMatrix, u: &SubspaceBases, eps: f64) -> Result<Array2<f64>> {
    if u.token_dim() != z.dim() {
        return Err(CcError::Shape("basis/token dimension mismatch".into()));
    }
    let mut t = Tape::new();
    let zv = t.leaf2(z.data().clone());
    let bases: Vec<Var> = u.bases().iter().map(|b| t.leaf2(b.clone())).collect();
    let out = mssa_t(&mut t, zv, &bases, eps, true);
    Ok(t.value2(out))
}

pub fn mssa_residual_step(z: &TokenMatrix, params: &CrateModuleParams) -> Result<Array2<f64>> {
    if params.bases.token_dim() != z.dim() {
        return Err(CcError::Shape("basis/token dimension mismatch".into()));
    }
    let mut t = Tape::new();
    let zv = t.leaf2(z.data().clone());
    let bases: Vec<Var> = params.bases.bases().iter().map(|b| t.leaf2(b.clone())).collect();
    let out = mssa_residual_step_t(&mut t, zv, &bases, params.kappa, params.eps, params.scale_mode);
    Ok(t.value2(out))
}

pub fn ista_step(
    z_half: &TokenMatrix,
    dict: &Dictionary,
    eta: f64,
    lambda1: f64,
) -> Result<Array2<f64>> {
    if dict.dim() != z_half.dim() {
        return Err(CcError::Shape(format!(
            "dictionary dim {} != token dim {}",
            dict.dim(),
            z_half.dim()
        )));
    }
    let mut t = Tape::new();
    let zv = t.leaf2(z_half.data().clone());
    let dv = t.leaf2(dict.matrix().clone());
    let out = ista_step_t(&mut t, zv, dv, eta, lambda1);
    Ok(t.value2(out))
}

pub fn crate_module_forward(z: &TokenMatrix, params: &CrateModuleParams) -> Result<Array2<f64>> {
    if params.bases.token_dim() != z.dim() {
        return Err(CcError::Shape("basis/token dimension mismatch".into()));
    }
    let mut t = Tape::new();
    let zv = t.leaf2(z.data().clone());
    let vars = module_vars_on(&mut t, params);
    let out = crate_module_forward_t(&mut t, zv, &vars);
    Ok(t.value2(out))
}

pub fn patchify_embed(x: &Array3<f64>, params: &PatchEmbedParams) -> Result<TokenMatrix> {
    let mut t = Tape::new();
    let xv = t.leaf3(x.clone());
    let d = params.projection.nrows();
    let w = t.leaf2(params.projection.clone());
    let b = t.leaf2(params.proj_bias.clone().into_shape((d, 1)).unwrap());
    let out = patchify_embed_t(&mut t, xv, w, b, params.patch_size)?;
    TokenMatrix::new(t.value2(out))
}

pub fn unpatchify_project(
    z: &TokenMatrix,
    grid: (usize, usize),
    params: &PatchEmbedParams,
) -> Result<Array3<f64>> {
    let mut t = Tape::new();
    let zv = t.leaf2(z.data().clone());
    let rows = params.inverse_projection.nrows();
    let w = t.leaf2(params.inverse_projection.clone());
    let b = t.leaf2(params.inv_bias.clone().into_shape((rows, 1)).unwrap());
    let out = unpatchify_project_t(&mut t, zv, grid, w, b, params.out_patch_size)?;
    Ok(t.value3(out))
}
