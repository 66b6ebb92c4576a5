//! The 10-layer hybrid U-Net depth network: three CNN encoder stages, two
//! CRATE encoder stages, two CRATE decoder stages, three CNN decoder stages,
//! and sigmoid disparity heads on the decoder ladder.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crate_core::{CrateLayerVars, CrateModuleVars, CrateScalars, Dictionary, SubspaceBases};
use crate::error::{CcError, Result};
use crate::linalg::randn;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tape::{PadMode, Tape, Var};

pub const NUM_HEADS: usize = 6;
pub const MODULES_PER_LAYER: usize = 2;

/// Skip-connection fusion between mirror encoder/decoder stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipMode {
    Concat,
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// CNN encoder stage widths [C1, C2, C3]; the decoder mirrors them.
    pub channels: [usize; 3],
    /// Token dimensions of CRATE encoder stages 4 and 5; the decoder mirrors.
    pub crate_dims: [usize; 2],
    pub num_scales: usize,
    pub padding_mode: PadMode,
    pub skips: SkipMode,
    pub scalars: CrateScalars,
    /// Use per-layer eps with eps^2 = p/N so the MSSA residual coefficient is
    /// exactly kappa, independent of token count.
    pub eps_auto: bool,
    pub param_budget: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_width: 640,
            input_height: 192,
            channels: [64, 128, 256],
            crate_dims: [384, 768],
            num_scales: 4,
            padding_mode: PadMode::Reflect,
            skips: SkipMode::Concat,
            scalars: CrateScalars::default(),
            eps_auto: true,
            param_budget: 12_600_000,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for tests and toy-dataset training.
    pub fn toy() -> Self {
        NetworkConfig {
            input_width: 128,
            input_height: 64,
            channels: [8, 12, 16],
            crate_dims: [24, 36],
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width % 32 != 0 || self.input_height % 32 != 0 {
            return Err(CcError::Config(format!(
                "input resolution {}x{} must be divisible by 32",
                self.input_width, self.input_height
            )));
        }
        if !(1..=4).contains(&self.num_scales) {
            return Err(CcError::Config(format!(
                "num_scales {} outside 1..=4",
                self.num_scales
            )));
        }
        for &d in &self.crate_dims {
            if d % NUM_HEADS != 0 {
                return Err(CcError::Config(format!(
                    "crate token dim {d} not divisible by head count {NUM_HEADS}"
                )));
            }
        }
        if self.channels.iter().any(|&c| c < 2) || self.channels[0] % 2 != 0 {
            return Err(CcError::Config("CNN channels too small".into()));
        }
        self.scalars.validate()
    }

    /// Output channel count of each of the 10 layers, encoder first.
    pub fn layer_channels(&self) -> [usize; 10] {
        let [c1, c2, c3] = self.channels;
        let [d4, d5] = self.crate_dims;
        [c1, c2, c3, d4, d5, d4, c3, c2, c1, c1 / 2]
    }

    /// Spatial dims (h, w) of each layer's output for this input resolution.
    pub fn layer_dims(&self) -> [(usize, usize); 10] {
        let (h, w) = (self.input_height, self.input_width);
        [
            (h / 2, w / 2),
            (h / 4, w / 4),
            (h / 8, w / 8),
            (h / 16, w / 16),
            (h / 32, w / 32),
            (h / 16, w / 16),
            (h / 8, w / 8),
            (h / 4, w / 4),
            (h / 2, w / 2),
            (h, w),
        ]
    }

    /// Per-layer CRATE eps for stages 4..=7 (indices into `layer_dims`).
    fn crate_eps(&self, layer_index: usize, d: usize) -> f64 {
        if !self.eps_auto {
            return self.scalars.eps;
        }
        let dims = self.layer_dims();
        // token count equals the stage's output pixel count
        let (h, w) = dims[layer_index];
        let p = d as f64 / NUM_HEADS as f64;
        (p / (h * w) as f64).sqrt()
    }
}

/// Multi-scale sigmoid disparity output, finest scale first.
#[derive(Clone, Debug)]
pub struct DisparityPyramid {
    pub maps: Vec<Array2<f64>>,
}

impl DisparityPyramid {
    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(CcError::Shape("empty disparity pyramid".into()));
        }
        for m in &self.maps {
            if m.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(CcError::Numeric(
                    "disparity outside open interval (0,1)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A named intermediate activation captured during a forward pass.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub name: String,
    pub layer_index: usize,
    pub data: Array3<f64>,
}

// ---- parameter definitions ----

struct ResBlockIds {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    proj: Option<(ParamId, ParamId)>,
}

struct CnnStageIds {
    blocks: [ResBlockIds; 2],
}

struct CrateModuleIds {
    bases: Vec<ParamId>,
    dict: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

struct CrateStageIds {
    proj_w: ParamId,
    proj_b: ParamId,
    inv_w: ParamId,
    inv_b: ParamId,
    modules: Vec<CrateModuleIds>,
    patch_size: usize,
    scalars: CrateScalars,
}

struct HeadIds {
    w: ParamId,
    b: ParamId,
}

pub struct DepthNet {
    cfg: NetworkConfig,
    enc_cnn: Vec<CnnStageIds>,
    enc_crate: Vec<CrateStageIds>,
    dec_crate: Vec<CrateStageIds>,
    dec_cnn: Vec<CnnStageIds>,
    /// Heads for stages 10, 9, ... down to 11 - num_scales (finest first).
    heads: Vec<HeadIds>,
}

fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ArrayD<f64> {
    let scale = (2.0 / (c_in * k * k) as f64).sqrt();
    Array4::from_shape_fn((c_out, c_in, k, k), |_| randn(rng) * scale).into_dyn()
}

fn dense_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let scale = (1.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| randn(rng) * scale).into_dyn()
}

fn define_res_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<ResBlockIds> {
    let conv1_w = store.define(&format!("{name}.conv1.weight"), conv_init(rng, c_out, c_in, 3))?;
    let conv1_b = store.define(
        &format!("{name}.conv1.bias"),
        Array1::zeros(c_out).into_dyn(),
    )?;
    let conv2_w = store.define(&format!("{name}.conv2.weight"), conv_init(rng, c_out, c_out, 3))?;
    let conv2_b = store.define(
        &format!("{name}.conv2.bias"),
        Array1::zeros(c_out).into_dyn(),
    )?;
    let proj = if c_in != c_out {
        let w = store.define(&format!("{name}.proj.weight"), conv_init(rng, c_out, c_in, 1))?;
        let b = store.define(&format!("{name}.proj.bias"), Array1::zeros(c_out).into_dyn())?;
        Some((w, b))
    } else {
        None
    };
    Ok(ResBlockIds {
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        proj,
    })
}

fn define_cnn_stage(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<CnnStageIds> {
    let b1 = define_res_block(store, rng, &format!("{name}.block1"), c_in, c_out)?;
    let b2 = define_res_block(store, rng, &format!("{name}.block2"), c_out, c_out)?;
    Ok(CnnStageIds { blocks: [b1, b2] })
}

#[allow(clippy::too_many_arguments)]
fn define_crate_stage(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    d: usize,
    c_out: usize,
    patch_size: usize,
    scalars: CrateScalars,
) -> Result<CrateStageIds> {
    let in_rows = c_in * patch_size * patch_size;
    let proj_w = store.define(&format!("{name}.embed.weight"), dense_init(rng, d, in_rows))?;
    let proj_b = store.define(
        &format!("{name}.embed.bias"),
        Array2::zeros((d, 1)).into_dyn(),
    )?;
    let inv_w = store.define(&format!("{name}.unembed.weight"), dense_init(rng, c_out, d))?;
    let inv_b = store.define(
        &format!("{name}.unembed.bias"),
        Array2::zeros((c_out, 1)).into_dyn(),
    )?;
    let p = d / NUM_HEADS;
    let mut modules = Vec::with_capacity(MODULES_PER_LAYER);
    for m in 0..MODULES_PER_LAYER {
        let bases = SubspaceBases::init_orthonormal(rng, NUM_HEADS, d, p);
        let mut base_ids = Vec::with_capacity(NUM_HEADS);
        for (k, u) in bases.bases().iter().enumerate() {
            base_ids.push(store.define(
                &format!("{name}.module{m}.basis{k}"),
                u.clone().into_dyn(),
            )?);
        }
        let dict = Dictionary::init_orthogonal(rng, d);
        let dict_id = store.define(
            &format!("{name}.module{m}.dict"),
            dict.matrix().clone().into_dyn(),
        )?;
        let ln1_gain = store.define(
            &format!("{name}.module{m}.ln1.gain"),
            Array2::ones((d, 1)).into_dyn(),
        )?;
        let ln1_bias = store.define(
            &format!("{name}.module{m}.ln1.bias"),
            Array2::zeros((d, 1)).into_dyn(),
        )?;
        let ln2_gain = store.define(
            &format!("{name}.module{m}.ln2.gain"),
            Array2::ones((d, 1)).into_dyn(),
        )?;
        let ln2_bias = store.define(
            &format!("{name}.module{m}.ln2.bias"),
            Array2::zeros((d, 1)).into_dyn(),
        )?;
        modules.push(CrateModuleIds {
            bases: base_ids,
            dict: dict_id,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
        });
    }
    Ok(CrateStageIds {
        proj_w,
        proj_b,
        inv_w,
        inv_b,
        modules,
        patch_size,
        scalars,
    })
}

impl DepthNet {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.channels;
        let [d4, d5] = cfg.crate_dims;
        let concat = cfg.skips == SkipMode::Concat;
        let sk = |c: usize| if concat { 2 * c } else { c };

        let enc_cnn = vec![
            define_cnn_stage(store, rng, "depth.enc1", 3, c1)?,
            define_cnn_stage(store, rng, "depth.enc2", c1, c2)?,
            define_cnn_stage(store, rng, "depth.enc3", c2, c3)?,
        ];
        let mk_scalars = |layer: usize, d: usize| {
            let mut s = cfg.scalars;
            s.eps = cfg.crate_eps(layer, d);
            s
        };
        let enc_crate = vec![
            define_crate_stage(store, rng, "depth.enc4", c3, d4, d4, 2, mk_scalars(3, d4))?,
            define_crate_stage(store, rng, "depth.enc5", d4, d5, d5, 2, mk_scalars(4, d5))?,
        ];
        // decoder CRATE stages run pre-upsample at the resolution of their
        // input, i.e. stage 6 tokens live on layer-5's grid
        let dec_crate = vec![
            define_crate_stage(store, rng, "depth.dec6", d5, d5, d4, 1, mk_scalars(4, d5))?,
            define_crate_stage(store, rng, "depth.dec7", sk(d4), d4, c3, 1, mk_scalars(3, d4))?,
        ];
        let dec_cnn = vec![
            define_cnn_stage(store, rng, "depth.dec8", sk(c3), c2)?,
            define_cnn_stage(store, rng, "depth.dec9", sk(c2), c1)?,
            define_cnn_stage(store, rng, "depth.dec10", sk(c1), c1 / 2)?,
        ];
        let head_channels = [c1 / 2, c1, c2, c3]; // stages 10, 9, 8, 7
        let mut heads = Vec::new();
        for (n, &hc) in head_channels.iter().take(cfg.num_scales).enumerate() {
            let stage = 10 - n;
            // small init keeps the sigmoid away from saturation at start
            let w = store.define(
                &format!("depth.head{stage}.weight"),
                conv_init(rng, 1, hc, 3).mapv(|v| v * 0.1),
            )?;
            let b = store.define(
                &format!("depth.head{stage}.bias"),
                Array1::zeros(1).into_dyn(),
            )?;
            heads.push(HeadIds { w, b });
        }
        Ok(DepthNet {
            cfg: cfg.clone(),
            enc_cnn,
            enc_crate,
            dec_crate,
            dec_cnn,
            heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    fn res_block_t(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binder,
        ids: &ResBlockIds,
        x: Var,
    ) -> Var {
        let pad = self.cfg.padding_mode;
        let w1 = bind.var(t, store, ids.conv1_w);
        let b1 = bind.var(t, store, ids.conv1_b);
        let h = t.conv2d(x, w1, b1, pad, 1);
        let h = t.relu(h);
        let w2 = bind.var(t, store, ids.conv2_w);
        let b2 = bind.var(t, store, ids.conv2_b);
        let y = t.conv2d(h, w2, b2, pad, 1);
        let sc = match &ids.proj {
            Some((pw, pb)) => {
                let pw = bind.var(t, store, *pw);
                let pb = bind.var(t, store, *pb);
                t.conv2d(x, pw, pb, pad, 1)
            }
            Option::None => x,
        };
        let s = t.add(y, sc);
        t.relu(s)
    }

    fn cnn_stage_t(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binder,
        ids: &CnnStageIds,
        x: Var,
    ) -> Var {
        let h = self.res_block_t(t, store, bind, &ids.blocks[0], x);
        self.res_block_t(t, store, bind, &ids.blocks[1], h)
    }

    fn crate_vars(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binder,
        ids: &CrateStageIds,
    ) -> CrateLayerVars {
        let modules = ids
            .modules
            .iter()
            .map(|m| CrateModuleVars {
                bases: m.bases.iter().map(|&u| bind.var(t, store, u)).collect(),
                dict: bind.var(t, store, m.dict),
                ln1_gain: bind.var(t, store, m.ln1_gain),
                ln1_bias: bind.var(t, store, m.ln1_bias),
                ln2_gain: bind.var(t, store, m.ln2_gain),
                ln2_bias: bind.var(t, store, m.ln2_bias),
                scalars: ids.scalars,
            })
            .collect();
        CrateLayerVars {
            proj_w: bind.var(t, store, ids.proj_w),
            proj_b: bind.var(t, store, ids.proj_b),
            inv_w: bind.var(t, store, ids.inv_w),
            inv_b: bind.var(t, store, ids.inv_b),
            patch_size: ids.patch_size,
            modules,
        }
    }

    /// Full 10-layer forward pass on the tape. Returns disparity maps finest
    /// scale first. `obs`, when given, collects named stage outputs and the
    /// post-ISTA token matrices of every CRATE module.
    pub fn forward_t(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binder,
        image: Var,
        mut obs: Option<&mut ForwardObservations>,
    ) -> Result<Vec<Var>> {
        let shape = t.value(image).shape().to_vec();
        if shape != [3, self.cfg.input_height, self.cfg.input_width] {
            return Err(CcError::Shape(format!(
                "input {:?} does not match configured 3x{}x{}",
                shape, self.cfg.input_height, self.cfg.input_width
            )));
        }
        let record = |obs: &mut Option<&mut ForwardObservations>,
                          t: &Tape,
                          name: &str,
                          layer: usize,
                          v: Var| {
            if let Some(o) = obs.as_deref_mut() {
                o.stage_outputs.push((name.to_string(), layer, v));
                let _ = t;
            }
        };

        // encoder
        let mut x = image;
        let mut skips = Vec::new(); // X1, X2, X3, X4
        for (i, stage) in self.enc_cnn.iter().enumerate() {
            let pre = self.cnn_stage_t(t, store, bind, stage, x);
            let ps = t.value(pre).shape().to_vec();
            if ps[1] % 2 != 0 || ps[2] % 2 != 0 {
                return Err(CcError::Shape(format!(
                    "encoder stage {} output {}x{} not divisible by 2 before pooling",
                    i + 1,
                    ps[1],
                    ps[2]
                )));
            }
            x = t.maxpool2(pre);
            record(&mut obs, t, &format!("enc{}", i + 1), i + 1, x);
            skips.push(x);
        }
        for (i, stage) in self.enc_crate.iter().enumerate() {
            let vars = self.crate_vars(t, store, bind, stage);
            let tokens = obs.as_deref_mut().map(|o| &mut o.ista_tokens);
            x = crate::crate_core::crate_layer_forward_t(t, x, &vars, tokens)?;
            record(&mut obs, t, &format!("enc{}", i + 4), i + 4, x);
            if i == 0 {
                skips.push(x); // X4
            }
        }

        // decoder; skip for stage s (7..=10) is encoder output X_{11-s}
        let concat = self.cfg.skips == SkipMode::Concat;
        let mut disparities_coarse_first = Vec::new();
        for (i, stage) in self.dec_crate.iter().enumerate() {
            let s = 6 + i;
            let input = if s >= 7 && concat {
                let skip = skips[10 - s]; // X4 for stage 7
                t.concat_channels(x, skip)
            } else {
                x
            };
            let vars = self.crate_vars(t, store, bind, stage);
            let tokens = obs.as_deref_mut().map(|o| &mut o.ista_tokens);
            let y = crate::crate_core::crate_layer_forward_t(t, input, &vars, tokens)?;
            x = t.upsample2(y);
            record(&mut obs, t, &format!("dec{s}"), s, x);
            if s == 7 && self.cfg.num_scales >= 4 {
                disparities_coarse_first.push(self.head_t(t, store, bind, &self.heads[3], x));
            }
        }
        for (i, stage) in self.dec_cnn.iter().enumerate() {
            let s = 8 + i;
            let input = if concat {
                let skip = skips[10 - s];
                t.concat_channels(x, skip)
            } else {
                x
            };
            let up = t.upsample2(input);
            x = self.cnn_stage_t(t, store, bind, stage, up);
            record(&mut obs, t, &format!("dec{s}"), s, x);
            let scale = 11 - s; // 3, 2, 1
            if self.cfg.num_scales >= scale {
                disparities_coarse_first
                    .push(self.head_t(t, store, bind, &self.heads[scale - 1], x));
            }
        }
        disparities_coarse_first.reverse();
        Ok(disparities_coarse_first)
    }

    fn head_t(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binder,
        ids: &HeadIds,
        x: Var,
    ) -> Var {
        let w = bind.var(t, store, ids.w);
        let b = bind.var(t, store, ids.b);
        let pre = t.conv2d(x, w, b, self.cfg.padding_mode, 1);
        let d = t.sigmoid(pre);
        let shape = t.value(d).shape().to_vec();
        t.reshape(d, &[shape[1], shape[2]])
    }

    /// Evaluation-mode forward pass on a fresh tape.
    pub fn predict(&self, store: &ParamStore, image: &Array3<f64>) -> Result<DisparityPyramid> {
        let mut t = Tape::new();
        let mut bind = Binder::new(store);
        let img = t.leaf3(image.clone());
        let vars = self.forward_t(&mut t, store, &mut bind, img, Option::None)?;
        let maps = vars.into_iter().map(|v| t.value2(v)).collect();
        let pyr = DisparityPyramid { maps };
        pyr.validate()?;
        Ok(pyr)
    }
}

/// Activations captured during a forward pass for analysis.
#[derive(Default)]
pub struct ForwardObservations {
    /// (name, layer index, output) per stage.
    pub stage_outputs: Vec<(String, usize, Var)>,
    /// Post-ISTA token matrices, in execution order across CRATE modules.
    pub ista_tokens: Vec<Var>,
}

/// Learnable scalar totals.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub depth_net: usize,
    pub pose_net: usize,
    pub combined: usize,
}

pub fn count_parameters(store: &ParamStore) -> ParameterCounts {
    let depth_net = store.scalar_count("depth.");
    let pose_net = store.scalar_count("pose.");
    ParameterCounts {
        depth_net,
        pose_net,
        combined: depth_net + pose_net,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            input_width: 64,
            input_height: 32,
            channels: [8, 12, 16],
            crate_dims: [24, 36],
            ..NetworkConfig::default()
        }
    }

    fn build_tiny() -> (ParamStore, DepthNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DepthNet::build(&mut store, &mut rng, &tiny_cfg()).unwrap();
        (store, net)
    }

    fn random_image(cfg: &NetworkConfig, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, cfg.input_height, cfg.input_width), |_| {
            rng.gen_range(0.0..1.0)
        })
    }

    #[test]
    fn resolution_ladder_and_scale_count() {
        let (store, net) = build_tiny();
        let img = random_image(net.config(), 1);
        let pyr = net.predict(&store, &img).unwrap();
        assert_eq!(pyr.maps.len(), 4);
        // finest first: (H, W), (H/2, W/2), ...
        assert_eq!(pyr.maps[0].dim(), (32, 64));
        assert_eq!(pyr.maps[1].dim(), (16, 32));
        assert_eq!(pyr.maps[2].dim(), (8, 16));
        assert_eq!(pyr.maps[3].dim(), (4, 8));
        pyr.validate().unwrap();
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, net) = build_tiny();
        let img = random_image(net.config(), 2);
        let a = net.predict(&store, &img).unwrap();
        let b = net.predict(&store, &img).unwrap();
        for (x, y) in a.maps.iter().zip(b.maps.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn resolution_mismatch_is_shape_error() {
        let (store, net) = build_tiny();
        let img = Array3::zeros((3, 32, 32));
        assert!(matches!(net.predict(&store, &img), Err(CcError::Shape(_))));
    }

    #[test]
    fn zero_head_weights_give_half_disparity() {
        let (mut store, net) = build_tiny();
        for stage in 7..=10 {
            for part in ["weight", "bias"] {
                let id = store.id(&format!("depth.head{stage}.{part}")).unwrap();
                store.value_mut(id).fill(0.0);
            }
        }
        let img = random_image(net.config(), 3);
        let pyr = net.predict(&store, &img).unwrap();
        for m in &pyr.maps {
            assert!(m.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn num_scales_controls_pyramid_length() {
        for n in 1..=4 {
            let mut cfg = tiny_cfg();
            cfg.num_scales = n;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let net = DepthNet::build(&mut store, &mut rng, &cfg).unwrap();
            let img = random_image(&cfg, 4);
            let pyr = net.predict(&store, &img).unwrap();
            assert_eq!(pyr.maps.len(), n);
            assert_eq!(pyr.maps[0].dim(), (32, 64));
        }
    }

    #[test]
    fn skips_none_changes_only_decoder_input_widths() {
        let mut cfg = tiny_cfg();
        cfg.skips = SkipMode::None;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = DepthNet::build(&mut store, &mut rng, &cfg).unwrap();
        let img = random_image(&cfg, 7);
        let pyr = net.predict(&store, &img).unwrap();
        assert_eq!(pyr.maps.len(), 4);
        pyr.validate().unwrap();
    }

    #[test]
    fn default_config_hits_parameter_budget() {
        let cfg = NetworkConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        DepthNet::build(&mut store, &mut rng, &cfg).unwrap();
        let counts = count_parameters(&store);
        let budget = cfg.param_budget as f64;
        let dev = (counts.depth_net as f64 - budget).abs() / budget;
        assert!(
            dev <= 0.10,
            "depth net has {} params, {:.1}% off the {} budget",
            counts.depth_net,
            dev * 100.0,
            cfg.param_budget
        );
    }

    #[test]
    fn tiny_count_matches_enumeration_oracle() {
        let (store, _) = build_tiny();
        // independent enumeration: every depth.* tensor, summed elementwise
        let mut want = 0usize;
        for (_, name, v) in store.iter() {
            if name.starts_with("depth.") {
                want += v.iter().count();
            }
        }
        assert_eq!(count_parameters(&store).depth_net, want);
        assert!(want > 0);
    }

    #[test]
    fn single_conv_count_example() {
        // 3x3 conv, 3 -> 32 channels with bias
        assert_eq!(3 * 3 * 3 * 32 + 32, 896);
    }

    #[test]
    fn observations_capture_stages_and_tokens() {
        let (store, net) = build_tiny();
        let img = random_image(net.config(), 9);
        let mut t = Tape::new();
        let mut bind = Binder::new(&store);
        let iv = t.leaf3(img);
        let mut obs = ForwardObservations::default();
        net.forward_t(&mut t, &store, &mut bind, iv, Some(&mut obs))
            .unwrap();
        assert_eq!(obs.stage_outputs.len(), 10);
        // 4 CRATE layers x 2 modules
        assert_eq!(obs.ista_tokens.len(), 8);
        // ISTA outputs are nonnegative by construction
        for &tok in &obs.ista_tokens {
            assert!(t.value(tok).iter().all(|&v| v >= 0.0));
        }
        // encoder ladder dims
        let dims: Vec<Vec<usize>> = obs
            .stage_outputs
            .iter()
            .map(|(_, _, v)| t.value(*v).shape().to_vec())
            .collect();
        assert_eq!(dims[0][1..], [16, 32]);
        assert_eq!(dims[4][1..], [1, 2]);
        assert_eq!(dims[9][1..], [32, 64]);
    }

    #[test]
    fn padding_switch_preserves_interior() {
        // one residual block applied under both padding modes with shared
        // weights: interior pixels (>= 2 from the border) agree
        let mut cfg = tiny_cfg();
        cfg.padding_mode = PadMode::Reflect;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net_r = DepthNet::build(&mut store, &mut rng, &cfg).unwrap();
        let mut cfg_z = cfg.clone();
        cfg_z.padding_mode = PadMode::Zeros;
        let net_z = DepthNet {
            cfg: cfg_z,
            ..DepthNet::build(&mut ParamStore::new(), &mut ChaCha8Rng::seed_from_u64(10), &cfg)
                .unwrap()
        };
        let img = random_image(&cfg, 11);
        let run_block = |net: &DepthNet| -> Array3<f64> {
            let mut t = Tape::new();
            let mut bind = Binder::new(&store);
            let iv = t.leaf3(img.clone());
            let y = net.res_block_t(&mut t, &store, &mut bind, &net.enc_cnn[0].blocks[0], iv);
            t.value3(y)
        };
        let yr = run_block(&net_r);
        let yz = run_block(&net_z);
        let (c, h, w) = yr.dim();
        for ci in 0..c {
            for i in 2..h - 2 {
                for j in 2..w - 2 {
                    assert!((yr[[ci, i, j]] - yz[[ci, i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let mut cfg = tiny_cfg();
        cfg.num_scales = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.crate_dims = [25, 36];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.input_width = 100;
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::default().validate().is_ok());
    }
}
