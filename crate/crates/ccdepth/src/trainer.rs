//! Training loop: Adam over the joint depth + pose parameter store, the
//! two-phase learning-rate schedule, per-step CSV logging, and checkpoint
//! save/resume that reproduces the interrupted trajectory exactly.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::depth_net::{DepthNet, NetworkConfig};
use crate::error::{CcError, Result};
use crate::kitti_data::FrameTriplet;
use crate::params::{Binder, ParamId, ParamStore};
use crate::pose_net::PoseNet;
use crate::selfsup_loss::{multi_scale_loss_t, LossBundle, LossConfig, ReferenceVars};
use crate::tape::Tape;

pub const DEFAULT_POSE_WIDTHS: [usize; 7] = [16, 32, 64, 128, 128, 128, 128];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_drop: f64,
    pub lr_drop_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Checkpoint every this many epochs (the final epoch always saves).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps; 0 emits the initial checkpoint
    /// and exits.
    pub max_steps: Option<usize>,
    /// Global-norm gradient clipping threshold; off by default.
    pub grad_clip: Option<f64>,
    pub pose_widths: Vec<usize>,
    pub network: NetworkConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr_initial: 1e-4,
            lr_after_drop: 1e-5,
            lr_drop_epoch: 15,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            checkpoint_every: 1,
            max_steps: Option::None,
            grad_clip: Option::None,
            pose_widths: DEFAULT_POSE_WIDTHS.to_vec(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_initial <= 0.0 || self.lr_after_drop <= 0.0 {
            return Err(CcError::Config("learning rates must be positive".into()));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(CcError::Config(format!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(CcError::Config("batch_size must be positive".into()));
        }
        self.network.validate()
    }

    /// Toy-scale defaults matching `NetworkConfig::toy`.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 2,
            network: NetworkConfig::toy(),
            ..TrainConfig::default()
        }
    }
}

/// 1e-4 for epochs before the drop epoch (0-based), 1e-5 from it onward.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(CcError::Domain(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    Ok(if epoch < cfg.lr_drop_epoch {
        cfg.lr_initial
    } else {
        cfg.lr_after_drop
    })
}

pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    pub t: usize,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<ArrayD<f64>> = store
            .iter()
            .map(|(_, _, p)| ArrayD::zeros(p.raw_dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<usize, ArrayD<f64>>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (idx, g) in grads {
            let m = &mut self.m[*idx];
            let v = &mut self.v[*idx];
            m.zip_mut_with(g, |mi, &gi| *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi);
            let p = store.value_mut(ParamId(*idx));
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mh = mi / bc1;
                    let vh = vi / bc2;
                    *pi -= lr * mh / (vh.sqrt() + cfg.adam_eps);
                });
        }
    }
}

pub struct Models {
    pub depth: DepthNet,
    pub pose: PoseNet,
}

pub fn build_models(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Models> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let depth = DepthNet::build(store, &mut rng, &cfg.network)?;
    let pose = PoseNet::build(store, &mut rng, &cfg.pose_widths)?;
    Ok(Models { depth, pose })
}

fn check_finite(bundle: &LossBundle) -> Result<()> {
    for (name, v) in [
        ("photometric", bundle.photometric),
        ("smoothness", bundle.smoothness),
        ("total", bundle.total),
    ] {
        if !v.is_finite() {
            return Err(CcError::Numeric(format!(
                "non-finite {name} loss component: {v}"
            )));
        }
    }
    Ok(())
}

/// Forward both networks on one triplet, build the multi-scale loss, and
/// return (loss bundle, accumulated parameter gradients).
fn sample_backward(
    models: &Models,
    store: &ParamStore,
    triplet: &FrameTriplet,
    loss_cfg: &LossConfig,
    grads: &mut HashMap<usize, ArrayD<f64>>,
    inv_batch: f64,
) -> Result<LossBundle> {
    triplet.validate()?;
    let mut t = Tape::new();
    let mut bind = Binder::new(store);
    let target = t.leaf3(triplet.target.clone());
    let disparities = models.depth.forward_t(&mut t, store, &mut bind, target, Option::None)?;

    let mut refs = Vec::with_capacity(2);
    for ref_img in [&triplet.prev, &triplet.next] {
        let pair = concatenate(
            Axis(0),
            &[triplet.target.view(), ref_img.view()],
        )
        .map_err(|e| CcError::Shape(e.to_string()))?;
        let pair_v = t.leaf3(pair);
        let (axis, trans) = models.pose.forward_t(&mut t, store, &mut bind, pair_v)?;
        refs.push(ReferenceVars {
            image: t.leaf3(ref_img.clone()),
            axis_angle: axis,
            translation: trans,
        });
    }
    let refs: [ReferenceVars; 2] = refs
        .try_into()
        .map_err(|_| CcError::Shape("expected two references".into()))?;
    let (total, bundle) =
        multi_scale_loss_t(&mut t, &disparities, target, &refs, &triplet.intrinsics, loss_cfg)?;
    check_finite(&bundle)?;
    t.backward(total);
    for (id, g) in bind.grads(&t) {
        grads
            .entry(id.0)
            .and_modify(|acc| acc.zip_mut_with(&g, |a, &b| *a += b * inv_batch))
            .or_insert_with(|| g.mapv(|x| x * inv_batch));
    }
    Ok(bundle)
}

/// One optimizer step over a batch; returns the batch-mean loss bundle.
pub fn train_step(
    models: &Models,
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &[FrameTriplet],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(CcError::Domain("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads: HashMap<usize, ArrayD<f64>> = HashMap::new();
    let mut agg = LossBundle::default();
    for triplet in batch {
        let b = sample_backward(models, store, triplet, &cfg.loss, &mut grads, inv)?;
        agg.photometric += b.photometric * inv;
        agg.smoothness += b.smoothness * inv;
        agg.total += b.total * inv;
        agg.mask_coverage += b.mask_coverage * inv;
        if agg.per_scale.is_empty() {
            agg.per_scale = vec![0.0; b.per_scale.len()];
        }
        for (a, s) in agg.per_scale.iter_mut().zip(b.per_scale.iter()) {
            *a += s * inv;
        }
    }
    if let Some(clip) = cfg.grad_clip {
        let norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = clip / norm;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * s);
            }
        }
    }
    adam.step(store, &grads, lr, cfg);
    Ok(agg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    step: usize,
    adam_t: usize,
    rng_word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn save_training_checkpoint(
    path: &Path,
    store: &ParamStore,
    adam: &Adam,
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<()> {
    let mut ck = Checkpoint::from_store(store, &serde_json::to_string(cfg)?);
    ck.state_json = serde_json::to_string(state)?;
    for (id, name, _) in store.iter() {
        ck.opt_tensors
            .push((format!("adam.m.{name}"), adam.m[id.0].clone()));
        ck.opt_tensors
            .push((format!("adam.v.{name}"), adam.v[id.0].clone()));
    }
    ck.save(path)
}

fn restore_optimizer(ck: &Checkpoint, store: &ParamStore, adam: &mut Adam) -> Result<()> {
    for (name, data) in &ck.opt_tensors {
        let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
            (0, p)
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            (1, p)
        } else {
            continue;
        };
        let id = store.id(pname).ok_or_else(|| {
            CcError::Checkpoint(format!("optimizer tensor {name} has no matching parameter"))
        })?;
        if slot == 0 {
            adam.m[id.0].assign(data);
        } else {
            adam.v[id.0].assign(data);
        }
    }
    Ok(())
}

/// Epoch loop with checkpointing. Resumes from `out_dir/latest.ckpt` when
/// present; training-curve CSV is appended at `out_dir/train_log.csv`.
pub fn fit(cfg: &TrainConfig, dataset: &[FrameTriplet], out_dir: &Path) -> Result<FitSummary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CcError::Dataset("empty training dataset".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut store = ParamStore::new();
    let models = build_models(&mut store, cfg)?;
    let mut adam = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut start_epoch = 0usize;
    let mut step = 0usize;

    let latest = out_dir.join("latest.ckpt");
    if latest.is_file() {
        let ck = Checkpoint::load(&latest)?;
        ck.load_into(&mut store)?;
        restore_optimizer(&ck, &store, &mut adam)?;
        if !ck.state_json.is_empty() {
            let state: TrainState = serde_json::from_str(&ck.state_json)?;
            start_epoch = state.epoch;
            step = state.step;
            adam.t = state.adam_t;
            rng.set_word_pos(state.rng_word_pos);
        }
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if log.metadata()?.len() == 0 {
        writeln!(log, "step,epoch,lr,photometric,smoothness,total,mask_coverage")?;
    }

    let state_of = |epoch: usize, step: usize, adam: &Adam, rng: &ChaCha8Rng| TrainState {
        epoch,
        step,
        adam_t: adam.t,
        rng_word_pos: rng.get_word_pos(),
    };

    let mut final_loss = f64::NAN;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    if max_steps == 0 || step >= max_steps {
        save_training_checkpoint(&latest, &store, &adam, cfg, &state_of(start_epoch, step, &adam, &rng))?;
        return Ok(FitSummary {
            steps_run: 0,
            final_loss,
            log_path,
            checkpoint_path: latest,
        });
    }

    let mut steps_run = 0usize;
    'epochs: for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(cfg, epoch)?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FrameTriplet> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let bundle = train_step(&models, &mut store, &mut adam, &batch, lr, cfg)?;
            step += 1;
            steps_run += 1;
            final_loss = bundle.total;
            writeln!(
                log,
                "{step},{epoch},{lr},{},{},{},{}",
                bundle.photometric, bundle.smoothness, bundle.total, bundle.mask_coverage
            )?;
            if step >= max_steps {
                save_training_checkpoint(&latest, &store, &adam, cfg, &state_of(epoch, step, &adam, &rng))?;
                break 'epochs;
            }
        }
        let state = state_of(epoch + 1, step, &adam, &rng);
        if (epoch + 1) % cfg.checkpoint_every.max(1) == 0 || epoch + 1 == cfg.epochs {
            save_training_checkpoint(
                &out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1)),
                &store,
                &adam,
                cfg,
                &state,
            )?;
        }
        save_training_checkpoint(&latest, &store, &adam, cfg, &state)?;
    }
    log.flush()?;
    Ok(FitSummary {
        steps_run,
        final_loss,
        log_path,
        checkpoint_path: latest,
    })
}
