//! Command-line entry point: train | eval | infer | toy-make | sparsity |
//! features | timing | params, each writing its outputs plus an
//! effective-config snapshot under a user-chosen directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{ImageBuffer, Luma};
use ndarray::{Array2, ArrayD, IxDyn};

use crate::analysis;
use crate::checkpoint::Checkpoint;
use crate::config::AppConfig;
use crate::depth_net::{count_parameters, SkipMode};
use crate::error::{CcError, Result};
use crate::evaluator;
use crate::kitti_data::{self, ToyScene};
use crate::params::ParamStore;
use crate::selfsup_loss::{disp_to_depth, LossAtScale, PhotometricAgg};
use crate::tape::PadMode;
use crate::trainer::{self, Models, TrainConfig};

pub const RAW_ARRAY_MAGIC: &[u8; 8] = b"CCDARR01";

#[derive(Parser)]
#[command(
    name = "ccdepth",
    about = "Hybrid CNN + CRATE self-supervised monocular depth estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PaddingArg {
    Reflect,
    Zeros,
}

#[derive(Clone, Copy, ValueEnum)]
enum SkipsArg {
    Concat,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Sum,
    Min,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleLossArg {
    Upsampled,
    Native,
}

/// Flags that override config-file values; unset flags keep the file's value.
#[derive(Args)]
struct Overrides {
    /// Config preset name (default | toy) or path to a JSON file
    #[arg(long, default_value = "toy")]
    config: String,
    /// Stop after this many optimizer steps
    #[arg(long)]
    max_steps: Option<usize>,
    /// Number of prediction scales (1..=4)
    #[arg(long)]
    num_scales: Option<usize>,
    /// Convolution padding mode
    #[arg(long, value_enum)]
    padding: Option<PaddingArg>,
    /// Skip-connection fusion
    #[arg(long, value_enum)]
    skips: Option<SkipsArg>,
    /// Photometric aggregation over the two references
    #[arg(long, value_enum)]
    photometric_agg: Option<AggArg>,
    /// Resolution at which coarse-scale losses are computed
    #[arg(long, value_enum)]
    loss_at_scale: Option<ScaleLossArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut AppConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.max_steps {
            t.max_steps = Some(v);
        }
        if let Some(v) = self.num_scales {
            t.network.num_scales = v;
        }
        if let Some(v) = self.padding {
            t.network.padding_mode = match v {
                PaddingArg::Reflect => PadMode::Reflect,
                PaddingArg::Zeros => PadMode::Zeros,
            };
        }
        if let Some(v) = self.skips {
            t.network.skips = match v {
                SkipsArg::Concat => SkipMode::Concat,
                SkipsArg::None => SkipMode::None,
            };
        }
        if let Some(v) = self.photometric_agg {
            t.loss.photometric_agg = match v {
                AggArg::Sum => PhotometricAgg::Sum,
                AggArg::Min => PhotometricAgg::Min,
            };
        }
        if let Some(v) = self.loss_at_scale {
            t.loss.loss_at_scale = match v {
                ScaleLossArg::Upsampled => LossAtScale::Upsampled,
                ScaleLossArg::Native => LossAtScale::Native,
            };
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a toy dataset directory (or generate one in memory with
    /// --dataset toy)
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Toy dataset directory, or the literal `toy` to generate in memory
        #[arg(long, default_value = "toy")]
        dataset: String,
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against toy ground-truth depth
    Eval {
        /// Toy dataset directory, or `toy` to regenerate from config
        #[arg(long, default_value = "toy")]
        dataset: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out/eval")]
        out: PathBuf,
        #[arg(long, default_value = "toy")]
        config: String,
    },
    /// Predict disparity and depth for one image
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "out/infer")]
        out: PathBuf,
    },
    /// Generate and persist a toy dataset
    ToyMake {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/toy")]
        out: PathBuf,
    },
    /// Count non-zero elements after every CRATE ISTA block
    Sparsity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Toy dataset directory, or `toy` to regenerate from config
        #[arg(long, default_value = "toy")]
        dataset: String,
        /// Images per split to instrument
        #[arg(long, default_value_t = 100)]
        sample: usize,
        #[arg(long, default_value = "out/sparsity")]
        out: PathBuf,
        #[arg(long, default_value = "toy")]
        config: String,
    },
    /// Export per-layer feature-map grids
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated layer ids in 1..=10
        #[arg(long, default_value = "3,5,6,8")]
        layers: String,
        #[arg(long, default_value = "out/features")]
        out: PathBuf,
    },
    /// Measure single-image inference latency
    Timing {
        /// Checkpoint to time; a fresh config-built network when omitted
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value = "out/timing")]
        out: PathBuf,
    },
    /// Print learnable-parameter totals for a configuration
    Params {
        #[arg(long, default_value = "default")]
        config: String,
    },
}

/// Self-describing raw float container: magic, u32 ndim, u64 dims, f32 data.
pub fn write_raw_array(path: &Path, data: &ArrayD<f64>) -> Result<()> {
    let mut out = Vec::new();
    out.write_all(RAW_ARRAY_MAGIC)?;
    out.write_u32::<LittleEndian>(data.ndim() as u32)?;
    for &d in data.shape() {
        out.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in data.iter() {
        out.write_f32::<LittleEndian>(x as f32)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_raw_array(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let mut magic = [0u8; 8];
    std::io::Read::read_exact(&mut r, &mut magic)?;
    if &magic != RAW_ARRAY_MAGIC {
        return Err(CcError::Domain(format!(
            "{} is not a raw array file",
            path.display()
        )));
    }
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f32::<LittleEndian>()? as f64);
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| CcError::Shape(e.to_string()))
}

fn save_disparity_png(path: &Path, disp: &Array2<f64>) -> Result<()> {
    let (h, w) = disp.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(disp[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path)?;
    Ok(())
}

/// Rebuild the models recorded in a checkpoint and load its weights.
fn load_models(ck_path: &Path) -> Result<(TrainConfig, ParamStore, Models)> {
    let ck = Checkpoint::load(ck_path)?;
    let cfg: TrainConfig = serde_json::from_str(&ck.config_json)
        .map_err(|e| CcError::Checkpoint(format!("checkpoint config: {e}")))?;
    let mut store = ParamStore::new();
    let models = trainer::build_models(&mut store, &cfg)?;
    ck.load_into(&mut store)?;
    Ok((cfg, store, models))
}

fn load_scenes(dataset: &str, cfg: &AppConfig) -> Result<Vec<ToyScene>> {
    if dataset == "toy" {
        Ok(kitti_data::make_toy_dataset(&cfg.toy))
    } else {
        kitti_data::load_toy_dataset(Path::new(dataset))
    }
}

fn cmd_train(overrides: &Overrides, dataset: &str, out: &Path) -> Result<()> {
    let mut cfg = AppConfig::resolve(&overrides.config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    cfg.write_effective(out)?;
    let scenes = load_scenes(dataset, &cfg)?;
    let triplets: Vec<_> = scenes.into_iter().map(|s| s.triplet).collect();
    for t in &triplets {
        let (_, h, w) = t.target.dim();
        if (w, h) != (cfg.train.network.input_width, cfg.train.network.input_height) {
            return Err(CcError::Config(format!(
                "dataset frames are {w}x{h} but the network expects {}x{}",
                cfg.train.network.input_width, cfg.train.network.input_height
            )));
        }
    }
    let summary = trainer::fit(&cfg.train, &triplets, out)?;
    println!(
        "trained {} steps; final loss {:.6}; log at {}",
        summary.steps_run,
        summary.final_loss,
        summary.log_path.display()
    );
    Ok(())
}

fn cmd_eval(dataset: &str, ck: &Path, out: &Path, config: &str) -> Result<()> {
    let cfg = AppConfig::resolve(config)?;
    let (_, store, models) = load_models(ck)?;
    cfg.write_effective(out)?;
    let scenes = load_scenes(dataset, &cfg)?;
    let pairs: Vec<_> = scenes
        .iter()
        .map(|s| (&s.triplet.target, &s.gt_depth))
        .collect();
    let (agg, per_image, skipped) =
        evaluator::evaluate_split(&models.depth, &store, pairs.into_iter(), &cfg.eval)?;
    evaluator::write_reports(out, &agg, &per_image)?;
    println!(
        "abs_rel {:.4} sq_rel {:.4} rmse {:.4} rmse_log {:.4} d1 {:.4} d2 {:.4} d3 {:.4} ({} images, {} skipped)",
        agg.abs_rel, agg.sq_rel, agg.rmse, agg.rmse_log, agg.delta1, agg.delta2, agg.delta3,
        agg.n_images, skipped
    );
    Ok(())
}

fn cmd_infer(ck: &Path, image: &Path, out: &Path) -> Result<()> {
    let (cfg, store, models) = load_models(ck)?;
    fs::create_dir_all(out)?;
    let img = kitti_data::load_image_resized(
        image,
        cfg.network.input_width,
        cfg.network.input_height,
    )?;
    let pyr = models.depth.predict(&store, &img)?;
    let disp = &pyr.maps[0];
    let depth = disp_to_depth(disp, cfg.loss.min_depth, cfg.loss.max_depth)?;
    write_raw_array(&out.join("disparity.bin"), &disp.clone().into_dyn())?;
    write_raw_array(&out.join("depth.bin"), &depth.data.clone().into_dyn())?;
    save_disparity_png(&out.join("disparity.png"), disp)?;
    fs::write(
        out.join("effective_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    println!("wrote disparity + depth for {}", image.display());
    Ok(())
}

fn cmd_toy_make(config: &str, scenes: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = AppConfig::resolve(config)?;
    if let Some(n) = scenes {
        cfg.toy.scenes = n;
    }
    if let Some(s) = seed {
        cfg.toy.seed = s;
    }
    cfg.write_effective(out)?;
    let data = kitti_data::make_toy_dataset(&cfg.toy);
    kitti_data::save_toy_dataset(out, &cfg.toy, &data)?;
    println!("wrote {} toy scenes to {}", data.len(), out.display());
    Ok(())
}

fn cmd_sparsity(ck: &Path, dataset: &str, sample: usize, out: &Path, config: &str) -> Result<()> {
    let cfg = AppConfig::resolve(config)?;
    let (_, store, models) = load_models(ck)?;
    fs::create_dir_all(out)?;
    cfg.write_effective(out)?;
    let scenes = load_scenes(dataset, &cfg)?;
    let images: Vec<_> = scenes
        .iter()
        .take(sample.max(1))
        .map(|s| s.triplet.target.clone())
        .collect();
    let records = analysis::count_nonzero(&models.depth, &store, &images, "train")?;
    analysis::write_sparsity_csv(&out.join("sparsity.csv"), &records)?;
    fs::write(
        out.join("sparsity.json"),
        serde_json::to_string_pretty(&records)?,
    )?;
    for r in &records {
        println!(
            "layer {} module {}: {:.2}% non-zero",
            r.layer_id,
            r.module_index,
            r.percentage * 100.0
        );
    }
    Ok(())
}

fn cmd_features(ck: &Path, image: &Path, layers: &str, out: &Path) -> Result<()> {
    let (cfg, store, models) = load_models(ck)?;
    let layer_ids: Vec<usize> = layers
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CcError::Domain(format!("bad layer id `{s}`; valid ids are 1..=10")))
        })
        .collect::<Result<_>>()?;
    let img = kitti_data::load_image_resized(
        image,
        cfg.network.input_width,
        cfg.network.input_height,
    )?;
    let sidecars = analysis::export_feature_maps(&models.depth, &store, &img, &layer_ids, out)?;
    println!("exported {} layer grids to {}", sidecars.len(), out.display());
    Ok(())
}

fn cmd_timing(ck: Option<&Path>, config: &str, runs: usize, out: &Path) -> Result<()> {
    let (cfg, store, models) = match ck {
        Some(p) => load_models(p)?,
        Option::None => {
            let app = AppConfig::resolve(config)?;
            let mut store = ParamStore::new();
            let models = trainer::build_models(&mut store, &app.train)?;
            (app.train, store, models)
        }
    };
    fs::create_dir_all(out)?;
    let mut rng_img = ndarray::Array3::zeros((
        3,
        cfg.network.input_height,
        cfg.network.input_width,
    ));
    rng_img.mapv_inplace(|_| 0.5);
    let report = analysis::time_inference(&models.depth, &store, &rng_img, runs, 2)?;
    fs::write(
        out.join("timing.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "mean {:.2} ms (std {:.2}, p50 {:.2}, p90 {:.2}) over {} runs on {}",
        report.mean_ms, report.std_ms, report.p50_ms, report.p90_ms, runs, report.hardware
    );
    Ok(())
}

fn cmd_params(config: &str) -> Result<()> {
    let cfg = AppConfig::resolve(config)?;
    cfg.validate()?;
    let mut store = ParamStore::new();
    trainer::build_models(&mut store, &cfg.train)?;
    let counts = count_parameters(&store);
    println!("depth net parameters:  {}", counts.depth_net);
    println!("pose net parameters:   {}", counts.pose_net);
    println!("combined parameters:   {}", counts.combined);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::Train {
            overrides,
            dataset,
            out,
        } => cmd_train(overrides, dataset, out),
        Command::Eval {
            dataset,
            checkpoint,
            out,
            config,
        } => cmd_eval(dataset, checkpoint, out, config),
        Command::Infer {
            checkpoint,
            image,
            out,
        } => cmd_infer(checkpoint, image, out),
        Command::ToyMake {
            config,
            scenes,
            seed,
            out,
        } => cmd_toy_make(config, *scenes, *seed, out),
        Command::Sparsity {
            checkpoint,
            dataset,
            sample,
            out,
            config,
        } => cmd_sparsity(checkpoint, dataset, *sample, out, config),
        Command::Features {
            checkpoint,
            image,
            layers,
            out,
        } => cmd_features(checkpoint, image, layers, out),
        Command::Timing {
            checkpoint,
            config,
            runs,
            out,
        } => cmd_timing(checkpoint.as_deref(), config, *runs, out),
        Command::Params { config } => cmd_params(config),
    }
}

/// Exit code contract: 0 success, 1 validation/config error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CcError::Config(_) | CcError::Domain(_) | CcError::Shape(_) => 1,
                _ => 2,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn raw_array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let a = Array2::from_shape_fn((3, 5), |(i, j)| i as f64 + j as f64 * 0.25).into_dyn();
        write_raw_array(&p, &a).unwrap();
        let b = read_raw_array(&p).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6); // f32 round trip
        }
    }

    #[test]
    fn help_and_unknown_flags_exit_codes() {
        assert_eq!(run(["ccdepth", "--help"]), 0);
        assert_eq!(run(["ccdepth", "params", "--help"]), 0);
        assert_eq!(run(["ccdepth", "params", "--bogus-flag"]), 1);
        assert_eq!(run(["ccdepth", "no-such-command"]), 1);
    }

    #[test]
    fn params_toy_config_succeeds() {
        assert_eq!(run(["ccdepth", "params", "--config", "toy"]), 0);
    }

    #[test]
    fn missing_checkpoint_is_runtime_error() {
        assert_eq!(
            run([
                "ccdepth",
                "infer",
                "--checkpoint",
                "/nonexistent.ckpt",
                "--image",
                "/nonexistent.png"
            ]),
            2
        );
    }
}
