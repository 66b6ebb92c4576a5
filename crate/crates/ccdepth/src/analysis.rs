//! Interpretability instrumentation: exact non-zero counting of post-ISTA
//! CRATE tokens, per-layer feature-map export, and inference timing.

use std::fs;
use std::path::Path;
use std::time::Instant;

use image::{GrayImage, Luma};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::depth_net::{DepthNet, DisparityPyramid, ForwardObservations};
use crate::error::{CcError, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::Tape;

/// Layers holding CRATE modules, in forward execution order.
pub const CRATE_LAYERS: [usize; 4] = [4, 5, 6, 7];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsityRecord {
    pub layer_id: usize,
    /// 1-based module position within the layer.
    pub module_index: usize,
    pub nonzero_count: u64,
    pub total_count: u64,
    pub percentage: f64,
    pub split_tag: String,
}

/// Run the network over a sample of images with ISTA hooks enabled and count
/// exact zeros (an element is zero iff it equals 0.0; ISTA ends in ReLU, so
/// exact zeros are meaningful). Counts are summed over the sample.
pub fn count_nonzero(
    net: &DepthNet,
    store: &ParamStore,
    sample: &[Array3<f64>],
    split_tag: &str,
) -> Result<Vec<SparsityRecord>> {
    if sample.is_empty() {
        return Err(CcError::Domain("empty sparsity sample".into()));
    }
    let modules_per_layer = crate::depth_net::MODULES_PER_LAYER;
    let n_records = CRATE_LAYERS.len() * modules_per_layer;
    let mut nonzero = vec![0u64; n_records];
    let mut total = vec![0u64; n_records];
    for image in sample {
        let mut t = Tape::new();
        let mut bind = Binder::new(store);
        let iv = t.leaf3(image.clone());
        let mut obs = ForwardObservations::default();
        net.forward_t(&mut t, store, &mut bind, iv, Some(&mut obs))?;
        if obs.ista_tokens.len() != n_records {
            return Err(CcError::Shape(format!(
                "expected {n_records} ISTA observations, got {}",
                obs.ista_tokens.len()
            )));
        }
        for (k, &tok) in obs.ista_tokens.iter().enumerate() {
            let v = t.value(tok);
            nonzero[k] += v.iter().filter(|&&x| x != 0.0).count() as u64;
            total[k] += v.len() as u64;
        }
    }
    Ok((0..n_records)
        .map(|k| SparsityRecord {
            layer_id: CRATE_LAYERS[k / modules_per_layer],
            module_index: k % modules_per_layer + 1,
            nonzero_count: nonzero[k],
            total_count: total[k],
            percentage: nonzero[k] as f64 / total[k] as f64,
            split_tag: split_tag.to_string(),
        })
        .collect())
}

pub fn write_sparsity_csv(path: &Path, records: &[SparsityRecord]) -> Result<()> {
    let mut out = String::from("layer_id,module_index,split,nonzero,total,percentage\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.layer_id, r.module_index, r.split_tag, r.nonzero_count, r.total_count, r.percentage
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureMapSidecar {
    pub layer: usize,
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub grid_cols: usize,
    /// Per-channel (min, max) used for the [0,1] normalization.
    pub ranges: Vec<(f64, f64)>,
}

/// Export the requested layers' activations as per-channel normalized grids
/// (one grayscale PNG per layer) with a JSON sidecar for de-normalization.
pub fn export_feature_maps(
    net: &DepthNet,
    store: &ParamStore,
    image: &Array3<f64>,
    layer_ids: &[usize],
    out_dir: &Path,
) -> Result<Vec<FeatureMapSidecar>> {
    for &id in layer_ids {
        if !(1..=10).contains(&id) {
            return Err(CcError::Domain(format!(
                "invalid layer id {id}; valid ids are 1..=10"
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut t = Tape::new();
    let mut bind = Binder::new(store);
    let iv = t.leaf3(image.clone());
    let mut obs = ForwardObservations::default();
    net.forward_t(&mut t, store, &mut bind, iv, Some(&mut obs))?;

    let mut sidecars = Vec::new();
    for &want in layer_ids {
        let (name, _, var) = obs
            .stage_outputs
            .iter()
            .find(|(_, layer, _)| *layer == want)
            .expect("all 10 layers observed");
        let data = t.value(*var).clone();
        let shape = data.shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let grid_cols = (c as f64).sqrt().ceil() as usize;
        let grid_rows = c.div_ceil(grid_cols);
        let mut ranges = Vec::with_capacity(c);
        let mut img = GrayImage::new((grid_cols * w) as u32, (grid_rows * h) as u32);
        for ci in 0..c {
            let ch = data.slice(ndarray::s![ci, .., ..]);
            let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ranges.push((lo, hi));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let (gy, gx) = (ci / grid_cols, ci % grid_cols);
            for i in 0..h {
                for j in 0..w {
                    let v = ((ch[[i, j]] - lo) / span * 255.0).round() as u8;
                    img.put_pixel((gx * w + j) as u32, (gy * h + i) as u32, Luma([v]));
                }
            }
        }
        img.save(out_dir.join(format!("layer_{want:02}.png")))?;
        let sidecar = FeatureMapSidecar {
            layer: want,
            name: name.clone(),
            channels: c,
            height: h,
            width: w,
            grid_cols,
            ranges,
        };
        fs::write(
            out_dir.join(format!("layer_{want:02}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        sidecars.push(sidecar);
    }
    Ok(sidecars)
}

pub const PAPER_REFERENCE_MS: f64 = 15.71;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub samples_ms: Vec<f64>,
    pub warmup_runs: usize,
    pub hardware: String,
    /// Published single-image latency, for context only.
    pub paper_reference_ms: f64,
}

fn hardware_description() -> String {
    fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".to_string())
}

/// Wall-clock single-image forward latency over `n_runs` timed passes after
/// `warmup` untimed ones.
pub fn time_inference(
    net: &DepthNet,
    store: &ParamStore,
    image: &Array3<f64>,
    n_runs: usize,
    warmup: usize,
) -> Result<TimingReport> {
    if n_runs < 10 {
        return Err(CcError::Domain(format!(
            "n_runs {n_runs} below minimum 10"
        )));
    }
    for _ in 0..warmup {
        net.predict(store, image)?;
    }
    let mut samples = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t0 = Instant::now();
        let _: DisparityPyramid = net.predict(store, image)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / n_runs as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n_runs as f64;
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| sorted[((q * (n_runs - 1) as f64).round() as usize).min(n_runs - 1)];
    Ok(TimingReport {
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: sorted[0],
        max_ms: sorted[n_runs - 1],
        p50_ms: pct(0.5),
        p90_ms: pct(0.9),
        samples_ms: samples,
        warmup_runs: warmup,
        hardware: hardware_description(),
        paper_reference_ms: PAPER_REFERENCE_MS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_net::NetworkConfig;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, DepthNet) {
        let cfg = NetworkConfig {
            input_width: 64,
            input_height: 32,
            channels: [4, 6, 8],
            crate_dims: [12, 18],
            ..NetworkConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = DepthNet::build(&mut store, &mut rng, &cfg).unwrap();
        (store, net)
    }

    fn random_image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 32, 64), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn sparsity_has_eight_records_with_exact_counts() {
        let (store, net) = tiny();
        let sample = vec![random_image(1), random_image(2)];
        let records = count_nonzero(&net, &store, &sample, "train").unwrap();
        assert_eq!(records.len(), 8);
        for r in &records {
            assert!(CRATE_LAYERS.contains(&r.layer_id));
            assert!((1..=2).contains(&r.module_index));
            assert!(r.total_count > 0);
            assert!(r.nonzero_count <= r.total_count);
            assert!((r.percentage - r.nonzero_count as f64 / r.total_count as f64).abs() < 1e-15);
        }
        // independent recount on one image must agree with the per-image share
        let one = count_nonzero(&net, &store, &sample[..1], "train").unwrap();
        let two = count_nonzero(&net, &store, &sample[1..], "train").unwrap();
        for ((r, a), b) in records.iter().zip(one.iter()).zip(two.iter()) {
            assert_eq!(r.nonzero_count, a.nonzero_count + b.nonzero_count);
            assert_eq!(r.total_count, a.total_count + b.total_count);
        }
    }

    #[test]
    fn huge_lambda1_thresholds_everything() {
        let cfg = NetworkConfig {
            input_width: 64,
            input_height: 32,
            channels: [4, 6, 8],
            crate_dims: [12, 18],
            scalars: crate::crate_core::CrateScalars {
                lambda1: 1e6,
                ..Default::default()
            },
            ..NetworkConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = DepthNet::build(&mut store, &mut rng, &cfg).unwrap();
        let records = count_nonzero(&net, &store, &[random_image(3)], "train").unwrap();
        for r in &records {
            assert_eq!(r.percentage, 0.0, "layer {} module {}", r.layer_id, r.module_index);
        }
    }

    #[test]
    fn hooks_are_observation_only() {
        let (store, net) = tiny();
        let img = random_image(4);
        let plain = net.predict(&store, &img).unwrap();
        let mut t = Tape::new();
        let mut bind = Binder::new(&store);
        let iv = t.leaf3(img);
        let mut obs = ForwardObservations::default();
        let vars = net
            .forward_t(&mut t, &store, &mut bind, iv, Some(&mut obs))
            .unwrap();
        for (v, m) in vars.iter().zip(plain.maps.iter()) {
            assert_eq!(&t.value2(*v), m);
        }
    }

    #[test]
    fn feature_export_writes_grids_and_sidecars() {
        let (store, net) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let sidecars =
            export_feature_maps(&net, &store, &random_image(5), &[3, 8, 5, 6], dir.path())
                .unwrap();
        assert_eq!(sidecars.len(), 4);
        for sc in &sidecars {
            let png = dir.path().join(format!("layer_{:02}.png", sc.layer));
            assert!(png.is_file());
            assert_eq!(sc.ranges.len(), sc.channels);
            // round-trip: de-normalizing a saved pixel lands within the 8-bit
            // quantization budget of the true activation range
            let img = image::open(&png).unwrap().to_luma8();
            let (lo, hi) = sc.ranges[0];
            let span = if hi > lo { hi - lo } else { 1.0 };
            let px = img.get_pixel(0, 0)[0] as f64 / 255.0;
            let denorm = lo + px * span;
            assert!(denorm >= lo - span / 255.0 && denorm <= hi + span / 255.0);
        }
    }

    #[test]
    fn constant_input_gives_constant_stage1_channels() {
        let (store, net) = tiny();
        let img = Array3::from_elem((3, 32, 64), 0.4);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Tape::new();
        let mut bind = Binder::new(&store);
        let iv = t.leaf3(img);
        let mut obs = ForwardObservations::default();
        net.forward_t(&mut t, &store, &mut bind, iv, Some(&mut obs))
            .unwrap();
        let (_, _, v) = &obs.stage_outputs[0];
        let data = t.value(*v);
        let shape = data.shape().to_vec();
        for c in 0..shape[0] {
            let first = data[[c, 0, 0]];
            for i in 0..shape[1] {
                for j in 0..shape[2] {
                    assert!((data[[c, i, j]] - first).abs() < 1e-12);
                }
            }
        }
        drop(dir);
    }

    #[test]
    fn invalid_layer_id_lists_valid_range() {
        let (store, net) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let err = export_feature_maps(&net, &store, &random_image(6), &[11], dir.path())
            .unwrap_err();
        assert!(err.to_string().contains("1..=10"));
    }

    #[test]
    fn timing_report_contract() {
        let (store, net) = tiny();
        let report = time_inference(&net, &store, &random_image(7), 10, 2).unwrap();
        assert_eq!(report.samples_ms.len(), 10);
        assert!(report.mean_ms >= report.min_ms && report.mean_ms <= report.max_ms);
        assert_eq!(report.paper_reference_ms, 15.71);
        assert!(time_inference(&net, &store, &random_image(7), 5, 0).is_err());
    }
}
