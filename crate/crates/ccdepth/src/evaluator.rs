//! Depth evaluation: the seven standard error/accuracy metrics with median
//! scaling, depth capping, and the Eigen evaluation crop.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::depth_net::DepthNet;
use crate::error::{CcError, Result};
use crate::params::ParamStore;
use crate::selfsup_loss::disp_to_depth;

pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
pub const MIN_VALID_DEPTH: f64 = 1e-3;

/// Eigen crop rectangle as fractions of image height/width.
pub const EIGEN_CROP: [f64; 4] = [0.40810811, 0.99189189, 0.03594771, 0.96405229];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingMode {
    Median,
    None,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_images: usize,
    pub scaling_mode: ScalingMode,
    pub depth_cap: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CcError::Numeric("non-finite metric".into()));
        }
        if !(self.delta1 <= self.delta2 + 1e-12 && self.delta2 <= self.delta3 + 1e-12) {
            return Err(CcError::Numeric("delta metrics not monotone".into()));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,n_images"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
            self.n_images
        )
    }
}

fn valid_pixels<'a>(
    pred: &'a Array2<f64>,
    gt: &'a Array2<f64>,
    cap: f64,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(gt.iter())
        .filter(move |(_, &g)| g > MIN_VALID_DEPTH && g < cap)
        .map(|(&p, &g)| (p, g))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rescale predictions by median(gt)/median(pred) over valid pixels.
pub fn median_scale(pred: &Array2<f64>, gt: &Array2<f64>, cap: f64) -> Result<Array2<f64>> {
    let (ps, gs): (Vec<f64>, Vec<f64>) = valid_pixels(pred, gt, cap).unzip();
    if ps.is_empty() {
        return Err(CcError::Domain("no valid pixels for median scaling".into()));
    }
    let mp = median(ps);
    if mp <= 0.0 {
        return Err(CcError::Domain(format!(
            "non-positive median prediction {mp}"
        )));
    }
    let scale = median(gs) / mp;
    Ok(pred.mapv(|p| p * scale))
}

/// Single-image metrics over pixels with gt inside (1e-3, cap). Predictions
/// are clamped to the same range before comparison.
pub fn compute_metrics(pred: &Array2<f64>, gt: &Array2<f64>, cap: f64) -> Result<MetricsReport> {
    if pred.dim() != gt.dim() {
        return Err(CcError::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for (p, g) in valid_pixels(pred, gt, cap) {
        let p = p.clamp(MIN_VALID_DEPTH, cap);
        n += 1;
        abs_rel += (p - g).abs() / g;
        sq_rel += (p - g) * (p - g) / g;
        se += (p - g) * (p - g);
        sle += (p.ln() - g.ln()) * (p.ln() - g.ln());
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            d2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(CcError::Domain(
            "no valid pixels after depth capping".into(),
        ));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (sle / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        n_images: 1,
        scaling_mode: ScalingMode::None,
        depth_cap: cap,
    })
}

/// Zero ground truth outside the Eigen crop rectangle so those pixels are
/// excluded by the validity rule.
pub fn apply_eigen_crop(gt: &Array2<f64>) -> Array2<f64> {
    let (h, w) = gt.dim();
    let r0 = (EIGEN_CROP[0] * h as f64) as usize;
    let r1 = (EIGEN_CROP[1] * h as f64) as usize;
    let c0 = (EIGEN_CROP[2] * w as f64) as usize;
    let c1 = (EIGEN_CROP[3] * w as f64) as usize;
    Array2::from_shape_fn((h, w), |(i, j)| {
        if i >= r0 && i < r1 && j >= c0 && j < c1 {
            gt[[i, j]]
        } else {
            0.0
        }
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub depth_cap: f64,
    pub scaling: ScalingMode,
    pub eigen_crop: bool,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            depth_cap: DEFAULT_DEPTH_CAP,
            scaling: ScalingMode::Median,
            eigen_crop: true,
            min_depth: crate::selfsup_loss::DEFAULT_MIN_DEPTH,
            max_depth: crate::selfsup_loss::DEFAULT_MAX_DEPTH,
        }
    }
}

/// Evaluate one predicted depth map against sparse ground truth under the
/// configured protocol.
pub fn evaluate_image(
    pred_depth: &Array2<f64>,
    gt: &Array2<f64>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let gt = if opts.eigen_crop {
        apply_eigen_crop(gt)
    } else {
        gt.clone()
    };
    let pred = match opts.scaling {
        ScalingMode::Median => median_scale(pred_depth, &gt, opts.depth_cap)?,
        ScalingMode::None => pred_depth.clone(),
    };
    let mut m = compute_metrics(&pred, &gt, opts.depth_cap)?;
    m.scaling_mode = opts.scaling;
    Ok(m)
}

/// Aggregate of per-image reports: unweighted mean of each metric.
pub fn aggregate(reports: &[MetricsReport], opts: &EvalOptions) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(CcError::Domain("no images evaluated".into()));
    }
    let nf = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / nf;
    let agg = MetricsReport {
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        n_images: reports.len(),
        scaling_mode: opts.scaling,
        depth_cap: opts.depth_cap,
    };
    agg.validate()?;
    Ok(agg)
}

/// Run the network over (image, ground-truth depth) pairs and aggregate.
/// Items whose ground truth yields no valid pixels are skipped and counted.
pub fn evaluate_split<'a>(
    net: &DepthNet,
    store: &ParamStore,
    items: impl Iterator<Item = (&'a ndarray::Array3<f64>, &'a Array2<f64>)>,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<MetricsReport>, usize)> {
    let mut per_image = Vec::new();
    let mut skipped = 0usize;
    for (image, gt) in items {
        let pyr = net.predict(store, image)?;
        let depth = disp_to_depth(&pyr.maps[0], opts.min_depth, opts.max_depth)?;
        // evaluate at ground-truth resolution
        let pred = resize_bilinear(&depth.data, gt.dim());
        match evaluate_image(&pred, gt, opts) {
            Ok(m) => per_image.push(m),
            Err(CcError::Domain(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let agg = aggregate(&per_image, opts)?;
    Ok((agg, per_image, skipped))
}

/// Bilinear resize of a 2-D map to the target shape.
pub fn resize_bilinear(src: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (h, w) {
        return src.clone();
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let y = (i as f64 + 0.5) * sh as f64 / h as f64 - 0.5;
        let x = (j as f64 + 0.5) * sw as f64 / w as f64 - 0.5;
        let y0 = y.floor().clamp(0.0, (sh - 1) as f64);
        let x0 = x.floor().clamp(0.0, (sw - 1) as f64);
        let y1 = (y0 + 1.0).min((sh - 1) as f64);
        let x1 = (x0 + 1.0).min((sw - 1) as f64);
        let fy = (y - y0).clamp(0.0, 1.0);
        let fx = (x - x0).clamp(0.0, 1.0);
        let (y0, y1, x0, x1) = (y0 as usize, y1 as usize, x0 as usize, x1 as usize);
        (1.0 - fy) * ((1.0 - fx) * src[[y0, x0]] + fx * src[[y0, x1]])
            + fy * ((1.0 - fx) * src[[y1, x0]] + fx * src[[y1, x1]])
    })
}

/// Write the aggregate report as CSV and JSON next to each other.
pub fn write_reports(dir: &Path, agg: &MetricsReport, per_image: &[MetricsReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from(MetricsReport::csv_header());
    csv.push('\n');
    csv.push_str(&agg.csv_row());
    csv.push('\n');
    fs::write(dir.join("metrics.csv"), csv)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(agg)?)?;
    if !per_image.is_empty() {
        let mut detail = String::from(MetricsReport::csv_header());
        detail.push('\n');
        for r in per_image {
            detail.push_str(&r.csv_row());
            detail.push('\n');
        }
        fs::write(dir.join("metrics_per_image.csv"), detail)?;
    }
    Ok(())
}
