//! Dataset ingestion: Eigen-split KITTI monocular triplets under the raw
//! directory layout, plus a synthetic toy-scene generator with exact ground
//! truth for desk-scale training and tests.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcError, Result};
use crate::pose_net::RelativePose;
use crate::selfsup_loss::CameraIntrinsics;

/// One monocular training sample: the target frame and its two temporal
/// neighbors, at working resolution with matching intrinsics.
#[derive(Clone, Debug)]
pub struct FrameTriplet {
    pub target: Array3<f64>,
    pub prev: Array3<f64>,
    pub next: Array3<f64>,
    pub intrinsics: CameraIntrinsics,
    pub source_id: String,
}

impl FrameTriplet {
    pub fn validate(&self) -> Result<()> {
        if self.target.dim() != self.prev.dim() || self.target.dim() != self.next.dim() {
            return Err(CcError::Dataset(format!(
                "triplet {} frames disagree on resolution",
                self.source_id
            )));
        }
        self.intrinsics.validate()
    }
}

/// One entry of a split file: a sequence folder and a frame index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub folder: String,
    pub frame_index: u64,
}

impl SplitEntry {
    pub fn id(&self) -> String {
        format!("{}/{:010}", self.folder, self.frame_index)
    }

    fn image_path(&self, root: &Path, index: u64) -> PathBuf {
        root.join(&self.folder)
            .join("image_02/data")
            .join(format!("{index:010}.png"))
    }
}

#[derive(Clone, Debug, Default)]
pub struct SplitManifest {
    pub train: Vec<SplitEntry>,
    pub val: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
    /// Entries listed in the split files but without all three frames on disk.
    pub missing: Vec<String>,
}

impl SplitManifest {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

fn parse_split_file(path: &Path) -> Result<Vec<SplitEntry>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let folder = parts
            .next()
            .ok_or_else(|| CcError::Dataset(format!("{}: empty line {lineno}", path.display())))?;
        let frame_index = match parts.next() {
            Some(tok) => tok.parse::<u64>().map_err(|_| {
                CcError::Dataset(format!(
                    "{} line {}: frame index `{tok}` is not an integer",
                    path.display(),
                    lineno + 1
                ))
            })?,
            Option::None => {
                // plain relative path form: .../data/0000000123.png
                let stem = Path::new(folder)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("");
                stem.parse::<u64>().map_err(|_| {
                    CcError::Dataset(format!(
                        "{} line {}: cannot extract frame index from `{folder}`",
                        path.display(),
                        lineno + 1
                    ))
                })?
            }
        };
        out.push(SplitEntry {
            folder: folder.to_string(),
            frame_index,
        });
    }
    Ok(out)
}

/// Read the three split lists under `root/splits/` and keep only entries whose
/// target and neighbor frames exist on disk. Expected layout:
///   root/splits/{train,val,test}_files.txt   one "folder frame_index" per line
///   root/<folder>/image_02/data/<frame>.png  raw sequence images
///   root/<date>/calib_cam_to_cam.txt         per-date calibration
pub fn load_split(root: &Path) -> Result<SplitManifest> {
    if !root.is_dir() {
        return Err(CcError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "dataset root {} not found; expected layout: splits/{{train,val,test}}_files.txt \
                 plus <date>/<sequence>/image_02/data/*.png and <date>/calib_cam_to_cam.txt",
                root.display()
            ),
        )));
    }
    let mut manifest = SplitManifest::default();
    for (name, bucket) in [("train", 0usize), ("val", 1), ("test", 2)] {
        let list = root.join("splits").join(format!("{name}_files.txt"));
        let entries = if list.is_file() {
            parse_split_file(&list)?
        } else {
            manifest.missing.push(format!("{} (split file)", list.display()));
            Vec::new()
        };
        for e in entries {
            // test entries are evaluated on single frames; train/val need the
            // temporal neighbors too
            let needed: &[i64] = if name == "test" { &[0] } else { &[-1, 0, 1] };
            let all_present = needed.iter().all(|&d| {
                let idx = e.frame_index as i64 + d;
                idx >= 0 && e.image_path(root, idx as u64).is_file()
            });
            if all_present {
                match bucket {
                    0 => manifest.train.push(e),
                    1 => manifest.val.push(e),
                    _ => manifest.test.push(e),
                }
            } else {
                manifest.missing.push(e.id());
            }
        }
    }
    Ok(manifest)
}

/// Decode any supported image and resize it to the working resolution.
pub fn load_image_resized(path: &Path, width: usize, height: usize) -> Result<Array3<f64>> {
    decode_resize(path, width, height)
}

fn decode_resize(path: &Path, width: usize, height: usize) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let resized = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
    Ok(rgb_to_array(&resized))
}

fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    })
}

fn array_to_rgb(a: &Array3<f64>) -> RgbImage {
    let (_, h, w) = a.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (a[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Parse P_rect_02 from a KITTI calib_cam_to_cam.txt.
pub fn read_kitti_intrinsics(calib_path: &Path, native_w: usize, native_h: usize) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(calib_path)?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("P_rect_02:") {
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CcError::Dataset(format!("{}: {e}", calib_path.display())))?;
            if vals.len() != 12 {
                return Err(CcError::Dataset(format!(
                    "{}: P_rect_02 has {} values, expected 12",
                    calib_path.display(),
                    vals.len()
                )));
            }
            return Ok(CameraIntrinsics {
                fx: vals[0],
                fy: vals[5],
                cx: vals[2],
                cy: vals[6],
                width: native_w,
                height: native_h,
            });
        }
    }
    Err(CcError::Dataset(format!(
        "{}: no P_rect_02 entry",
        calib_path.display()
    )))
}

/// Load one training triplet at working resolution with rescaled intrinsics.
pub fn load_triplet(
    root: &Path,
    entry: &SplitEntry,
    width: usize,
    height: usize,
) -> Result<FrameTriplet> {
    let target_path = entry.image_path(root, entry.frame_index);
    let prev_path = entry.image_path(root, entry.frame_index - 1);
    let next_path = entry.image_path(root, entry.frame_index + 1);
    for p in [&prev_path, &target_path, &next_path] {
        if !p.is_file() {
            return Err(CcError::Dataset(format!("missing frame {}", p.display())));
        }
    }
    let native = image::image_dimensions(&target_path)?;
    let (nw, nh) = (native.0 as usize, native.1 as usize);
    let date = entry.folder.split('/').next().unwrap_or("");
    let calib = root.join(date).join("calib_cam_to_cam.txt");
    let k = read_kitti_intrinsics(&calib, nw, nh)?;
    let sx = width as f64 / nw as f64;
    let sy = height as f64 / nh as f64;
    Ok(FrameTriplet {
        target: decode_resize(&target_path, width, height)?,
        prev: decode_resize(&prev_path, width, height)?,
        next: decode_resize(&next_path, width, height)?,
        intrinsics: k.scaled(sx, sy),
        source_id: entry.id(),
    })
}

// ---- toy dataset ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    /// Lateral camera translation per frame, scene units.
    pub speed: f64,
    /// Forward (optical-axis) translation per frame.
    pub forward_speed: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            scenes: 4,
            width: 128,
            height: 64,
            speed: 0.15,
            forward_speed: 0.05,
            seed: 7,
        }
    }
}

/// A toy sample with full supervision available for oracles.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub triplet: FrameTriplet,
    pub gt_depth: Array2<f64>,
    pub pose_prev: RelativePose,
    pub pose_next: RelativePose,
}

/// A fronto-parallel textured rectangle at fixed world depth.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Panel {
    z: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    phase: [f64; 3],
    freq: f64,
}

impl Panel {
    fn color(&self, x: f64, y: f64, c: usize) -> f64 {
        // smooth multi-view-consistent texture in world coordinates
        let v = (x * self.freq + self.phase[c]).sin() * (y * self.freq * 0.7 + self.phase[c] * 1.3).cos();
        0.5 + 0.45 * v
    }
}

fn render_frame(
    panels: &[Panel],
    k: &CameraIntrinsics,
    cam_pos: [f64; 3],
) -> (Array3<f64>, Array2<f64>) {
    let (h, w) = (k.height, k.width);
    let mut img = Array3::zeros((3, h, w));
    let mut depth = Array2::from_elem((h, w), f64::INFINITY);
    for i in 0..h {
        for j in 0..w {
            let rx = (j as f64 - k.cx) / k.fx;
            let ry = (i as f64 - k.cy) / k.fy;
            let mut best: Option<(f64, &Panel, f64, f64)> = Option::None;
            for p in panels {
                let s = p.z - cam_pos[2]; // fronto-parallel: hit at this range
                if s <= 0.0 {
                    continue;
                }
                let wx = rx * s + cam_pos[0];
                let wy = ry * s + cam_pos[1];
                if wx < p.x0 || wx > p.x1 || wy < p.y0 || wy > p.y1 {
                    continue;
                }
                if best.map_or(true, |(bs, ..)| s < bs) {
                    best = Some((s, p, wx, wy));
                }
            }
            if let Some((s, p, wx, wy)) = best {
                depth[[i, j]] = s;
                for c in 0..3 {
                    img[[c, i, j]] = p.color(wx, wy, c);
                }
            }
        }
    }
    (img, depth)
}

fn toy_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: width as f64,
        fy: width as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

/// Render procedurally textured panel scenes under known camera motion.
pub fn make_toy_dataset(cfg: &ToyConfig) -> Vec<ToyScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = toy_intrinsics(cfg.width, cfg.height);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for scene_idx in 0..cfg.scenes {
        let bg_z = rng.gen_range(8.0..12.0);
        let mut panels = vec![Panel {
            z: bg_z,
            x0: -1e6,
            x1: 1e6,
            y0: -1e6,
            y1: 1e6,
            phase: [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)],
            freq: rng.gen_range(1.5..3.0),
        }];
        for _ in 0..rng.gen_range(2..4usize) {
            let z = rng.gen_range(2.5..6.5);
            let cx = rng.gen_range(-2.0..2.0);
            let cy = rng.gen_range(-1.0..1.0);
            let hw = rng.gen_range(0.4..1.2);
            let hh = rng.gen_range(0.3..0.8);
            panels.push(Panel {
                z,
                x0: cx - hw,
                x1: cx + hw,
                y0: cy - hh,
                y1: cy + hh,
                phase: [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)],
                freq: rng.gen_range(3.0..6.0),
            });
        }
        let p_prev = [-cfg.speed, 0.0, -cfg.forward_speed];
        let p_next = [cfg.speed, 0.0, cfg.forward_speed];
        let (target, gt_depth) = render_frame(&panels, &k, [0.0; 3]);
        let (prev, _) = render_frame(&panels, &k, p_prev);
        let (next, _) = render_frame(&panels, &k, p_next);
        // warp convention: X_ref = R X_target + t with world = target frame
        let pose_prev = RelativePose {
            axis_angle: [0.0; 3],
            translation: [-p_prev[0], -p_prev[1], -p_prev[2]],
        };
        let pose_next = RelativePose {
            axis_angle: [0.0; 3],
            translation: [-p_next[0], -p_next[1], -p_next[2]],
        };
        scenes.push(ToyScene {
            triplet: FrameTriplet {
                target,
                prev,
                next,
                intrinsics: k,
                source_id: format!("toy/{scene_idx:04}"),
            },
            gt_depth,
            pose_prev,
            pose_next,
        });
    }
    scenes
}

#[derive(Serialize, Deserialize)]
struct ToySceneMeta {
    id: String,
    intrinsics: CameraIntrinsics,
    pose_prev: RelativePose,
    pose_next: RelativePose,
    height: usize,
    width: usize,
    depth: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ToyMeta {
    config: ToyConfig,
    scenes: Vec<ToySceneMeta>,
}

/// Persist a toy dataset as per-scene PNG triplets plus one JSON metadata
/// file holding intrinsics, poses, and raw depth arrays.
pub fn save_toy_dataset(dir: &Path, cfg: &ToyConfig, scenes: &[ToyScene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = ToyMeta {
        config: *cfg,
        scenes: Vec::new(),
    };
    for (i, s) in scenes.iter().enumerate() {
        let sdir = dir.join(format!("scene_{i:04}"));
        fs::create_dir_all(&sdir)?;
        array_to_rgb(&s.triplet.prev).save(sdir.join("prev.png"))?;
        array_to_rgb(&s.triplet.target).save(sdir.join("target.png"))?;
        array_to_rgb(&s.triplet.next).save(sdir.join("next.png"))?;
        meta.scenes.push(ToySceneMeta {
            id: s.triplet.source_id.clone(),
            intrinsics: s.triplet.intrinsics,
            pose_prev: s.pose_prev.clone(),
            pose_next: s.pose_next.clone(),
            height: s.gt_depth.dim().0,
            width: s.gt_depth.dim().1,
            depth: s.gt_depth.iter().copied().collect(),
        });
    }
    let json = serde_json::to_string(&meta)?;
    fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

/// Load a persisted toy dataset (images re-quantized through 8-bit PNG).
pub fn load_toy_dataset(dir: &Path) -> Result<Vec<ToyScene>> {
    let meta_path = dir.join("meta.json");
    let meta: ToyMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let mut scenes = Vec::with_capacity(meta.scenes.len());
    for (i, m) in meta.scenes.iter().enumerate() {
        let sdir = dir.join(format!("scene_{i:04}"));
        let load = |name: &str| -> Result<Array3<f64>> {
            Ok(rgb_to_array(&image::open(sdir.join(name))?.to_rgb8()))
        };
        let gt_depth = Array2::from_shape_vec((m.height, m.width), m.depth.clone())
            .map_err(|e| CcError::Dataset(format!("scene {i} depth: {e}")))?;
        scenes.push(ToyScene {
            triplet: FrameTriplet {
                target: load("target.png")?,
                prev: load("prev.png")?,
                next: load("next.png")?,
                intrinsics: m.intrinsics,
                source_id: m.id.clone(),
            },
            gt_depth,
            pose_prev: m.pose_prev.clone(),
            pose_next: m.pose_next.clone(),
        });
    }
    Ok(scenes)
}
