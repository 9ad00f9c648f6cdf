//! Synthetic articulated-shape videos with exact per-frame part motions,
//! plus frame-folder ingestion and training-pair sampling.
//!
//! Each part follows a smooth rigid trajectory (sinusoidal translation,
//! rotation, isotropic scaling) over a static low-contrast noise background.
//! Ground truth stores the centroid and the 2x2 affine of each part
//! relative to its frame-0 pose, so the recorded motions plug directly
//! into the first-order warp formula.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axis_coord, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

/// Static description of one part; `base_matrix` maps the unit shape frame
/// to frame-0 image offsets, so frame t's shape matrix is A_t·base_matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartSpec {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub base_matrix: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPart {
    /// Per-frame centroid in normalized coordinates.
    pub centroids: Vec<[f64; 2]>,
    /// Per-frame 2x2 affine relative to the frame-0 pose.
    pub affines: Vec<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub parts: Vec<GtPart>,
}

pub struct SyntheticScene {
    /// [3,H,W] float frames in [0,1].
    pub frames: Vec<Tensor>,
    pub gt: GroundTruth,
    pub specs: Vec<PartSpec>,
    /// The static background frame, for tests that isolate part motion.
    pub background: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneSpec {
    pub size: usize,
    pub frames: usize,
    pub parts: usize,
    /// Peak translation offset in normalized units (≤ 0.35 keeps centroids
    /// inside [-1.2, 1.2]).
    pub translation_amp: f64,
    /// Peak rotation in radians.
    pub rotation_amp: f64,
    /// Peak relative scale deviation.
    pub scale_amp: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            frames: 20,
            parts: 3,
            translation_amp: 0.25,
            rotation_amp: 0.5,
            scale_amp: 0.12,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.parts == 0 || self.parts > 5 {
            return Err(Error::Config(format!("part count {} outside 1..=5", self.parts)));
        }
        if self.frames == 0 || self.size < 8 {
            return Err(Error::Config(format!(
                "need at least 1 frame and size >= 8, got frames={} size={}",
                self.frames, self.size
            )));
        }
        if !(0.0..=0.35).contains(&self.translation_amp) {
            return Err(Error::Config(format!(
                "translation amplitude {} outside 0..=0.35",
                self.translation_amp
            )));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.rotation_amp) {
            return Err(Error::Config(format!("rotation amplitude {} outside 0..=pi", self.rotation_amp)));
        }
        if !(0.0..=0.3).contains(&self.scale_amp) {
            return Err(Error::Config(format!("scale amplitude {} outside 0..=0.3", self.scale_amp)));
        }
        Ok(())
    }
}

/// One sinusoid per motion channel, pinned to zero offset at frame 0.
#[derive(Clone, Copy)]
struct Oscillator {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Oscillator {
    fn sample(&self, rng: &mut ChaCha8Rng, amp: f64) -> Oscillator {
        Oscillator {
            amp,
            freq: rng.gen_range(0.5..1.5),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, tau: f64) -> f64 {
        self.amp * ((std::f64::consts::TAU * self.freq * tau + self.phase).sin() - self.phase.sin())
    }
}

struct PartMotionPlan {
    c0: [f64; 2],
    tx: Oscillator,
    ty: Oscillator,
    rot: Oscillator,
    scale: Oscillator,
}

const SUBSAMPLES: usize = 4;

fn invert2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Deterministic scene synthesis: same (seed, spec) → bit-identical frames
/// and ground truth.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;

    // Static low-contrast noise background.
    let mut bg = vec![0.0; 3 * n * n];
    for px in 0..n * n {
        let v = 0.25 + 0.1 * rng.gen_range(0.0..1.0);
        for c in 0..3 {
            bg[c * n * n + px] = v;
        }
    }

    let dummy = Oscillator { amp: 0.0, freq: 1.0, phase: 0.0 };
    let mut specs = Vec::with_capacity(spec.parts);
    let mut plans = Vec::with_capacity(spec.parts);
    for _ in 0..spec.parts {
        let shape = if rng.gen_bool(0.5) { ShapeKind::Ellipse } else { ShapeKind::Rectangle };
        let color = [
            rng.gen_range(0.55..0.95),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        let rx = rng.gen_range(0.12..0.28);
        let ry = rng.gen_range(0.12..0.28);
        let theta0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let c0 = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let (s, c) = theta0.sin_cos();
        let base_matrix = [[c * rx, -s * ry], [s * rx, c * ry]];
        specs.push(PartSpec { shape, color, base_matrix });
        plans.push(PartMotionPlan {
            c0,
            tx: dummy.sample(&mut rng, spec.translation_amp),
            ty: dummy.sample(&mut rng, spec.translation_amp),
            rot: dummy.sample(&mut rng, spec.rotation_amp),
            scale: dummy.sample(&mut rng, spec.scale_amp),
        });
    }

    let mut gt = GroundTruth {
        parts: vec![GtPart { centroids: Vec::new(), affines: Vec::new() }; spec.parts],
    };
    let mut frames = Vec::with_capacity(spec.frames);
    let denom = (spec.frames.max(2) - 1) as f64;

    for t in 0..spec.frames {
        let tau = t as f64 / denom;
        // Per-part pose this frame: shape matrix M_t and centroid.
        let mut poses = Vec::with_capacity(spec.parts);
        for (p, plan) in plans.iter().enumerate() {
            let centroid = [plan.c0[0] + plan.tx.at(tau), plan.c0[1] + plan.ty.at(tau)];
            let scale = 1.0 + plan.scale.at(tau);
            // Relative affine: scale times the rotation delta; exactly the
            // identity at frame 0 because every oscillator starts at 0.
            let (sd, cd) = plan.rot.at(tau).sin_cos();
            let rel = [[cd * scale, -sd * scale], [sd * scale, cd * scale]];
            gt.parts[p].centroids.push(centroid);
            gt.parts[p].affines.push(rel);
            poses.push((centroid, mat_mul(rel, specs[p].base_matrix)));
        }

        let mut frame = bg.clone();
        let step = 2.0 / (n - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                let (cx, cy) = (axis_coord(j, n), axis_coord(i, n));
                let mut acc = [0.0; 3];
                let mut covered = 0usize;
                for si in 0..SUBSAMPLES {
                    for sj in 0..SUBSAMPLES {
                        let x = cx + ((sj as f64 + 0.5) / SUBSAMPLES as f64 - 0.5) * step;
                        let y = cy + ((si as f64 + 0.5) / SUBSAMPLES as f64 - 0.5) * step;
                        // Topmost part wins.
                        for (p, (centroid, m)) in poses.iter().enumerate().rev() {
                            let inv = invert2(*m);
                            let dx = x - centroid[0];
                            let dy = y - centroid[1];
                            let u = inv[0][0] * dx + inv[0][1] * dy;
                            let v = inv[1][0] * dx + inv[1][1] * dy;
                            let inside = match specs[p].shape {
                                ShapeKind::Ellipse => u * u + v * v <= 1.0,
                                ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
                            };
                            if inside {
                                for c in 0..3 {
                                    acc[c] += specs[p].color[c];
                                }
                                covered += 1;
                                break;
                            }
                        }
                    }
                }
                if covered > 0 {
                    let total = (SUBSAMPLES * SUBSAMPLES) as f64;
                    let bg_w = (total - covered as f64) / total;
                    for c in 0..3 {
                        frame[c * n * n + i * n + j] =
                            bg_w * bg[c * n * n + i * n + j] + acc[c] / total;
                    }
                }
            }
        }
        frames.push(Tensor::from_vec(frame, &[3, n, n])?);
    }

    Ok(SyntheticScene { frames, gt, specs, background: Tensor::from_vec(bg, &[3, n, n])? })
}

pub struct Video {
    pub id: String,
    pub frames: Vec<Tensor>,
    pub gt: Option<GroundTruth>,
}

pub struct VideoDataset {
    pub videos: Vec<Video>,
}

impl VideoDataset {
    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.videos.first().and_then(|v| v.frames.first()).map(|f| (f.shape()[1], f.shape()[2]))
    }

    /// Uniform video, then an ordered pair of two distinct frames.
    pub fn sample_pair(&self, rng: &mut impl Rng) -> Result<(usize, usize, usize)> {
        if self.videos.is_empty() {
            return Err(Error::Data("cannot sample a pair from an empty dataset".into()));
        }
        let v = rng.gen_range(0..self.videos.len());
        let (src, drv) = sample_frame_pair(&self.videos[v], rng)?;
        Ok((v, src, drv))
    }
}

/// Two distinct frame indices in random order.
pub fn sample_frame_pair(video: &Video, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let t = video.frames.len();
    if t < 2 {
        return Err(Error::Data(format!("video {} has {t} frames; need at least 2", video.id)));
    }
    let a = rng.gen_range(0..t);
    let mut b = rng.gen_range(0..t - 1);
    if b >= a {
        b += 1;
    }
    Ok((a, b))
}

/// Saves one frame tensor as an 8-bit PNG.
pub fn save_png(frame: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match frame.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::dim("save_png", format!("expected [3,H,W], got {s:?}"))),
    };
    let v = frame.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for px in 0..h * w {
        for c in 0..3 {
            bytes.push((v[c * h * w + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for px in 0..h * w {
        for c in 0..3 {
            data[c * h * w + px] = raw[px * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(data, &[3, h, w])
}

/// Writes `<dir>/frame_%05d.png` plus `gt.json`.
pub fn write_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (t, frame) in scene.frames.iter().enumerate() {
        save_png(frame, &dir.join(format!("frame_{t:05}.png")))?;
    }
    let json = serde_json::to_string_pretty(&scene.gt)
        .map_err(|e| Error::Data(format!("gt serialization: {e}")))?;
    let path = dir.join("gt.json");
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads one video directory: `frame_*.png` sorted lexicographically plus an
/// optional `gt.json`. All frames must share one size.
pub fn load_video(dir: &Path) -> Result<Video> {
    let mut frame_paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map_or(false, |x| x == "png")
                && p.file_name().map_or(false, |n| n.to_string_lossy().starts_with("frame_"))
        })
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(Error::Data(format!("no frame_*.png files in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(frame_paths.len());
    let mut first_shape: Option<Vec<usize>> = None;
    for p in &frame_paths {
        let f = load_png(p)?;
        match &first_shape {
            None => first_shape = Some(f.shape().to_vec()),
            Some(s) if *s != f.shape() => {
                return Err(Error::Data(format!(
                    "mixed frame sizes: {} is {:?}, expected {s:?}",
                    p.display(),
                    f.shape()
                )));
            }
            _ => {}
        }
        frames.push(f);
    }
    let gt_path = dir.join("gt.json");
    let gt = if gt_path.exists() {
        let text = std::fs::read_to_string(&gt_path)
            .map_err(|e| Error::io(gt_path.display().to_string(), e))?;
        Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", gt_path.display())))?,
        )
    } else {
        None
    };
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Video { id, frames, gt })
}

/// Loads `<root>/<video_id>/frame_*.png` (+ optional gt.json), sorted
/// lexicographically at both levels.
pub fn load_video_folder(root: &Path) -> Result<VideoDataset> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no video folders under {}", root.display())));
    }

    let mut videos = Vec::with_capacity(dirs.len());
    let mut first_shape: Option<Vec<usize>> = None;
    for dir in dirs {
        let video = load_video(&dir)?;
        if let Some(f) = video.frames.first() {
            match &first_shape {
                None => first_shape = Some(f.shape().to_vec()),
                Some(s) if *s != f.shape() => {
                    return Err(Error::Data(format!(
                        "mixed frame sizes: video {} is {:?}, expected {s:?}",
                        video.id,
                        f.shape()
                    )));
                }
                _ => {}
            }
        }
        videos.push(video);
    }
    Ok(VideoDataset { videos })
}
