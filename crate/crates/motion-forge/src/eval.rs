//! Inference drivers: video reconstruction, motion-transfer animation,
//! directory-level evaluation, and attention/motion artifact dumps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_video_folder, save_png, GroundTruth};
use crate::metrics::{aggregate, video_metrics, MetricsReport, VideoEval};
use crate::model::AnimationModel;
use crate::motion::{transfer_motion, MotionSet, TransferMode};
use crate::numerics::{no_grad, Tensor};
use crate::params::Graph;
use crate::{Error, Result};

/// Generated frames plus the keypoints detected on each driving frame.
pub struct Reconstruction {
    pub frames: Vec<Tensor>,
    /// `keypoints[t][k]`: normalized position of part k in driving frame t.
    pub keypoints: Vec<Vec<[f64; 2]>>,
}

/// Translation columns of a [K,6] parameter tensor.
pub fn keypoints_from_params(params: &Tensor) -> Vec<[f64; 2]> {
    let k = params.shape()[0];
    let d = params.data();
    (0..k).map(|i| [d[i * 6 + 4], d[i * 6 + 5]]).collect()
}

/// Animates frame 0 of `frames` by the motion of every frame (including the
/// 0th itself, whose flow degenerates to the identity).
pub fn reconstruct_video(model: &AnimationModel, frames: &[Tensor]) -> Result<Reconstruction> {
    if frames.is_empty() {
        return Err(Error::Data("cannot reconstruct an empty video".into()));
    }
    no_grad(|| {
        let g = Graph::new(&model.store);
        let source = &frames[0];
        let src_params = model.estimate_motion(&g, source, false)?.params;
        let mut out = Vec::with_capacity(frames.len());
        let mut keypoints = Vec::with_capacity(frames.len());
        for frame in frames {
            let drv_params = model.estimate_motion(&g, frame, false)?.params;
            let bg = model.background_params(&g, source, frame)?;
            let dense = model.dense_motion(&g, source, &src_params, &drv_params, bg.as_ref())?;
            out.push(model.generate(&g, source, Some(&dense))?);
            keypoints.push(keypoints_from_params(&drv_params));
        }
        Ok(Reconstruction { frames: out, keypoints })
    })
}

/// Drives `source` with the motion of `driving`. Relative mode moves the
/// source's own motion by each driving frame's change from driving frame 0.
pub fn animate(
    model: &AnimationModel,
    source: &Tensor,
    driving: &[Tensor],
    mode: TransferMode,
) -> Result<Vec<Tensor>> {
    if driving.is_empty() {
        return Err(Error::Data("cannot animate from an empty driving video".into()));
    }
    no_grad(|| {
        let g = Graph::new(&model.store);
        let src_params = model.estimate_motion(&g, source, false)?.params;
        let src_set = MotionSet::from_params_tensor(&src_params, None)?;
        let initial = if mode == TransferMode::Relative {
            let p = model.estimate_motion(&g, &driving[0], false)?.params;
            Some(MotionSet::from_params_tensor(&p, None)?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(driving.len());
        for frame in driving {
            let drv_params = model.estimate_motion(&g, frame, false)?.params;
            let drv_set = MotionSet::from_params_tensor(&drv_params, None)?;
            let virtual_set = transfer_motion(&src_set, &drv_set, initial.as_ref(), mode)?;
            let virt_params = virtual_set.params_tensor();
            let bg = model.background_params(&g, source, frame)?;
            let dense = model.dense_motion(&g, source, &src_params, &virt_params, bg.as_ref())?;
            out.push(model.generate(&g, source, Some(&dense))?);
        }
        Ok(out)
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KeypointsFile {
    pub keypoints: Vec<Vec<[f64; 2]>>,
}

/// Writes `frame_%05d.png` plus `keypoints.json` into `dir`.
pub fn write_reconstruction(rec: &Reconstruction, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (t, frame) in rec.frames.iter().enumerate() {
        save_png(frame, &dir.join(format!("frame_{t:05}.png")))?;
    }
    let path = dir.join("keypoints.json");
    let file = KeypointsFile { keypoints: rec.keypoints.clone() };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Data(format!("keypoints serialization: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_keypoints(path: &Path) -> Result<Option<Vec<Vec<[f64; 2]>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: KeypointsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(Some(file.keypoints))
}

/// Scores every generated video against its same-named truth video. Truth
/// videos without a generated counterpart are ignored; the reverse is an
/// error. Keypoint metrics need both `keypoints.json` (generated side) and
/// `gt.json` (truth side).
pub fn evaluate_dirs(generated_root: &Path, truth_root: &Path, seed: u64) -> Result<MetricsReport> {
    evaluate_dirs_with_gt(generated_root, truth_root, seed, None)
}

/// Like [`evaluate_dirs`], but an explicit ground-truth record replaces
/// whatever `gt.json` the truth folder holds. Only meaningful for a single
/// video, so more than one generated video is rejected.
pub fn evaluate_dirs_with_gt(
    generated_root: &Path,
    truth_root: &Path,
    seed: u64,
    gt_override: Option<&GroundTruth>,
) -> Result<MetricsReport> {
    let generated = load_video_folder(generated_root)?;
    let truth = load_video_folder(truth_root)?;
    if gt_override.is_some() && generated.videos.len() != 1 {
        return Err(Error::Data(format!(
            "a ground-truth override applies to exactly one video; found {} generated videos",
            generated.videos.len()
        )));
    }
    let by_id: HashMap<&str, usize> =
        truth.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();

    let mut per = Vec::with_capacity(generated.videos.len());
    for gv in &generated.videos {
        let tv = by_id
            .get(gv.id.as_str())
            .map(|&i| &truth.videos[i])
            .ok_or_else(|| Error::Data(format!("no truth video named {}", gv.id)))?;
        let keypoints = read_keypoints(&generated_root.join(&gv.id).join("keypoints.json"))?;
        if let Some(kp) = &keypoints {
            if kp.len() != gv.frames.len() {
                return Err(Error::Data(format!(
                    "video {}: {} keypoint frames for {} image frames",
                    gv.id,
                    kp.len(),
                    gv.frames.len()
                )));
            }
        }
        per.push(video_metrics(
            &VideoEval {
                id: &gv.id,
                generated: &gv.frames,
                truth: &tv.frames,
                keypoints: keypoints.as_deref(),
                gt: gt_override.or(tv.gt.as_ref()),
            },
            seed,
        )?);
    }
    aggregate(per, seed)
}

fn gray_to_png(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(values);
    }
    let img = Tensor::from_vec(data, &[3, h, w])?;
    save_png(&img, path)
}

/// Writes one grayscale PNG per (layer, motion token): the head-averaged
/// attention of that token over the image-token lattice, min-max scaled per
/// map. Returns the paths in (layer, token) order.
pub fn dump_attention(model: &AnimationModel, image: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (gh, gw) = model.token_grid(image)?;
    let n = gh * gw;
    let k = model.cfg.num_parts;
    let est = no_grad(|| {
        let g = Graph::new(&model.store);
        model.estimate_motion(&g, image, true)
    })?;
    if est.attention.is_empty() {
        return Err(Error::Data("model returned no attention maps".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut paths = Vec::with_capacity(est.attention.len() * k);
    for (layer, att) in est.attention.iter().enumerate() {
        let cols = att.shape()[1];
        // Unified rows cover motion+image tokens; split rows only image ones.
        let offset = cols.checked_sub(n).ok_or_else(|| {
            Error::dim("dump_attention", format!("{cols} columns for {n} image tokens"))
        })?;
        let d = att.data();
        for tok in 0..k {
            let row = &d[tok * cols + offset..(tok + 1) * cols];
            let (lo, hi) = row
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
            let norm: Vec<f64> = row.iter().map(|&x| (x - lo) * scale).collect();
            let path = out_dir.join(format!("layer{layer:02}_token{tok:02}.png"));
            gray_to_png(&norm, gh, gw, &path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MotionDump {
    /// [K,6] motion parameters of the image against itself.
    pub params: Vec<[f64; 6]>,
    pub background: Option<[f64; 6]>,
    /// Mask PNG file names, background first, relative to the JSON file.
    pub masks: Vec<String>,
    pub occlusion: String,
    /// (height, width) of the flow-resolution maps.
    pub flow_resolution: [usize; 2],
}

/// Self-driving motion summary: JSON parameters next to raw-value mask and
/// occlusion PNG heatmaps, all written beside `out_json`.
pub fn dump_motion(model: &AnimationModel, image: &Tensor, out_json: &Path) -> Result<MotionDump> {
    let dir = out_json.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let (params, dense) = no_grad(|| {
        let g = Graph::new(&model.store);
        let params = model.estimate_motion(&g, image, false)?.params;
        let bg = model.background_params(&g, image, image)?;
        let dense = model.dense_motion(&g, image, &params, &params, bg.as_ref())?;
        Ok::<_, Error>((params, dense))
    })?;

    let k1 = dense.masks.shape()[0];
    let (fh, fw) = (dense.masks.shape()[1], dense.masks.shape()[2]);
    let mut masks = Vec::with_capacity(k1);
    for i in 0..k1 {
        let name = format!("mask_{i:02}.png");
        let slice = &dense.masks.data()[i * fh * fw..(i + 1) * fh * fw];
        gray_to_png(slice, fh, fw, &dir.join(&name))?;
        masks.push(name);
    }
    gray_to_png(dense.occlusion.data(), fh, fw, &dir.join("occlusion.png"))?;

    let bg_vec = no_grad(|| {
        let g = Graph::new(&model.store);
        model.background_params(&g, image, image)
    })?
    .map(|t| {
        let d = t.data();
        [d[0], d[1], d[2], d[3], d[4], d[5]]
    });
    let dump = MotionDump {
        params: params.data().chunks(6).map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]]).collect(),
        background: bg_vec,
        masks,
        occlusion: "occlusion.png".to_string(),
        flow_resolution: [fh, fw],
    };
    let text = serde_json::to_string_pretty(&dump)
        .map_err(|e| Error::Data(format!("motion dump serialization: {e}")))?;
    std::fs::write(out_json, text + "\n")
        .map_err(|e| Error::io(out_json.display().to_string(), e))?;
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, load_png, write_scene, SceneSpec};
    use crate::geometry::identity_grid;
    use crate::model::tests::tiny_config;
    use crate::model::AnimationModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene_frames(seed: u64, frames: usize) -> Vec<Tensor> {
        let spec = SceneSpec { size: 32, frames, parts: 2, ..SceneSpec::default() };
        generate_scene(seed, &spec).unwrap().frames
    }

    #[test]
    fn untrained_model_reconstructs_with_identity_flow() {
        let model = AnimationModel::new(tiny_config(), 0).unwrap();
        let frames = scene_frames(4, 3);
        let g = Graph::new(&model.store);
        let src_params = model.estimate_motion(&g, &frames[0], false).unwrap().params;
        for frame in &frames {
            let drv_params = model.estimate_motion(&g, frame, false).unwrap().params;
            let dense =
                model.dense_motion(&g, &frames[0], &src_params, &drv_params, None).unwrap();
            let id = identity_grid(dense.flow.shape()[0], dense.flow.shape()[1]);
            let worst = dense
                .flow
                .data()
                .iter()
                .zip(id.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-12, "untrained flow deviates from identity by {worst}");
        }
    }

    #[test]
    fn reconstruction_writes_frames_and_keypoints() {
        let dir = tempfile::tempdir().unwrap();
        let model = AnimationModel::new(tiny_config(), 0).unwrap();
        let frames = scene_frames(1, 3);
        let rec = reconstruct_video(&model, &frames).unwrap();
        assert_eq!(rec.frames.len(), 3);
        assert_eq!(rec.keypoints.len(), 3);
        assert_eq!(rec.keypoints[0].len(), model.cfg.num_parts);

        write_reconstruction(&rec, dir.path()).unwrap();
        for t in 0..3 {
            let png = load_png(&dir.path().join(format!("frame_{t:05}.png"))).unwrap();
            assert_eq!(png.shape(), &[3, 32, 32]);
        }
        let kps = read_keypoints(&dir.path().join("keypoints.json")).unwrap().unwrap();
        assert_eq!(kps.len(), 3);
    }

    #[test]
    fn absolute_animation_from_frame_zero_matches_reconstruction() {
        let mut model = AnimationModel::new(tiny_config(), 0).unwrap();
        // Perturbs the head so motion estimates actually vary by frame.
        let idx = model
            .store
            .entries()
            .iter()
            .position(|e| e.name == "transformer.head.weight")
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for wv in &mut model.store.entry_mut(idx).data {
            *wv = rng.gen_range(-0.05..0.05);
        }

        let frames = scene_frames(2, 3);
        let rec = reconstruct_video(&model, &frames).unwrap();
        let anim = animate(&model, &frames[0], &frames, TransferMode::Absolute).unwrap();
        assert_eq!(rec.frames.len(), anim.len());
        for (a, b) in rec.frames.iter().zip(&anim) {
            assert_eq!(a.data(), b.data(), "absolute animation diverged from reconstruction");
        }
    }

    #[test]
    fn relative_animation_of_static_driving_is_self_reconstruction() {
        let mut model = AnimationModel::new(tiny_config(), 0).unwrap();
        let idx = model
            .store
            .entries()
            .iter()
            .position(|e| e.name == "transformer.head.weight")
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for wv in &mut model.store.entry_mut(idx).data {
            *wv = rng.gen_range(-0.05..0.05);
        }

        let frames = scene_frames(3, 2);
        let source = &frames[0];
        let still = vec![frames[1].clone(), frames[1].clone(), frames[1].clone()];
        let anim = animate(&model, source, &still, TransferMode::Relative).unwrap();

        let g = Graph::new(&model.store);
        let expected = model.reconstruct_pair(&g, source, source).unwrap().generated;
        for frame in &anim {
            let worst = frame
                .data()
                .iter()
                .zip(expected.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-9, "static relative animation moved the source by {worst}");
        }
    }

    #[test]
    fn evaluate_dirs_scores_and_notes_missing_gt() {
        let work = tempfile::tempdir().unwrap();
        let truth_root = work.path().join("truth");
        let gen_root = work.path().join("generated");
        let spec = SceneSpec { size: 32, frames: 3, parts: 2, ..SceneSpec::default() };
        let model = AnimationModel::new(tiny_config(), 0).unwrap();

        for seed in 0..2u64 {
            let scene = generate_scene(seed, &spec).unwrap();
            let dir = truth_root.join(format!("vid{seed:03}"));
            write_scene(&scene, &dir).unwrap();
            let rec = reconstruct_video(&model, &scene.frames).unwrap();
            write_reconstruction(&rec, &gen_root.join(format!("vid{seed:03}"))).unwrap();
        }
        std::fs::remove_file(truth_root.join("vid001").join("gt.json")).unwrap();

        let report = evaluate_dirs(&gen_root, &truth_root, 99).unwrap();
        assert_eq!(report.per_video.len(), 2);
        assert!(report.l1 > 0.0);
        assert!(report.akd_px.is_some(), "vid000 has gt, AKD must be present");
        assert!(report.per_video[1].akd_px.is_none());
        assert!(report.note.as_ref().unwrap().contains("vid001"));
        assert_eq!(report.embedding_seed, 99);
    }

    #[test]
    fn attention_dump_writes_one_map_per_layer_and_token() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [
            crate::transformer::AttentionMode::Unified,
            crate::transformer::AttentionMode::Split,
        ] {
            let mut cfg = tiny_config();
            cfg.attention_mode = mode;
            let model = AnimationModel::new(cfg, 0).unwrap();
            let frames = scene_frames(6, 1);
            let out = dir.path().join(format!("{mode:?}"));
            let paths = dump_attention(&model, &frames[0], &out).unwrap();
            assert_eq!(paths.len(), model.cfg.layers * model.cfg.num_parts);
            let img = load_png(&paths[0]).unwrap();
            // 32 px / (backbone x4 * patch 4) = 2x2 token lattice.
            assert_eq!(img.shape(), &[3, 2, 2]);
        }
    }

    #[test]
    fn motion_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = AnimationModel::new(tiny_config(), 0).unwrap();
        let frames = scene_frames(9, 1);
        let json_path = dir.path().join("motion.json");
        let dump = dump_motion(&model, &frames[0], &json_path).unwrap();
        assert_eq!(dump.params.len(), model.cfg.num_parts);
        assert_eq!(dump.masks.len(), model.cfg.num_parts + 1);
        assert_eq!(dump.flow_resolution, [8, 8]);

        let text = std::fs::read_to_string(&json_path).unwrap();
        let back: MotionDump = serde_json::from_str(&text).unwrap();
        assert_eq!(back.params, dump.params);
        for name in &back.masks {
            assert_eq!(load_png(&dir.path().join(name)).unwrap().shape(), &[3, 8, 8]);
        }
        assert!(dir.path().join(back.occlusion).exists());
        // Untrained mask head is zero: uniform masks and half occlusion.
        let m0 = load_png(&dir.path().join(&back.masks[0])).unwrap();
        let expect = 1.0 / (model.cfg.num_parts + 1) as f64;
        assert!((m0.data()[0] - expect).abs() < 2.0 / 255.0);
    }
}
