//! Desk-scale evaluation metrics: pixel L1, Hungarian-matched keypoint
//! distance against synthetic ground truth, a coverage rate, and a
//! fixed-seed random-embedding distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroundTruth;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Seed of the frozen embedding network behind AED_sub.
pub const AED_SEED: u64 = 4242;
/// Normalized-unit radius inside which a matched keypoint counts as covering
/// its ground-truth centroid.
pub const COVERAGE_RADIUS: f64 = 0.25;

/// Mean absolute pixel difference.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "l1_distance",
            format!("shapes {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(Error::dim("l1_distance", "empty tensors"));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / n as f64)
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// by the O(n^2 m) potential/augmenting-path method. Returns the column
/// chosen for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|row| row.len() != m) {
        return Err(Error::dim("hungarian", "ragged cost matrix"));
    }
    if n > m {
        return Err(Error::dim(
            "hungarian",
            format!("{n} rows cannot each take a distinct one of {m} columns"),
        ));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { context: "hungarian cost".into() });
    }

    // 1-based potentials; p[j] holds the row currently matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Distance in pixels between two normalized [-1,1] points on an (h, w) grid
/// with the align-corners convention (coordinate -1 is pixel 0, +1 is n-1).
fn pixel_distance(a: [f64; 2], b: [f64; 2], h: usize, w: usize) -> f64 {
    let dx = (a[0] - b[0]) * (w.saturating_sub(1)) as f64 / 2.0;
    let dy = (a[1] - b[1]) * (h.saturating_sub(1)) as f64 / 2.0;
    (dx * dx + dy * dy).sqrt()
}

fn norm_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Keypoint metrics for one video. `pred[t][k]` are the model's normalized
/// keypoints; the gt part -> keypoint matching is fixed on frame 0 and reused
/// so identity swaps later in the video show up as distance.
pub fn keypoint_metrics(
    pred: &[Vec<[f64; 2]>],
    gt: &GroundTruth,
    h: usize,
    w: usize,
) -> Result<(f64, f64)> {
    let frames = pred.len();
    if frames == 0 {
        return Err(Error::Data("no frames for keypoint metrics".into()));
    }
    let parts = gt.parts.len();
    let k = pred[0].len();
    if parts == 0 {
        return Err(Error::Data("ground truth has no parts".into()));
    }
    if parts > k {
        return Err(Error::Data(format!(
            "{parts} ground-truth parts cannot match {k} predicted keypoints"
        )));
    }
    for part in &gt.parts {
        if part.centroids.len() != frames {
            return Err(Error::Data(format!(
                "ground truth has {} centroid frames, predictions have {frames}",
                part.centroids.len()
            )));
        }
    }
    if pred.iter().any(|f| f.len() != k) {
        return Err(Error::Data("ragged keypoint predictions".into()));
    }

    let cost: Vec<Vec<f64>> = (0..parts)
        .map(|p| (0..k).map(|j| norm_distance(pred[0][j], gt.parts[p].centroids[0])).collect())
        .collect();
    let assign = hungarian(&cost)?;

    let mut dist_sum = 0.0;
    let mut covered = 0usize;
    for t in 0..frames {
        for (p, part) in gt.parts.iter().enumerate() {
            let kp = pred[t][assign[p]];
            let c = part.centroids[t];
            dist_sum += pixel_distance(kp, c, h, w);
            if norm_distance(kp, c) <= COVERAGE_RADIUS {
                covered += 1;
            }
        }
    }
    let total = (frames * parts) as f64;
    Ok((dist_sum / total, covered as f64 / total))
}

/// Frozen random conv embedding: three stride-2 3x3 layers with relu and a
/// global average pool. Purely a fixed feature hash for AED_sub.
pub fn embedding(image: &Tensor, seed: u64) -> Result<Vec<f64>> {
    let [_, _, _] = *image.shape() else {
        return Err(Error::dim(
            "embedding",
            format!("expected [c,h,w] image, got {:?}", image.shape()),
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = image.clone();
    for (cin, cout) in [(image.shape()[0], 8), (8, 16), (16, 32)] {
        let bound = (1.0 / (cin * 9) as f64).sqrt();
        let data: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = Tensor::from_vec(data, &[cout, cin, 3, 3])?;
        let b = Tensor::zeros(&[cout]);
        cur = cur.conv2d(&w, &b, 2, 1)?.relu();
    }
    let (c, hw) = (cur.shape()[0], cur.shape()[1] * cur.shape()[2]);
    let d = cur.data();
    Ok((0..c).map(|i| d[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64).collect())
}

/// Euclidean distance between the frozen embeddings of two frames.
pub fn embedding_distance(a: &Tensor, b: &Tensor, seed: u64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "embedding_distance",
            format!("shapes {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let ea = embedding(a, seed)?;
    let eb = embedding(b, seed)?;
    Ok(ea.iter().zip(&eb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub l1: f64,
    pub akd_px: Option<f64>,
    pub coverage_rate: Option<f64>,
    pub aed_sub: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub l1: f64,
    pub akd_px: Option<f64>,
    pub coverage_rate: Option<f64>,
    pub aed_sub: f64,
    pub embedding_seed: u64,
    /// Set when keypoint metrics were skipped for some videos.
    pub note: Option<String>,
    pub per_video: Vec<VideoMetrics>,
}

/// Frame sequences plus optional keypoints/gt for one video.
pub struct VideoEval<'a> {
    pub id: &'a str,
    pub generated: &'a [Tensor],
    pub truth: &'a [Tensor],
    /// `keypoints[t][k]`, normalized coordinates, detected on the original
    /// driving frames during reconstruction.
    pub keypoints: Option<&'a [Vec<[f64; 2]>]>,
    pub gt: Option<&'a GroundTruth>,
}

/// Per-video metrics for one (generated, truth) pair.
pub fn video_metrics(input: &VideoEval, seed: u64) -> Result<VideoMetrics> {
    if input.generated.len() != input.truth.len() {
        return Err(Error::Data(format!(
            "video {}: {} generated frames vs {} truth frames",
            input.id,
            input.generated.len(),
            input.truth.len()
        )));
    }
    if input.generated.is_empty() {
        return Err(Error::Data(format!("video {}: no frames", input.id)));
    }
    let mut l1 = 0.0;
    let mut aed = 0.0;
    for (g, t) in input.generated.iter().zip(input.truth) {
        l1 += l1_distance(g, t)?;
        aed += embedding_distance(g, t, seed)?;
    }
    let n = input.generated.len() as f64;

    let kp = match (input.keypoints, input.gt) {
        (Some(pred), Some(gt)) => {
            let shape = input.truth[0].shape();
            Some(keypoint_metrics(pred, gt, shape[1], shape[2])?)
        }
        _ => None,
    };
    Ok(VideoMetrics {
        id: input.id.to_string(),
        l1: l1 / n,
        akd_px: kp.map(|(akd, _)| akd),
        coverage_rate: kp.map(|(_, cov)| cov),
        aed_sub: aed / n,
    })
}

/// Uniform mean over videos; keypoint metrics average over the videos that
/// have them, with a note naming the ones that do not.
pub fn aggregate(per_video: Vec<VideoMetrics>, seed: u64) -> Result<MetricsReport> {
    if per_video.is_empty() {
        return Err(Error::Data("no videos to aggregate".into()));
    }
    let n = per_video.len() as f64;
    let l1 = per_video.iter().map(|v| v.l1).sum::<f64>() / n;
    let aed = per_video.iter().map(|v| v.aed_sub).sum::<f64>() / n;

    let with_kp: Vec<&VideoMetrics> = per_video.iter().filter(|v| v.akd_px.is_some()).collect();
    let (akd, cov) = if with_kp.is_empty() {
        (None, None)
    } else {
        let m = with_kp.len() as f64;
        (
            Some(with_kp.iter().filter_map(|v| v.akd_px).sum::<f64>() / m),
            Some(with_kp.iter().filter_map(|v| v.coverage_rate).sum::<f64>() / m),
        )
    };
    let missing: Vec<&str> =
        per_video.iter().filter(|v| v.akd_px.is_none()).map(|v| v.id.as_str()).collect();
    let note = if missing.is_empty() {
        None
    } else {
        Some(format!("keypoint metrics omitted (no ground truth): {}", missing.join(", ")))
    };
    Ok(MetricsReport {
        l1,
        akd_px: akd,
        coverage_rate: cov,
        aed_sub: aed,
        embedding_seed: seed,
        note,
        per_video,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GtPart;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost[row].len() {
                if !used[j] {
                    used[j] = true;
                    let c = cost[row][j] + rec(cost, row + 1, used);
                    if c < best {
                        best = c;
                    }
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..200 {
            let n = rng.gen_range(1..=4usize);
            let m = rng.gen_range(n..=6usize);
            let cost: Vec<Vec<f64>> =
                (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let assign = hungarian(&cost).unwrap();

            let mut seen = vec![false; m];
            let mut total = 0.0;
            for (i, &j) in assign.iter().enumerate() {
                assert!(!seen[j], "case {case}: column {j} assigned twice");
                seen[j] = true;
                total += cost[i][j];
            }
            let oracle = brute_force(&cost);
            assert!(
                (total - oracle).abs() < 1e-9,
                "case {case}: hungarian {total} vs brute force {oracle}"
            );
        }
    }

    #[test]
    fn hungarian_rejects_bad_inputs() {
        assert!(hungarian(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(hungarian(&[vec![1.0], vec![2.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
        assert_eq!(hungarian(&[]).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::full(&[3, 2, 2], 0.5);
        let b = Tensor::full(&[3, 2, 2], 0.75);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert!((l1_distance(&a, &b).unwrap() - 0.25).abs() < 1e-15);
    }

    fn gt_single(centroids: Vec<[f64; 2]>) -> GroundTruth {
        let frames = centroids.len();
        GroundTruth {
            parts: vec![GtPart { centroids, affines: vec![[[1.0, 0.0], [0.0, 1.0]]; frames] }],
        }
    }

    #[test]
    fn three_pixel_offset_gives_akd_three() {
        // One frame, one part, prediction 3 px right of the centroid on a
        // 64-wide grid: normalized dx = 3 * 2/(w-1).
        let dx = 3.0 * 2.0 / 63.0;
        let pred = vec![vec![[0.1 + dx, -0.2]]];
        let gt = gt_single(vec![[0.1, -0.2]]);
        let (akd, cov) = keypoint_metrics(&pred, &gt, 64, 64).unwrap();
        assert!((akd - 3.0).abs() < 1e-12, "akd {akd}");
        assert_eq!(cov, 1.0);
    }

    #[test]
    fn akd_is_invariant_to_keypoint_permutation_and_zero_on_exact_match() {
        let c0 = [[-0.4, -0.1], [0.3, 0.5], [0.0, -0.6]];
        let c1 = [[-0.35, -0.05], [0.25, 0.55], [0.05, -0.55]];
        let gt = GroundTruth {
            parts: (0..3)
                .map(|p| GtPart {
                    centroids: vec![c0[p], c1[p]],
                    affines: vec![[[1.0, 0.0], [0.0, 1.0]]; 2],
                })
                .collect(),
        };
        let ident: Vec<Vec<[f64; 2]>> = vec![c0.to_vec(), c1.to_vec()];
        let (akd, cov) = keypoint_metrics(&ident, &gt, 64, 64).unwrap();
        assert!(akd.abs() < 1e-12);
        assert_eq!(cov, 1.0);

        // Same keypoints listed in a different order, plus a spare 4th one.
        let perm: Vec<Vec<[f64; 2]>> = vec![
            vec![c0[2], [0.9, 0.9], c0[0], c0[1]],
            vec![c1[2], [0.9, 0.9], c1[0], c1[1]],
        ];
        let (akd_p, _) = keypoint_metrics(&perm, &gt, 64, 64).unwrap();
        assert!(akd_p.abs() < 1e-12, "permutation changed akd: {akd_p}");
    }

    #[test]
    fn matching_is_anchored_on_frame_zero() {
        // Two parts whose gt centroids swap places at frame 1. Keypoints that
        // track the original identities score zero; per-frame re-matching
        // would also give zero to keypoints that teleport, which must score
        // badly here.
        let gt = GroundTruth {
            parts: vec![
                GtPart {
                    centroids: vec![[-0.5, 0.0], [0.5, 0.0]],
                    affines: vec![[[1.0, 0.0], [0.0, 1.0]]; 2],
                },
                GtPart {
                    centroids: vec![[0.5, 0.0], [-0.5, 0.0]],
                    affines: vec![[[1.0, 0.0], [0.0, 1.0]]; 2],
                },
            ],
        };
        let tracking = vec![vec![[-0.5, 0.0], [0.5, 0.0]], vec![[0.5, 0.0], [-0.5, 0.0]]];
        let (akd, _) = keypoint_metrics(&tracking, &gt, 64, 64).unwrap();
        assert!(akd.abs() < 1e-12);

        let stuck = vec![vec![[-0.5, 0.0], [0.5, 0.0]], vec![[-0.5, 0.0], [0.5, 0.0]]];
        let (akd_s, _) = keypoint_metrics(&stuck, &gt, 64, 64).unwrap();
        // Frame 1 is off by a full unit (31.5 px) per part, frame 0 exact.
        assert!((akd_s - 31.5 / 2.0).abs() < 1e-9, "akd {akd_s}");
    }

    #[test]
    fn coverage_counts_quarter_unit_radius() {
        let gt = gt_single(vec![[0.0, 0.0], [0.0, 0.0]]);
        let pred = vec![vec![[0.2, 0.0]], vec![[0.3, 0.0]]];
        let (_, cov) = keypoint_metrics(&pred, &gt, 64, 64).unwrap();
        assert_eq!(cov, 0.5);
    }

    #[test]
    fn more_parts_than_keypoints_is_an_error() {
        let gt = GroundTruth {
            parts: (0..2)
                .map(|_| GtPart {
                    centroids: vec![[0.0, 0.0]],
                    affines: vec![[[1.0, 0.0], [0.0, 1.0]]],
                })
                .collect(),
        };
        let pred = vec![vec![[0.0, 0.0]]];
        assert!(keypoint_metrics(&pred, &gt, 64, 64).is_err());
    }

    #[test]
    fn identical_videos_score_zero_l1_and_aed() {
        let frames: Vec<Tensor> = (0..2)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                Tensor::from_vec(
                    (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    &[3, 32, 32],
                )
                .unwrap()
            })
            .collect();
        let input = VideoEval {
            id: "vid000",
            generated: &frames,
            truth: &frames,
            keypoints: None,
            gt: None,
        };
        let m = video_metrics(&input, AED_SEED).unwrap();
        assert_eq!(m.l1, 0.0);
        assert_eq!(m.aed_sub, 0.0);
        assert!(m.akd_px.is_none());
    }

    #[test]
    fn aggregate_notes_missing_ground_truth() {
        let a = VideoMetrics {
            id: "vid000".into(),
            l1: 0.1,
            akd_px: Some(2.0),
            coverage_rate: Some(1.0),
            aed_sub: 0.2,
        };
        let b = VideoMetrics {
            id: "vid001".into(),
            l1: 0.3,
            akd_px: None,
            coverage_rate: None,
            aed_sub: 0.4,
        };
        let report = aggregate(vec![a, b], AED_SEED).unwrap();
        assert!((report.l1 - 0.2).abs() < 1e-15);
        assert_eq!(report.akd_px, Some(2.0));
        assert!(report.note.as_ref().unwrap().contains("vid001"));

        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_video.len(), 2);
        assert_eq!(back.akd_px, Some(2.0));
    }

    #[test]
    fn embeddings_are_seed_deterministic_and_seed_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::from_vec(
            (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
            &[3, 32, 32],
        )
        .unwrap();
        let e1 = embedding(&img, AED_SEED).unwrap();
        let e2 = embedding(&img, AED_SEED).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 32);
        let e3 = embedding(&img, AED_SEED + 1).unwrap();
        assert_ne!(e1, e3);
    }
}
