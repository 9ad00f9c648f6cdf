//! Coordinate conventions, affine transforms, warping, and the random
//! geometric transforms drawn for the equivariance objective.
//!
//! All coordinates are normalized to [−1,1], x rightward, y downward,
//! align-corners (see `numerics::sample`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use crate::numerics::{axis_coord, gaussian_heatmaps};

const DET_THRESHOLD: f64 = 1e-8;

/// Constant [h,w,2] tensor of normalized (x,y) pixel-center coordinates.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        let cy = axis_coord(y, h);
        for x in 0..w {
            data.push(axis_coord(x, w));
            data.push(cy);
        }
    }
    Tensor::from_vec(data, &[h, w, 2]).expect("grid shape is consistent by construction")
}

/// Gaussian bump exp(−‖c−t‖²/(2σ²)) for a single keypoint, as [h,w].
pub fn gaussian_heatmap(t: [f64; 2], h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    let kp = Tensor::from_vec(vec![t[0], t[1]], &[1, 2])?;
    gaussian_heatmaps(&kp, h, w, sigma)?.reshape(&[h, w])
}

/// p ↦ A·p + b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform2D {
    /// Row-major 2×2 linear part.
    pub a: [[f64; 2]; 2],
    /// Translation.
    pub b: [f64; 2],
}

impl AffineTransform2D {
    pub const IDENTITY: AffineTransform2D =
        AffineTransform2D { a: [[1.0, 0.0], [0.0, 1.0]], b: [0.0, 0.0] };

    pub fn new(a: [[f64; 2]; 2], b: [f64; 2]) -> Self {
        AffineTransform2D { a, b }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.b[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.b[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    /// Full inverse: T⁻¹(p) = A⁻¹(p − b).
    pub fn inverse(&self) -> Result<AffineTransform2D> {
        let inv = invert_affine(self.a)?;
        let b = [
            -(inv[0][0] * self.b[0] + inv[0][1] * self.b[1]),
            -(inv[1][0] * self.b[0] + inv[1][1] * self.b[1]),
        ];
        Ok(AffineTransform2D { a: inv, b })
    }
}

/// 2×2 inverse via the adjugate; near-singular input is an error.
pub fn invert_affine(a: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() <= DET_THRESHOLD {
        return Err(Error::SingularAffine { det: det.abs(), threshold: DET_THRESHOLD });
    }
    let inv = 1.0 / det;
    Ok([[a[1][1] * inv, -a[0][1] * inv], [-a[1][0] * inv, a[0][0] * inv]])
}

pub fn apply_affine(t: &AffineTransform2D, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    pts.iter().map(|&p| t.apply(p)).collect()
}

/// Grid whose entry at pixel c is T(c); sampling the input at this grid
/// realizes the inverse-warp convention out(c) = in(T(c)).
pub fn affine_grid(t: &AffineTransform2D, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        let cy = axis_coord(y, h);
        for x in 0..w {
            let p = t.apply([axis_coord(x, w), cy]);
            data.push(p[0]);
            data.push(p[1]);
        }
    }
    Tensor::from_vec(data, &[h, w, 2]).expect("grid shape is consistent by construction")
}

/// Inverse-warp: output pixel at coordinate c samples the input at T(c).
/// Under this convention image content (and detected keypoints) moves by T⁻¹.
pub fn warp_image_by_affine(image: &Tensor, t: &AffineTransform2D) -> Result<Tensor> {
    if t.det().abs() <= DET_THRESHOLD {
        return Err(Error::SingularAffine { det: t.det().abs(), threshold: DET_THRESHOLD });
    }
    let (h, w) = match image.shape() {
        [_, h, w] => (*h, *w),
        s => {
            return Err(Error::dim(
                "warp_image_by_affine",
                format!("expected [C,H,W], got {s:?}"),
            ));
        }
    };
    image.bilinear_sample(&affine_grid(t, h, w))
}

/// Sampling ranges for the equivariance transform. Zero-width ranges give
/// the identity transform.
#[derive(Debug, Clone, Copy)]
pub struct TransformRanges {
    pub rotation: f64,
    pub log_scale: f64,
    pub shear: f64,
    pub translation: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            rotation: std::f64::consts::PI / 6.0,
            log_scale: 1.2f64.ln(),
            shear: 0.1,
            translation: 0.2,
        }
    }
}

/// Rotation · per-axis scale · shear plus translation, each drawn uniformly
/// from symmetric ranges. Always invertible: |det| = sx·sy ≥ 0.64 at the
/// default ranges.
pub fn random_geometric_transform(rng: &mut impl Rng, ranges: &TransformRanges) -> AffineTransform2D {
    let u = |rng: &mut dyn rand::RngCore, half: f64| -> f64 {
        if half == 0.0 {
            0.0
        } else {
            rng.gen_range(-half..=half)
        }
    };
    let theta = u(rng, ranges.rotation);
    let sx = u(rng, ranges.log_scale).exp();
    let sy = u(rng, ranges.log_scale).exp();
    let shear = u(rng, ranges.shear);
    let tx = u(rng, ranges.translation);
    let ty = u(rng, ranges.translation);

    let (sin, cos) = theta.sin_cos();
    let rot = [[cos, -sin], [sin, cos]];
    let scale = [[sx, 0.0], [0.0, sy]];
    let sh = [[1.0, shear], [0.0, 1.0]];
    let a = mat_mul(&mat_mul(&rot, &scale), &sh);
    AffineTransform2D { a, b: [tx, ty] }
}

fn mat_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_grid_corners_center_and_degenerate_axis() {
        let g = identity_grid(2, 2);
        assert_eq!(g.to_vec(), vec![-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);

        let g3 = identity_grid(3, 3);
        let d = g3.to_vec();
        assert_eq!(&d[(1 * 3 + 1) * 2..(1 * 3 + 1) * 2 + 2], &[0.0, 0.0]);

        let g1 = identity_grid(1, 3);
        assert!(g1.to_vec().chunks(2).all(|c| c[1] == 0.0));
    }

    #[test]
    fn apply_affine_cases() {
        let id = AffineTransform2D::IDENTITY;
        assert_eq!(id.apply([0.3, -0.7]), [0.3, -0.7]);

        let shift = AffineTransform2D::new([[1.0, 0.0], [0.0, 1.0]], [0.1, 0.0]);
        assert_eq!(shift.apply([0.0, 0.0]), [0.1, 0.0]);

        // 90° rotation in (x right, y down) coordinates: (1,0) -> (0,1).
        let th = std::f64::consts::FRAC_PI_2;
        let rot = AffineTransform2D::new(
            [[th.cos(), -th.sin()], [th.sin(), th.cos()]],
            [0.0, 0.0],
        );
        let p = rot.apply([1.0, 0.0]);
        assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invert_affine_cases() {
        assert_eq!(invert_affine([[1.0, 0.0], [0.0, 1.0]]).unwrap(), [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(invert_affine([[2.0, 0.0], [0.0, 4.0]]).unwrap(), [[0.5, 0.0], [0.0, 0.25]]);
        assert_eq!(invert_affine([[1.0, 1.0], [0.0, 1.0]]).unwrap(), [[1.0, -1.0], [0.0, 1.0]]);
        assert!(matches!(
            invert_affine([[1.0, 1.0], [1.0, 1.0]]),
            Err(Error::SingularAffine { .. })
        ));
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = random_geometric_transform(&mut rng, &TransformRanges::default());
            let inv = t.inverse().unwrap();
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let q = inv.apply(t.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn random_transform_is_deterministic_and_well_conditioned() {
        let a = random_geometric_transform(
            &mut ChaCha8Rng::seed_from_u64(5),
            &TransformRanges::default(),
        );
        let b = random_geometric_transform(
            &mut ChaCha8Rng::seed_from_u64(5),
            &TransformRanges::default(),
        );
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let t = random_geometric_transform(&mut rng, &TransformRanges::default());
            assert!(t.det().abs() > 0.5);
        }
    }

    #[test]
    fn zero_ranges_give_identity() {
        let ranges = TransformRanges { rotation: 0.0, log_scale: 0.0, shear: 0.0, translation: 0.0 };
        let t = random_geometric_transform(&mut ChaCha8Rng::seed_from_u64(0), &ranges);
        assert_eq!(t, AffineTransform2D::IDENTITY);
    }

    #[test]
    fn warp_identity_and_half_pixel_translation() {
        let img = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[1, 4, 4]).unwrap();
        let out = warp_image_by_affine(&img, &AffineTransform2D::IDENTITY).unwrap();
        assert_eq!(out.to_vec(), img.to_vec());

        // One-hot pixel, half-pixel shift: mass splits 50/50 between neighbors.
        let mut data = vec![0.0; 16];
        data[1 * 4 + 1] = 1.0;
        let hot = Tensor::from_vec(data, &[1, 4, 4]).unwrap();
        let half_px = 2.0 / 3.0 / 2.0; // half of one pixel step on a 4-wide axis
        let t = AffineTransform2D::new([[1.0, 0.0], [0.0, 1.0]], [half_px, 0.0]);
        let out = warp_image_by_affine(&hot, &t).unwrap();
        let d = out.to_vec();
        assert!((d[1 * 4 + 0] - 0.5).abs() < 1e-12);
        assert!((d[1 * 4 + 1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn warp_moves_content_opposite_to_keypoint_convention() {
        // Inverse-warp: out(c) = in(T(c)), so a feature at p lands at T⁻¹(p).
        let mut data = vec![0.0; 25];
        data[2 * 5 + 2] = 1.0;
        let img = Tensor::from_vec(data, &[1, 5, 5]).unwrap();
        let step = 0.5; // exactly one pixel on a 5-wide axis
        let t = AffineTransform2D::new([[1.0, 0.0], [0.0, 1.0]], [step, 0.0]);
        let out = warp_image_by_affine(&img, &t).unwrap();
        let inv_p = t.inverse().unwrap().apply([0.0, 0.0]);
        let col = ((inv_p[0] + 1.0) / 2.0 * 4.0).round() as usize;
        assert_eq!(col, 1);
        assert!((out.to_vec()[2 * 5 + col] - 1.0).abs() < 1e-12);
    }
}
