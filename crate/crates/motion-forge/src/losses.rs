//! Training objectives: multi-resolution perceptual reconstruction,
//! keypoint equivariance under random affine warps, and the background /
//! concentration regularizers on the predicted masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{warp_image_by_affine, AffineTransform2D};
use crate::numerics::{axis_coord, Tensor};

/// Foreground masks lighter than this contribute no concentration term.
pub const CONCENTRATION_EPS: f64 = 1e-8;

pub const DEFAULT_LAMBDA: f64 = 0.1;

struct PhiLayer {
    weights: Vec<f64>,
    cout: usize,
    cin: usize,
    stride: usize,
}

/// Frozen random feature extractor standing in for a pretrained perceptual
/// network: four 3x3 convs with fixed weights drawn from a recorded seed.
/// Stores raw weights (no graph nodes) so models stay Sync for batch
/// parallelism; tensors are materialized per evaluation.
pub struct PerceptualNet {
    layers: Vec<PhiLayer>,
    pub seed: u64,
}

impl PerceptualNet {
    pub fn new(seed: u64) -> PerceptualNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(3usize, 8usize, 1usize), (8, 8, 2), (8, 8, 1), (8, 8, 2)];
        let layers = spec
            .iter()
            .map(|&(cin, cout, stride)| {
                let fan_in = (cin * 9) as f64;
                let bound = (1.0 / fan_in).sqrt();
                let weights: Vec<f64> =
                    (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
                PhiLayer { weights, cout, cin, stride }
            })
            .collect();
        PerceptualNet { layers, seed }
    }

    /// Feature maps after each conv+relu; input pixels are not included.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let w = Tensor::from_vec(layer.weights.clone(), &[layer.cout, layer.cin, 3, 3])?;
            let b = Tensor::zeros(&[layer.cout]);
            cur = cur.conv2d(&w, &b, layer.stride, 1)?.relu();
            out.push(cur.clone());
        }
        Ok(out)
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.abs().mean_all())
}

/// Mean absolute feature difference over a 3-level image pyramid, with raw
/// pixels counted as a feature layer at every level.
pub fn perceptual_loss(phi: &PerceptualNet, generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    if generated.shape() != target.shape() {
        return Err(Error::dim(
            "perceptual_loss",
            format!("shapes {:?} vs {:?}", generated.shape(), target.shape()),
        ));
    }
    let mut total: Option<Tensor> = None;
    let mut g_level = generated.clone();
    let mut t_level = target.clone();
    for level in 0..3 {
        if level > 0 {
            g_level = g_level.avg_pool2()?;
            t_level = t_level.avg_pool2()?;
        }
        let mut term = mean_abs_diff(&g_level, &t_level)?;
        for (gf, tf) in phi.features(&g_level)?.iter().zip(phi.features(&t_level)?) {
            term = term.add(&mean_abs_diff(gf, &tf)?)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("three levels"))
}

/// Keypoint equivariance: detect on Z and on the warp of Z whose content
/// moves by T, then sum per-part L1 distances between T(detect(Z)) and
/// detect(T(Z)). The detector returns [K,2] keypoints.
pub fn equivariance_loss<D>(detector: D, z: &Tensor, t: &AffineTransform2D) -> Result<Tensor>
where
    D: Fn(&Tensor) -> Result<Tensor>,
{
    let kp_z = detector(z)?;
    // Inverse warp moves content by T, so detected keypoints should land on
    // T applied to the original detections.
    let warped = warp_image_by_affine(z, &t.inverse()?)?;
    let kp_tz = detector(&warped)?;

    let a_t = Tensor::from_vec(
        vec![t.a[0][0], t.a[1][0], t.a[0][1], t.a[1][1]],
        &[2, 2],
    )?;
    let b = Tensor::from_vec(vec![t.b[0], t.b[1]], &[2])?;
    let mapped = kp_z.matmul(&a_t)?.add_row_bias(&b)?;
    Ok(mapped.sub(&kp_tz)?.abs().sum_all())
}

/// Pushes the background mask toward 1 and each foreground mask toward 0,
/// using per-mask means over pixels.
pub fn mask_loss(masks: &Tensor) -> Result<Tensor> {
    let (k1, h, w) = match masks.shape() {
        [k1, h, w] if *k1 >= 2 => (*k1, *h, *w),
        s => {
            return Err(Error::dim("mask_loss", format!("expected [K+1,h,w] masks, got {s:?}")));
        }
    };
    let px = (h * w) as f64;
    let bg = masks.narrow(0, 0, 1)?.add_scalar(-1.0).abs().mean_all();
    let fg = masks.narrow(0, 1, k1 - 1)?.abs().sum_all().mul_scalar(1.0 / px);
    bg.add(&fg)
}

/// Mask-weighted mean squared distance to each mask's own centroid, summed
/// over parts. Fused op: the centroid is the argmin of the weighted spread,
/// so its sensitivity to the mask vanishes and the per-pixel gradient is
/// (dist² − loss_k)/mass_k.
pub fn concentration_loss(fg_masks: &Tensor) -> Result<Tensor> {
    let (k, h, w) = match fg_masks.shape() {
        [k, h, w] => (*k, *h, *w),
        s => {
            return Err(Error::dim(
                "concentration_loss",
                format!("expected [K,h,w] masks, got {s:?}"),
            ));
        }
    };
    let m = fg_masks.data();
    let hw = h * w;
    let coord = |i: usize, j: usize| (axis_coord(j, w), axis_coord(i, h));

    let mut total = 0.0;
    let mut per_part = Vec::with_capacity(k);
    for p in 0..k {
        let part = &m[p * hw..(p + 1) * hw];
        let mass: f64 = part.iter().sum();
        if mass <= CONCENTRATION_EPS {
            per_part.push(None);
            continue;
        }
        let (mut ux, mut uy) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let (x, y) = coord(i, j);
                ux += part[i * w + j] * x;
                uy += part[i * w + j] * y;
            }
        }
        ux /= mass;
        uy /= mass;
        let mut spread = 0.0;
        for i in 0..h {
            for j in 0..w {
                let (x, y) = coord(i, j);
                let d2 = (x - ux) * (x - ux) + (y - uy) * (y - uy);
                spread += part[i * w + j] * d2;
            }
        }
        let loss_k = spread / mass;
        total += loss_k;
        per_part.push(Some((ux, uy, mass, loss_k)));
    }

    let pa = fg_masks.clone();
    Ok(Tensor::from_op(vec![1], vec![total], &[fg_masks], move |g| {
        let s = g[0];
        pa.grad_mut(|buf| {
            for (p, info) in per_part.iter().enumerate() {
                let Some((ux, uy, mass, loss_k)) = info else { continue };
                for i in 0..h {
                    for j in 0..w {
                        let x = axis_coord(j, w);
                        let y = axis_coord(i, h);
                        let d2 = (x - ux) * (x - ux) + (y - uy) * (y - uy);
                        buf[p * hw + i * w + j] += s * (d2 - loss_k) / mass;
                    }
                }
            }
        });
    }))
}

/// Per-term loss values in plain numbers, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub perceptual: f64,
    pub equivariance: f64,
    pub mask: f64,
    pub concentration: f64,
    pub total: f64,
    pub lambda: f64,
}

/// total = perceptual + equivariance + λ(mask + concentration); the weighted
/// pair is dropped entirely when background handling is off.
pub fn total_loss(
    perceptual: &Tensor,
    equivariance: &Tensor,
    background_terms: Option<(&Tensor, &Tensor)>,
    lambda: f64,
) -> Result<(Tensor, LossReport)> {
    let base = perceptual.add(equivariance)?;
    let (total, mask_v, con_v, lam) = match background_terms {
        Some((mask, con)) => (
            base.add(&mask.add(con)?.mul_scalar(lambda))?,
            mask.item(),
            con.item(),
            lambda,
        ),
        None => (base, 0.0, 0.0, 0.0),
    };
    let report = LossReport {
        perceptual: perceptual.item(),
        equivariance: equivariance.item(),
        mask: mask_v,
        concentration: con_v,
        total: total.item(),
        lambda: lam,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_geometric_transform, TransformRanges};

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_vec((0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(), &[3, h, w])
            .unwrap()
    }

    #[test]
    fn perceptual_loss_zero_on_equal_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi = PerceptualNet::new(1234);
        let a = rand_image(&mut rng, 16, 16);
        let b = rand_image(&mut rng, 16, 16);
        assert_eq!(perceptual_loss(&phi, &a, &a).unwrap().item(), 0.0);
        let ab = perceptual_loss(&phi, &a, &b).unwrap().item();
        let ba = perceptual_loss(&phi, &b, &a).unwrap().item();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn constant_offset_pixel_term_is_the_offset() {
        // With identical (zero) feature weights the conv layers contribute
        // equally... instead isolate layer 0 by comparing against the known
        // pyramid sum: each of the 3 levels adds a mean-abs of exactly 0.25.
        let phi = PerceptualNet { layers: Vec::new(), seed: 0 };
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let b = Tensor::full(&[3, 8, 8], 0.25);
        let loss = perceptual_loss(&phi, &a, &b).unwrap().item();
        assert!((loss - 3.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn perceptual_net_is_reproducible_from_seed() {
        let a = PerceptualNet::new(42);
        let b = PerceptualNet::new(42);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weights, lb.weights);
            assert_eq!((la.cout, la.cin, la.stride), (lb.cout, lb.cin, lb.stride));
        }
    }

    #[test]
    fn equivariant_oracle_detector_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_image(&mut rng, 12, 12);
        let kp0 = [[0.2, -0.3], [-0.5, 0.4]];
        for _ in 0..100 {
            let t = random_geometric_transform(&mut rng, &TransformRanges::default());
            let z_data = z.to_vec();
            let detector = |img: &Tensor| -> Result<Tensor> {
                let same = img.to_vec() == z_data;
                let pts: Vec<f64> = kp0
                    .iter()
                    .map(|&p| if same { p } else { t.apply(p) })
                    .flatten()
                    .collect();
                Tensor::from_vec(pts, &[2, 2])
            };
            let loss = equivariance_loss(detector, &z, &t).unwrap().item();
            assert!(loss.abs() < 1e-12, "transform leaked error {loss}");
        }
    }

    #[test]
    fn single_part_offset_detector_scores_the_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_image(&mut rng, 12, 12);
        let t = random_geometric_transform(&mut rng, &TransformRanges::default());
        let z_data = z.to_vec();
        let kp = [0.1, 0.2];
        let detector = |img: &Tensor| -> Result<Tensor> {
            let p = if img.to_vec() == z_data {
                kp
            } else {
                let q = t.apply(kp);
                [q[0] + 0.1, q[1]]
            };
            Tensor::from_vec(p.to_vec(), &[1, 2])
        };
        let loss = equivariance_loss(detector, &z, &t).unwrap().item();
        assert!((loss - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identity_transform_scores_zero_for_a_pixel_detector() {
        // Intensity centroid of channel 0: deterministic and pixel-driven.
        let detector = |img: &Tensor| -> Result<Tensor> {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let v = img.to_vec();
            let mut mass = 0.0;
            let (mut cx, mut cy) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let p = v[i * w + j];
                    mass += p;
                    cx += p * axis_coord(j, w);
                    cy += p * axis_coord(i, h);
                }
            }
            Tensor::from_vec(vec![cx / mass, cy / mass], &[1, 2])
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_image(&mut rng, 10, 10);
        let loss = equivariance_loss(detector, &z, &AffineTransform2D::IDENTITY).unwrap().item();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn mask_loss_examples() {
        let h = 4;
        let w = 4;
        // Perfect split: background 1, foreground 0.
        let mut data = vec![0.0; 2 * h * w];
        data[..h * w].iter_mut().for_each(|v| *v = 1.0);
        let perfect = Tensor::from_vec(data, &[2, h, w]).unwrap();
        assert_eq!(mask_loss(&perfect).unwrap().item(), 0.0);

        // Inverted split with K=1: both terms are 1.
        let mut data = vec![0.0; 2 * h * w];
        data[h * w..].iter_mut().for_each(|v| *v = 1.0);
        let inverted = Tensor::from_vec(data, &[2, h, w]).unwrap();
        assert_eq!(mask_loss(&inverted).unwrap().item(), 2.0);

        // Uniform masks: K/(K+1) + K/(K+1).
        for k in 1..5usize {
            let u = Tensor::full(&[k + 1, h, w], 1.0 / (k + 1) as f64);
            let expect = 2.0 * k as f64 / (k + 1) as f64;
            assert!((mask_loss(&u).unwrap().item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn concentration_loss_examples() {
        // Single-pixel mass has zero spread.
        let mut one = vec![0.0; 16];
        one[5] = 1.0;
        let t = Tensor::from_vec(one, &[1, 4, 4]).unwrap();
        let c = concentration_loss(&t).unwrap();
        // Same [1] shape as every other reduction, so loss terms compose.
        assert_eq!(c.shape(), &[1]);
        assert_eq!(c.item(), 0.0);

        // Uniform 2x2 at corner coords {-1,1}²: every point at squared
        // distance 2 from the centroid.
        let u = Tensor::full(&[1, 2, 2], 0.25);
        assert!((concentration_loss(&u).unwrap().item() - 2.0).abs() < 1e-12);

        // Positive scaling leaves the normalized spread unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = Tensor::from_vec(data.clone(), &[1, 6, 6]).unwrap();
        let b = Tensor::from_vec(data.iter().map(|v| v * 3.7).collect(), &[1, 6, 6]).unwrap();
        let (la, lb) = (concentration_loss(&a).unwrap().item(), concentration_loss(&b).unwrap().item());
        assert!((la - lb).abs() < 1e-12);

        // Empty mask contributes nothing.
        let z = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(concentration_loss(&z).unwrap().item(), 0.0);
    }

    #[test]
    fn concentration_loss_is_translation_covariant() {
        // A compact blob moved by whole pixels keeps its spread.
        let (h, w) = (9, 9);
        let blob = |oy: usize, ox: usize| -> Tensor {
            let mut d = vec![0.0; h * w];
            for di in 0..3 {
                for dj in 0..3 {
                    d[(oy + di) * w + ox + dj] = 1.0 + (di * 3 + dj) as f64 * 0.1;
                }
            }
            Tensor::from_vec(d, &[1, h, w]).unwrap()
        };
        let base = concentration_loss(&blob(1, 1)).unwrap().item();
        for &(oy, ox) in &[(1usize, 5usize), (5, 1), (4, 4), (0, 0)] {
            let moved = concentration_loss(&blob(oy, ox)).unwrap().item();
            assert!((base - moved).abs() < 1e-9);
        }
    }

    #[test]
    fn concentration_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(0.05..1.0)).collect();
        let t = Tensor::param(data.clone(), &[2, 4, 4]).unwrap();
        concentration_loss(&t).unwrap().backward().unwrap();
        let grad = t.grad().unwrap();
        let f = |d: &[f64]| {
            concentration_loss(&Tensor::from_vec(d.to_vec(), &[2, 4, 4]).unwrap())
                .unwrap()
                .item()
        };
        let eps = 1e-6;
        for i in [0usize, 5, 13, 20, 31] {
            let mut hi = data.clone();
            let mut lo = data.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let num = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!(
                (grad[i] - num).abs() <= 1e-6 * grad[i].abs().max(num.abs()) + 1e-8,
                "idx {i}: {} vs {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn mask_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(0.05..0.95)).collect();
        let t = Tensor::param(data.clone(), &[3, 4, 4]).unwrap();
        mask_loss(&t).unwrap().backward().unwrap();
        let grad = t.grad().unwrap();
        let f = |d: &[f64]| {
            mask_loss(&Tensor::from_vec(d.to_vec(), &[3, 4, 4]).unwrap()).unwrap().item()
        };
        let eps = 1e-6;
        for i in [0usize, 10, 20, 40] {
            let mut hi = data.clone();
            let mut lo = data.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let num = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((grad[i] - num).abs() < 1e-7, "idx {i}: {} vs {num}", grad[i]);
        }
    }

    #[test]
    fn total_loss_arithmetic_and_gating() {
        let per = Tensor::scalar(1.0);
        let equi = Tensor::scalar(2.0);
        let mask = Tensor::scalar(3.0);
        let con = Tensor::scalar(4.0);
        let (t, r) = total_loss(&per, &equi, Some((&mask, &con)), 0.1).unwrap();
        assert!((t.item() - 3.7).abs() < 1e-12);
        assert!((r.total - (r.perceptual + r.equivariance + r.lambda * (r.mask + r.concentration))).abs() < 1e-12);

        let (t2, r2) = total_loss(&per, &equi, None, 0.1).unwrap();
        assert_eq!(t2.item(), 3.0);
        assert_eq!(r2.lambda, 0.0);
        assert_eq!(r2.mask, 0.0);

        let zero = Tensor::scalar(0.0);
        let (t3, _) = total_loss(&zero, &zero, Some((&zero, &zero)), 0.1).unwrap();
        assert_eq!(t3.item(), 0.0);
    }
}
