//! First-order motion representation: per-part flows, mask-weighted dense
//! flow, and source↔driving motion transfer.
//!
//! A part's motion is a keypoint t (normalized coords) plus a 2×2 local
//! affine A taken relative to a latent reference pose. The flow warping a
//! source toward a driving frame is, per part,
//!     T(c) = t_src + A_src · A_drv⁻¹ · (c − t_drv),
//! and the dense flow mixes the per-part flows with (K+1) masks where
//! index 0 is the background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{invert_affine, AffineTransform2D};
use crate::numerics::{concat, Tensor};

/// Motion of one part. Parameter-vector layout everywhere in this crate:
/// [a11, a12, a21, a22, tx, ty].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartMotion {
    pub t: [f64; 2],
    #[serde(rename = "A")]
    pub a: [[f64; 2]; 2],
}

impl PartMotion {
    pub const IDENTITY: PartMotion = PartMotion { t: [0.0, 0.0], a: [[1.0, 0.0], [0.0, 1.0]] };

    pub fn params(&self) -> [f64; 6] {
        [self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1], self.t[0], self.t[1]]
    }

    pub fn from_params(p: &[f64]) -> PartMotion {
        PartMotion { a: [[p[0], p[1]], [p[2], p[3]]], t: [p[4], p[5]] }
    }
}

/// All part motions of one frame plus the optional background transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSet {
    pub parts: Vec<PartMotion>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub background: Option<BackgroundMotion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMotion {
    #[serde(rename = "A")]
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl MotionSet {
    pub fn identity(k: usize) -> MotionSet {
        MotionSet { parts: vec![PartMotion::IDENTITY; k], background: None }
    }

    /// Row-major [K,6] parameter tensor.
    pub fn params_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.parts.iter().flat_map(|p| p.params()).collect();
        Tensor::from_vec(data, &[self.parts.len(), 6]).expect("K×6 by construction")
    }

    pub fn from_params_tensor(params: &Tensor, background: Option<BackgroundMotion>) -> Result<MotionSet> {
        let k = match params.shape() {
            [k, 6] => *k,
            s => return Err(Error::dim("motion_set", format!("params must be [K,6], got {s:?}"))),
        };
        let d = params.data();
        let parts = (0..k).map(|i| PartMotion::from_params(&d[i * 6..(i + 1) * 6])).collect();
        Ok(MotionSet { parts, background })
    }
}

/// Animation transfer mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    /// Use the driving motion directly against the source image.
    Absolute,
    /// Move the source motion by the driving's change from its first frame.
    Relative,
}

/// Per-part flows for all K parts: output [K,h,w,2] over the grid's
/// coordinates. Differentiable w.r.t. both [K,6] parameter tensors; the grid
/// supplies constant sampling locations.
pub fn part_flows(src: &Tensor, drv: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let k = match (src.shape(), drv.shape()) {
        ([k, 6], [k2, 6]) if k == k2 => *k,
        (a, b) => {
            return Err(Error::dim(
                "part_flows",
                format!("parameter tensors must both be [K,6], got {a:?} and {b:?}"),
            ));
        }
    };
    let (h, w) = match grid.shape() {
        [h, w, 2] => (*h, *w),
        s => return Err(Error::dim("part_flows", format!("grid must be [h,w,2], got {s:?}"))),
    };
    let n = h * w;
    let g = grid.to_vec();
    let sp = src.data();
    let dp = drv.data();

    // Per part: B = A_src · A_drv⁻¹, flow(c) = t_src + B (c − t_drv).
    let mut inv_cache = Vec::with_capacity(k); // A_drv⁻¹ per part
    for ki in 0..k {
        let a = &dp[ki * 6..ki * 6 + 4];
        inv_cache.push(invert2(a)?);
    }
    let mut data = vec![0.0; k * n * 2];
    for ki in 0..k {
        let a_s = &sp[ki * 6..ki * 6 + 4];
        let (tsx, tsy) = (sp[ki * 6 + 4], sp[ki * 6 + 5]);
        let (tdx, tdy) = (dp[ki * 6 + 4], dp[ki * 6 + 5]);
        let b = mul2(a_s, &inv_cache[ki]);
        let out = &mut data[ki * n * 2..(ki + 1) * n * 2];
        for p in 0..n {
            let dx = g[p * 2] - tdx;
            let dy = g[p * 2 + 1] - tdy;
            out[p * 2] = tsx + b[0] * dx + b[1] * dy;
            out[p * 2 + 1] = tsy + b[2] * dx + b[3] * dy;
        }
    }

    let (ps, pd, grid_data) = (src.clone(), drv.clone(), g);
    Ok(Tensor::from_op(vec![k, h, w, 2], data, &[src, drv], move |go| {
        let sp = ps.data();
        let dp = pd.data();
        for ki in 0..k {
            let a_s = &sp[ki * 6..ki * 6 + 4];
            let (tdx, tdy) = (dp[ki * 6 + 4], dp[ki * 6 + 5]);
            let c = invert2(&dp[ki * 6..ki * 6 + 4]).expect("checked in forward");
            let b = mul2(a_s, &c);
            let g_part = &go[ki * n * 2..(ki + 1) * n * 2];

            // Accumulate Σ g and Σ g ⊗ (c − t_drv) over pixels.
            let mut g1 = [0.0; 2];
            let mut gc = [0.0; 4];
            for p in 0..n {
                let dx = grid_data[p * 2] - tdx;
                let dy = grid_data[p * 2 + 1] - tdy;
                let (gx, gy) = (g_part[p * 2], g_part[p * 2 + 1]);
                g1[0] += gx;
                g1[1] += gy;
                gc[0] += gx * dx;
                gc[1] += gx * dy;
                gc[2] += gy * dx;
                gc[3] += gy * dy;
            }
            ps.grad_mut(|buf| {
                // d/dA_src = dB · Cᵀ ; d/dt_src = Σ g.
                let da = mul2(&gc, &transpose2(&c));
                for i in 0..4 {
                    buf[ki * 6 + i] += da[i];
                }
                buf[ki * 6 + 4] += g1[0];
                buf[ki * 6 + 5] += g1[1];
            });
            pd.grad_mut(|buf| {
                // d/dC = A_srcᵀ · dB ; d/dA_drv = −Cᵀ · dC · Cᵀ ;
                // d/dt_drv = −Bᵀ · Σ g.
                let dc = mul2(&transpose2(a_s), &gc);
                let ct = transpose2(&c);
                let da = mul2(&mul2(&ct, &dc), &ct);
                for i in 0..4 {
                    buf[ki * 6 + i] -= da[i];
                }
                buf[ki * 6 + 4] -= b[0] * g1[0] + b[2] * g1[1];
                buf[ki * 6 + 5] -= b[1] * g1[0] + b[3] * g1[1];
            });
        }
    }))
}

/// Flow for one part as [h,w,2].
pub fn part_flow(src: &PartMotion, drv: &PartMotion, grid: &Tensor) -> Result<Tensor> {
    let s = Tensor::from_vec(src.params().to_vec(), &[1, 6])?;
    let d = Tensor::from_vec(drv.params().to_vec(), &[1, 6])?;
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    part_flows(&s, &d, grid)?.reshape(&[h, w, 2])
}

/// Mask-weighted mixture: out(c) = Σ_p M_p(c) · F_p(c) with masks [P,h,w]
/// and flows [P,h,w,2]. Differentiable in both.
pub fn mask_weighted_flow_sum(masks: &Tensor, flows: &Tensor) -> Result<Tensor> {
    let (p, h, w) = match masks.shape() {
        [p, h, w] => (*p, *h, *w),
        s => {
            return Err(Error::dim(
                "mask_weighted_flow_sum",
                format!("masks must be [P,h,w], got {s:?}"),
            ));
        }
    };
    if flows.shape() != [p, h, w, 2] {
        return Err(Error::dim(
            "mask_weighted_flow_sum",
            format!("flows {:?} do not match masks {:?}", flows.shape(), masks.shape()),
        ));
    }
    let n = h * w;
    let m = masks.data();
    let f = flows.data();
    let mut data = vec![0.0; n * 2];
    for pi in 0..p {
        for c in 0..n {
            let mv = m[pi * n + c];
            data[c * 2] += mv * f[(pi * n + c) * 2];
            data[c * 2 + 1] += mv * f[(pi * n + c) * 2 + 1];
        }
    }
    let (pm, pf) = (masks.clone(), flows.clone());
    Ok(Tensor::from_op(vec![h, w, 2], data, &[masks, flows], move |g| {
        pm.grad_mut(|buf| {
            let f = pf.data();
            for pi in 0..p {
                for c in 0..n {
                    buf[pi * n + c] +=
                        g[c * 2] * f[(pi * n + c) * 2] + g[c * 2 + 1] * f[(pi * n + c) * 2 + 1];
                }
            }
        });
        pf.grad_mut(|buf| {
            let m = pm.data();
            for pi in 0..p {
                for c in 0..n {
                    buf[(pi * n + c) * 2] += m[pi * n + c] * g[c * 2];
                    buf[(pi * n + c) * 2 + 1] += m[pi * n + c] * g[c * 2 + 1];
                }
            }
        });
    }))
}

/// Assembles K per-part flow fields, a background flow, and K+1 masks
/// (index 0 = background) into the dense flow.
pub fn dense_flow(parts: &[Tensor], background_flow: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (h, w) = match background_flow.shape() {
        [h, w, 2] => (*h, *w),
        s => return Err(Error::dim("dense_flow", format!("flow fields must be [h,w,2], got {s:?}"))),
    };
    let bg = background_flow.reshape(&[1, h, w, 2])?;
    let mut stacked: Vec<Tensor> = vec![bg];
    for p in parts {
        stacked.push(p.reshape(&[1, h, w, 2])?);
    }
    let refs: Vec<&Tensor> = stacked.iter().collect();
    let flows = concat(&refs, 0)?;
    mask_weighted_flow_sum(masks, &flows)
}

/// Combines source/driving motion for animation.
pub fn transfer_motion(
    source: &MotionSet,
    driving: &MotionSet,
    driving_initial: Option<&MotionSet>,
    mode: TransferMode,
) -> Result<MotionSet> {
    match mode {
        TransferMode::Absolute => Ok(driving.clone()),
        TransferMode::Relative => {
            let init = driving_initial.ok_or_else(|| {
                Error::Config("relative transfer requires the driving video's first frame motion".into())
            })?;
            if source.parts.len() != driving.parts.len()
                || source.parts.len() != init.parts.len()
            {
                return Err(Error::dim(
                    "transfer_motion",
                    format!(
                        "part counts differ: source {}, driving {}, initial {}",
                        source.parts.len(),
                        driving.parts.len(),
                        init.parts.len()
                    ),
                ));
            }
            let parts = source
                .parts
                .iter()
                .zip(&driving.parts)
                .zip(&init.parts)
                .map(|((s, d), d0)| {
                    let inv0 = invert_affine(d0.a)?;
                    let a = mat_mul(&d.a, &mat_mul(&inv0, &s.a));
                    Ok(PartMotion {
                        t: [s.t[0] + d.t[0] - d0.t[0], s.t[1] + d.t[1] - d0.t[1]],
                        a,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MotionSet { parts, background: driving.background })
        }
    }
}

/// Background affine as a flow-producing motion: T(c) = A·c + b.
pub fn background_to_part(bg: &AffineTransform2D) -> PartMotion {
    PartMotion { t: bg.b, a: bg.a }
}

fn invert2(a: &[f64]) -> Result<[f64; 4]> {
    let inv = invert_affine([[a[0], a[1]], [a[2], a[3]]])?;
    Ok([inv[0][0], inv[0][1], inv[1][0], inv[1][1]])
}

fn mul2(a: &[f64], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn transpose2(a: &[f64]) -> [f64; 4] {
    [a[0], a[2], a[1], a[3]]
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
