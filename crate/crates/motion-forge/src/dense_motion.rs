//! Assembles per-part flows into one dense backward flow: a small U-Net
//! predicts K+1 soft masks (index 0 = background) and an occlusion gate
//! from part-warped copies of the source plus keypoint heatmap differences.

use rand::Rng;

use crate::encoder::ConvParams;
use crate::error::{Error, Result};
use crate::geometry::identity_grid;
use crate::motion::{mask_weighted_flow_sum, part_flows, MotionSet};
use crate::numerics::{concat, gaussian_heatmaps, Tensor};
use crate::params::{Graph, Init, ParamId, ParamStore};

/// Default keypoint heatmap width in normalized coordinates.
pub const HEATMAP_SIGMA: f64 = 0.1;

/// Flow is predicted at 1/FLOW_SCALE of the image resolution.
pub const FLOW_SCALE: usize = 4;

/// Dense motion at flow resolution: a backward flow field, the soft part
/// masks that produced it, and an occlusion gate in (0,1).
pub struct DenseMotion {
    /// [h,w,2] sampling locations in normalized coordinates.
    pub flow: Tensor,
    /// [K+1,h,w], rows 1..=K are parts, row 0 is background; sums to 1.
    pub masks: Tensor,
    /// [1,h,w].
    pub occlusion: Tensor,
}

/// Three-scale U-Net over the stacked warp/heatmap input emitting K+1 mask
/// logits and one occlusion logit.
pub struct DenseMotionNet {
    enc1: ConvParams,
    enc2: ConvParams,
    mid: ConvParams,
    dec2: ConvParams,
    dec1: ConvParams,
    head: ConvParams,
    pub k: usize,
}

/// Channel count of the stacked mask-predictor input.
pub fn mask_input_channels(k: usize) -> usize {
    (k + 1) * 3 + k
}

impl DenseMotionNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, k: usize, base: usize) -> DenseMotionNet {
        let cin = mask_input_channels(k);
        DenseMotionNet {
            enc1: ConvParams::new(store, rng, "mask_net.enc1", base, cin, 3),
            enc2: ConvParams::new(store, rng, "mask_net.enc2", base * 2, base, 3),
            mid: ConvParams::new(store, rng, "mask_net.mid", base * 4, base * 2, 3),
            dec2: ConvParams::new(store, rng, "mask_net.dec2", base * 2, base * 6, 3),
            dec1: ConvParams::new(store, rng, "mask_net.dec1", base, base * 3, 3),
            head: ConvParams::new(store, rng, "mask_net.head", k + 2, base, 3),
            k,
        }
    }

    /// K+1 candidate flows at flow resolution: row 0 is the background flow
    /// (identity grid unless `bg_params` supplies an affine), rows 1..=K the
    /// first-order part flows.
    pub fn candidate_flows(
        &self,
        src_params: &Tensor,
        drv_params: &Tensor,
        bg_params: Option<&Tensor>,
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let grid = identity_grid(h, w);
        let bg = match bg_params {
            // T(c) = A·c + t is the first-order flow against an identity
            // driving motion, so reuse the part-flow kernel.
            Some(p) => {
                let p = p.reshape(&[1, 6])?;
                let ident = MotionSet::identity(1).params_tensor();
                part_flows(&p, &ident, &grid)?
            }
            None => grid.reshape(&[1, h, w, 2])?,
        };
        let parts = part_flows(src_params, drv_params, &grid)?;
        concat(&[&bg, &parts], 0)
    }

    /// Stacks K+1 flow-warped copies of the low-resolution source with the
    /// K driving-minus-source keypoint heatmaps.
    pub fn assemble_input(
        &self,
        source_small: &Tensor,
        flows: &Tensor,
        src_params: &Tensor,
        drv_params: &Tensor,
    ) -> Result<Tensor> {
        let (h, w) = match flows.shape() {
            [p, h, w, 2] if *p == self.k + 1 => (*h, *w),
            s => {
                return Err(Error::dim(
                    "assemble_input",
                    format!("expected [{}+1,h,w,2] flows, got {s:?}", self.k),
                ));
            }
        };
        let mut channels = Vec::with_capacity(self.k + 2);
        for p in 0..self.k + 1 {
            let flow = flows.narrow(0, p, 1)?.reshape(&[h, w, 2])?;
            channels.push(source_small.bilinear_sample(&flow)?);
        }
        let src_kp = src_params.narrow(1, 4, 2)?;
        let drv_kp = drv_params.narrow(1, 4, 2)?;
        let diff = gaussian_heatmaps(&drv_kp, h, w, HEATMAP_SIGMA)?
            .sub(&gaussian_heatmaps(&src_kp, h, w, HEATMAP_SIGMA)?)?;
        channels.push(diff);
        let refs: Vec<&Tensor> = channels.iter().collect();
        concat(&refs, 0)
    }

    /// U-Net forward: softmaxed masks [K+1,h,w] and sigmoid occlusion [1,h,w].
    pub fn predict(&self, g: &Graph, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, w) = match input.shape() {
            [c, h, w] if *c == mask_input_channels(self.k) => (*h, *w),
            s => {
                return Err(Error::dim(
                    "predict_masks",
                    format!("expected [{},h,w] input, got {s:?}", mask_input_channels(self.k)),
                ));
            }
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "mask net input {h}x{w} must be divisible by 4"
            )));
        }
        let e1 = self.enc1.apply(g, input, 1, 1)?.relu();
        let e2 = self.enc2.apply(g, &e1.avg_pool2()?, 1, 1)?.relu();
        let m = self.mid.apply(g, &e2.avg_pool2()?, 1, 1)?.relu();
        let d2 = self
            .dec2
            .apply(g, &concat(&[&m.upsample_bilinear(h / 2, w / 2)?, &e2], 0)?, 1, 1)?
            .relu();
        let d1 = self
            .dec1
            .apply(g, &concat(&[&d2.upsample_bilinear(h, w)?, &e1], 0)?, 1, 1)?
            .relu();
        let logits = self.head.apply(g, &d1, 1, 1)?;
        let masks = logits.narrow(0, 0, self.k + 1)?.softmax(0)?;
        let occlusion = logits.narrow(0, self.k + 1, 1)?.sigmoid();
        Ok((masks, occlusion))
    }

    /// Full pipeline at flow resolution: candidate flows → warped input →
    /// masks/occlusion → mask-weighted flow mixture.
    pub fn build(
        &self,
        g: &Graph,
        source: &Tensor,
        src_params: &Tensor,
        drv_params: &Tensor,
        bg_params: Option<&Tensor>,
    ) -> Result<DenseMotion> {
        let (hi, wi) = match source.shape() {
            [_, h, w] => (*h, *w),
            s => {
                return Err(Error::dim("build_dense_motion", format!("expected [C,H,W] source, got {s:?}")));
            }
        };
        if hi % (FLOW_SCALE * 4) != 0 || wi % (FLOW_SCALE * 4) != 0 {
            return Err(Error::Config(format!(
                "image {hi}x{wi} must be divisible by {}",
                FLOW_SCALE * 4
            )));
        }
        let (h, w) = (hi / FLOW_SCALE, wi / FLOW_SCALE);
        let small = source.avg_pool2()?.avg_pool2()?;
        let flows = self.candidate_flows(src_params, drv_params, bg_params, h, w)?;
        let input = self.assemble_input(&small, &flows, src_params, drv_params)?;
        let (masks, occlusion) = self.predict(g, &input)?;
        let flow = mask_weighted_flow_sum(&masks, &flows)?;
        Ok(DenseMotion { flow, masks, occlusion })
    }
}

/// CNN regressing the background affine from the stacked frame pair;
/// zero-init head with identity bias starts at the identity transform.
pub struct BackgroundNet {
    conv1: ConvParams,
    conv2: ConvParams,
    conv3: ConvParams,
    head_w: ParamId,
    head_b: ParamId,
    feat: usize,
}

impl BackgroundNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, base: usize) -> BackgroundNet {
        let feat = base * 4;
        BackgroundNet {
            conv1: ConvParams::new(store, rng, "background_net.conv1", base, 6, 3),
            conv2: ConvParams::new(store, rng, "background_net.conv2", base * 2, base, 3),
            conv3: ConvParams::new(store, rng, "background_net.conv3", feat, base * 2, 3),
            head_w: store.add_init("background_net.head.weight", &[feat, 6], Init::Zeros, rng),
            head_b: store.add(
                "background_net.head.bias",
                &[6],
                vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            ),
            feat,
        }
    }

    /// [6] background affine parameters [a11,a12,a21,a22,tx,ty].
    pub fn predict(&self, g: &Graph, source: &Tensor, driving: &Tensor) -> Result<Tensor> {
        if source.shape() != driving.shape() {
            return Err(Error::dim(
                "predict_background",
                format!("frame shapes {:?} vs {:?}", source.shape(), driving.shape()),
            ));
        }
        let x = concat(&[source, driving], 0)?;
        let x = self.conv1.apply(g, &x, 2, 1)?.relu();
        let x = self.conv2.apply(g, &x, 2, 1)?.relu();
        let x = self.conv3.apply(g, &x, 2, 1)?.relu();
        let hw = x.shape()[1] * x.shape()[2];
        // Global average pool via a constant averaging matmul.
        let pooled = x
            .reshape(&[self.feat, hw])?
            .matmul(&Tensor::full(&[hw, 1], 1.0 / hw as f64))?
            .reshape(&[1, self.feat])?;
        pooled
            .matmul(&g.leaf(self.head_w))?
            .add_row_bias(&g.leaf(self.head_b))?
            .reshape(&[6])
    }
}
