//! Encoder-decoder generator: source features are bilinear-warped by the
//! dense flow and gated by the occlusion map at every scale (bottleneck and
//! skips), then decoded to an RGB frame through a final sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dense_motion::DenseMotion;
use crate::encoder::{ConvParams, ResBlock};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{Graph, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub stages: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { base_channels: 32, stages: 2, res_blocks: 3 }
    }
}

pub struct Generator {
    enc_in: ConvParams,
    down: Vec<ConvParams>,
    res: Vec<ResBlock>,
    up: Vec<ConvParams>,
    out: ConvParams,
    cfg: GeneratorConfig,
}

/// Resizes a [h,w,2] flow field bilinearly. Align-corner interpolation keeps
/// linear ramps linear, so identity flows stay identity at every scale.
fn resize_flow(flow: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    if flow.shape()[..2] == [oh, ow] {
        return Ok(flow.clone());
    }
    flow.hwc_to_chw()?.upsample_bilinear(oh, ow)?.chw_to_hwc()
}

fn resize_gate(occ: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    if occ.shape()[1..] == [oh, ow] {
        return Ok(occ.clone());
    }
    occ.upsample_bilinear(oh, ow)
}

/// Warp features by the flow resized to their scale, then gate by occlusion.
fn warp_and_gate(feat: &Tensor, dm: &DenseMotion) -> Result<Tensor> {
    let (h, w) = (feat.shape()[1], feat.shape()[2]);
    let flow = resize_flow(&dm.flow, h, w)?;
    let occ = resize_gate(&dm.occlusion, h, w)?;
    feat.bilinear_sample(&flow)?.mul_channelwise(&occ)
}

impl Generator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: GeneratorConfig) -> Generator {
        let b = cfg.base_channels;
        let enc_in = ConvParams::new(store, rng, "generator.enc_in", b, 3, 3);
        let down = (0..cfg.stages)
            .map(|i| {
                ConvParams::new(store, rng, &format!("generator.down{i}"), b << (i + 1), b << i, 3)
            })
            .collect();
        let mid = b << cfg.stages;
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, rng, &format!("generator.res{i}"), mid))
            .collect();
        let up = (0..cfg.stages)
            .rev()
            .map(|i| {
                ConvParams::new(store, rng, &format!("generator.up{i}"), b << i, b << (i + 1), 3)
            })
            .collect();
        let out = ConvParams::new(store, rng, "generator.out", 3, b, 3);
        Generator { enc_in, down, res, up, out, cfg }
    }

    /// Inverse-warps the source by `dm` and decodes; `None` skips warping
    /// entirely (plain autoencoder path).
    pub fn generate(&self, g: &Graph, source: &Tensor, dm: Option<&DenseMotion>) -> Result<Tensor> {
        let (h, w) = match source.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::dim("generate", format!("expected [3,H,W] source, got {s:?}"))),
        };
        if h % (1 << self.cfg.stages) != 0 || w % (1 << self.cfg.stages) != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} must be divisible by {}",
                1 << self.cfg.stages
            )));
        }

        let mut skips = Vec::with_capacity(self.cfg.stages);
        let mut x = self.enc_in.apply(g, source, 1, 1)?.relu();
        for conv in &self.down {
            skips.push(x.clone());
            x = conv.apply(g, &x, 2, 1)?.relu();
        }

        if let Some(dm) = dm {
            x = warp_and_gate(&x, dm)?;
        }
        for block in &self.res {
            x = block.apply(g, &x)?;
        }

        for (conv, skip) in self.up.iter().zip(skips.iter().rev()) {
            let (sh, sw) = (skip.shape()[1], skip.shape()[2]);
            x = conv.apply(g, &x.upsample_bilinear(sh, sw)?, 1, 1)?;
            let skip = match dm {
                Some(dm) => warp_and_gate(skip, dm)?,
                None => skip.clone(),
            };
            x = x.add(&skip)?.relu();
        }
        Ok(self.out.apply(g, &x, 1, 1)?.sigmoid())
    }
}
