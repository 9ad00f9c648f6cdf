//! Image-token pathway: stem CNN (×4 downsample), 4×4 patchification,
//! linear projection to the token dimension, and 2-D sine positional
//! encoding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{Graph, Init, ParamId, ParamStore};

/// Projected patch tokens plus their lattice geometry.
pub struct ImageTokens {
    /// [N, d] token matrix.
    pub tokens: Tensor,
    pub rows: usize,
    pub cols: usize,
}

pub(crate) struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvParams {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
    ) -> ConvParams {
        ConvParams {
            w: store.add_init(format!("{name}.weight"), &[cout, cin, k, k], Init::UniformFanIn, rng),
            b: store.add_init(format!("{name}.bias"), &[cout], Init::Zeros, rng),
        }
    }

    pub(crate) fn apply(&self, g: &Graph, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        x.conv2d(&g.leaf(self.w), &g.leaf(self.b), stride, pad)
    }
}

/// y = x + conv2(relu(conv1(x))), both 3×3 same-channel convs.
pub(crate) struct ResBlock {
    c1: ConvParams,
    c2: ConvParams,
}

impl ResBlock {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize) -> ResBlock {
        ResBlock {
            c1: ConvParams::new(store, rng, &format!("{name}.conv1"), ch, ch, 3),
            c2: ConvParams::new(store, rng, &format!("{name}.conv2"), ch, ch, 3),
        }
    }

    pub(crate) fn apply(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.apply(g, x, 1, 1)?.relu();
        x.add(&self.c2.apply(g, &h, 1, 1)?)
    }
}

pub struct Encoder {
    conv1: ConvParams,
    conv2: ConvParams,
    res: Vec<ResBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
    pub channels: usize,
    pub patch: usize,
    pub d: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        channels: usize,
        blocks: usize,
        patch: usize,
        d: usize,
    ) -> Encoder {
        let conv1 = ConvParams::new(store, rng, "encoder.stem.conv1", channels, 3, 3);
        let conv2 = ConvParams::new(store, rng, "encoder.stem.conv2", channels, channels, 3);
        let res = (0..blocks)
            .map(|i| ResBlock::new(store, rng, &format!("encoder.stem.res{i}"), channels))
            .collect();
        let feat = channels * patch * patch;
        let proj_w = store.add_init("encoder.proj.weight", &[feat, d], Init::UniformIn, rng);
        let proj_b = store.add_init("encoder.proj.bias", &[d], Init::Zeros, rng);
        Encoder { conv1, conv2, res, proj_w, proj_b, channels, patch, d }
    }

    /// Stem CNN: two stride-2 convolutions plus residual blocks, ×4 spatial
    /// reduction. Requires H, W divisible by 16 so that patchification also
    /// lands evenly.
    pub fn backbone(&self, g: &Graph, image: &Tensor) -> Result<Tensor> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::dim("backbone", format!("expected [3,H,W], got {s:?}"))),
        };
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be divisible by 16 (backbone /4, then {0}x{0} patches)",
                self.patch
            )));
        }
        let mut x = self.conv1.apply(g, image, 2, 1)?.relu();
        x = self.conv2.apply(g, &x, 2, 1)?.relu();
        for block in &self.res {
            x = block.apply(g, &x)?;
        }
        Ok(x)
    }

    /// Patchify features, project to d, add positional encoding.
    pub fn tokens(&self, g: &Graph, image: &Tensor, pe_enabled: bool) -> Result<ImageTokens> {
        let features = self.backbone(g, image)?;
        let (fh, fw) = (features.shape()[1], features.shape()[2]);
        let rows = fh / self.patch;
        let cols = fw / self.patch;
        let flat = features.patchify(self.patch)?;
        let mut tokens = flat.matmul(&g.leaf(self.proj_w))?.add_row_bias(&g.leaf(self.proj_b))?;
        if pe_enabled {
            let pe = sine_positional_encoding(rows, cols, self.d)?;
            tokens = tokens.add(&pe)?;
        }
        Ok(ImageTokens { tokens, rows, cols })
    }
}

/// 2-D separable sine encoding: the first d/2 channels encode the x patch
/// index, the last d/2 the y index; within each half, channel pair 2j/2j+1
/// is sin/cos at frequency 1/10000^(2j/(d/2)). Weight-free and
/// deterministic.
pub fn sine_positional_encoding(rows: usize, cols: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "token dimension {d} must be divisible by 4 for 2-D sine encoding"
        )));
    }
    let half = d / 2;
    let axis_enc = |pos: usize| -> Vec<f64> {
        (0..half)
            .map(|i| {
                let j = i / 2;
                let omega = 1.0 / 10000f64.powf(2.0 * j as f64 / half as f64);
                let angle = pos as f64 * omega;
                if i % 2 == 0 {
                    angle.sin()
                } else {
                    angle.cos()
                }
            })
            .collect()
    };
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        let ye = axis_enc(r);
        for c in 0..cols {
            data.extend(axis_enc(c));
            data.extend(ye.iter().copied());
        }
    }
    Tensor::from_vec(data, &[rows * cols, d])
}
