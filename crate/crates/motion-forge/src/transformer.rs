//! Motion transformer: learnable motion tokens concatenated with image
//! tokens, L encoder layers, and a linear head regressing per-part
//! keypoints and affines.
//!
//! Layers come in two wirings (unified joint attention vs. split self/cross
//! paths) and two block forms (standard post-norm vs. a literal variant
//! without the FFN residual), all selectable for ablation runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{concat, Tensor};
use crate::params::{Graph, Init, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Unified,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockForm {
    /// x ← LN(x + MSA(x)); x ← LN(x + FFN(x)).
    Standard,
    /// y = x + MSA(x); out = FFN(LN(y) + y) — no FFN residual, no final LN.
    PaperLiteral,
}

/// Projection weights of one attention op, all applied as x·W + b.
pub struct AttnTensors {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

pub struct FfnTensors {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct LnTensors {
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Multi-head attention of queries over a key/value token set. Per head j:
/// softmax(Q_j K_jᵀ / √(d/h)) V_j, heads concatenated then projected by Wo.
/// Also returns the head-averaged attention matrix [Tq,Tk] (rows sum to 1).
pub fn msa(q_src: &Tensor, kv_src: &Tensor, w: &AttnTensors, heads: usize) -> Result<(Tensor, Tensor)> {
    let d = match (q_src.shape(), kv_src.shape()) {
        ([_, d1], [_, d2]) if d1 == d2 => *d1,
        (a, b) => {
            return Err(Error::dim("msa", format!("token dims of {a:?} and {b:?} differ")));
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim("msa", format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = q_src.matmul(&w.wq)?.add_row_bias(&w.bq)?;
    let k = kv_src.matmul(&w.wk)?.add_row_bias(&w.bk)?;
    let v = kv_src.matmul(&w.wv)?.add_row_bias(&w.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    let mut attn_mean: Option<Tensor> = None;
    for hi in 0..heads {
        let qh = q.narrow(1, hi * dh, dh)?;
        let kh = k.narrow(1, hi * dh, dh)?;
        let vh = v.narrow(1, hi * dh, dh)?;
        let scores = qh.matmul(&kh.transpose2d()?)?.mul_scalar(scale);
        let attn = scores.softmax(1)?;
        head_outs.push(attn.matmul(&vh)?);
        attn_mean = Some(match attn_mean {
            None => attn,
            Some(acc) => acc.add(&attn)?,
        });
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let merged = concat(&refs, 1)?;
    let out = merged.matmul(&w.wo)?.add_row_bias(&w.bo)?;
    let attn = attn_mean.expect("heads >= 1").mul_scalar(1.0 / heads as f64);
    Ok((out, attn))
}

fn ffn(x: &Tensor, w: &FfnTensors) -> Result<Tensor> {
    x.matmul(&w.w1)?
        .add_row_bias(&w.b1)?
        .gelu()
        .matmul(&w.w2)?
        .add_row_bias(&w.b2)
}

fn ln(x: &Tensor, w: &LnTensors) -> Result<Tensor> {
    x.layer_norm(&w.gain, &w.bias, LAYER_NORM_EPS)
}

pub struct UnifiedLayerTensors {
    pub attn: AttnTensors,
    pub ffn: FfnTensors,
    pub ln1: LnTensors,
    pub ln2: LnTensors,
}

/// One encoder block over the concatenated [motion; image] token matrix.
/// Returns the updated tokens and the attention matrix.
pub fn unified_layer(
    x: &Tensor,
    w: &UnifiedLayerTensors,
    heads: usize,
    form: BlockForm,
) -> Result<(Tensor, Tensor)> {
    let (a, attn) = msa(x, x, &w.attn, heads)?;
    let out = match form {
        BlockForm::Standard => {
            let x1 = ln(&x.add(&a)?, &w.ln1)?;
            let f = ffn(&x1, &w.ffn)?;
            ln(&x1.add(&f)?, &w.ln2)?
        }
        BlockForm::PaperLiteral => {
            let y = x.add(&a)?;
            ffn(&ln(&y, &w.ln1)?.add(&y)?, &w.ffn)?
        }
    };
    Ok((out, attn))
}

pub struct SplitLayerTensors {
    pub self_attn: AttnTensors,
    pub cross_attn: AttnTensors,
    pub img_attn: AttnTensors,
    pub motion_ffn: FfnTensors,
    pub img_ffn: FfnTensors,
    pub motion_ln1: LnTensors,
    pub motion_ln2: LnTensors,
    pub img_ln1: LnTensors,
    pub img_ln2: LnTensors,
}

/// Ablation wiring: motion tokens update by self attention plus cross
/// attention over image tokens (summed); image tokens by self attention
/// among themselves. Attention returned is the cross map (motion → image).
pub fn split_layer(
    motion: &Tensor,
    image: &Tensor,
    w: &SplitLayerTensors,
    heads: usize,
    form: BlockForm,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (m_self, _) = msa(motion, motion, &w.self_attn, heads)?;
    let (m_cross, cross_attn) = msa(motion, image, &w.cross_attn, heads)?;
    let m_upd = m_self.add(&m_cross)?;
    let (i_upd, _) = msa(image, image, &w.img_attn, heads)?;

    let apply = |x: &Tensor, upd: &Tensor, ln1: &LnTensors, ln2: &LnTensors, f: &FfnTensors| -> Result<Tensor> {
        match form {
            BlockForm::Standard => {
                let x1 = ln(&x.add(upd)?, ln1)?;
                let y = ffn(&x1, f)?;
                ln(&x1.add(&y)?, ln2)
            }
            BlockForm::PaperLiteral => {
                let y = x.add(upd)?;
                ffn(&ln(&y, ln1)?.add(&y)?, f)
            }
        }
    };
    let m_out = apply(motion, &m_upd, &w.motion_ln1, &w.motion_ln2, &w.motion_ffn)?;
    let i_out = apply(image, &i_upd, &w.img_ln1, &w.img_ln2, &w.img_ffn)?;
    Ok((m_out, i_out, cross_attn))
}

/// Linear head: per motion token, 6 outputs [a11,a12,a21,a22,tx,ty].
/// Zero weights with bias [1,0,0,1,0,0] make every part start at A=I, t=0.
pub fn decode_head(tokens: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    tokens.matmul(w)?.add_row_bias(b)
}

// Parameter-registry wrappers.

pub(crate) struct AttnParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AttnParams {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> AttnParams {
        let mut mat = |suffix: &str| {
            store.add_init(format!("{name}.{suffix}.weight"), &[d, d], Init::UniformIn, rng)
        };
        let (wq, wk, wv, wo) = (mat("q"), mat("k"), mat("v"), mat("o"));
        let mut bias = |suffix: &str| {
            store.add_init(format!("{name}.{suffix}.bias"), &[d], Init::Zeros, rng)
        };
        let (bq, bk, bv, bo) = (bias("q"), bias("k"), bias("v"), bias("o"));
        AttnParams { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn tensors(&self, g: &Graph) -> AttnTensors {
        AttnTensors {
            wq: g.leaf(self.wq),
            bq: g.leaf(self.bq),
            wk: g.leaf(self.wk),
            bk: g.leaf(self.bk),
            wv: g.leaf(self.wv),
            bv: g.leaf(self.bv),
            wo: g.leaf(self.wo),
            bo: g.leaf(self.bo),
        }
    }
}

pub(crate) struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FfnParams {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> FfnParams {
        FfnParams {
            w1: store.add_init(format!("{name}.w1.weight"), &[d, hidden], Init::UniformIn, rng),
            b1: store.add_init(format!("{name}.w1.bias"), &[hidden], Init::Zeros, rng),
            w2: store.add_init(format!("{name}.w2.weight"), &[hidden, d], Init::UniformIn, rng),
            b2: store.add_init(format!("{name}.w2.bias"), &[d], Init::Zeros, rng),
        }
    }

    fn tensors(&self, g: &Graph) -> FfnTensors {
        FfnTensors { w1: g.leaf(self.w1), b1: g.leaf(self.b1), w2: g.leaf(self.w2), b2: g.leaf(self.b2) }
    }
}

pub(crate) struct LnParams {
    gain: ParamId,
    bias: ParamId,
}

impl LnParams {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> LnParams {
        LnParams {
            gain: store.add_init(format!("{name}.gain"), &[d], Init::Ones, rng),
            bias: store.add_init(format!("{name}.bias"), &[d], Init::Zeros, rng),
        }
    }

    fn tensors(&self, g: &Graph) -> LnTensors {
        LnTensors { gain: g.leaf(self.gain), bias: g.leaf(self.bias) }
    }
}

enum LayerParams {
    Unified {
        attn: AttnParams,
        ffn: FfnParams,
        ln1: LnParams,
        ln2: LnParams,
    },
    Split {
        self_attn: AttnParams,
        cross_attn: AttnParams,
        img_attn: AttnParams,
        motion_ffn: FfnParams,
        img_ffn: FfnParams,
        motion_ln1: LnParams,
        motion_ln2: LnParams,
        img_ln1: LnParams,
        img_ln2: LnParams,
    },
}

/// The full token mixer: K learnable motion tokens (no positional encoding),
/// L layers, and the linear decode head.
pub struct MotionTransformer {
    motion_tokens: ParamId,
    layers: Vec<LayerParams>,
    head_w: ParamId,
    head_b: ParamId,
    pub k: usize,
    pub heads: usize,
    pub block_form: BlockForm,
}

pub struct TransformerOut {
    /// [K,6] motion parameters.
    pub params: Tensor,
    /// Per layer, head-averaged attention rows of the K motion tokens:
    /// [K, K+N] for unified layers, [K, N] for split layers.
    pub attention: Vec<Tensor>,
}

impl MotionTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        k: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        mode: AttentionMode,
        block_form: BlockForm,
    ) -> MotionTransformer {
        // Unit-scale init: the tokens are the only thing distinguishing the K
        // motion slots, and small inits leave their attention readouts so
        // similar that the decoded motions never specialize per part.
        let motion_tokens =
            store.add_init("transformer.motion_tokens", &[k, d], Init::Uniform(1.0), rng);
        let layer_params = (0..layers)
            .map(|i| {
                let base = format!("transformer.layer{i}");
                match mode {
                    AttentionMode::Unified => LayerParams::Unified {
                        attn: AttnParams::new(store, rng, &format!("{base}.attn"), d),
                        ffn: FfnParams::new(store, rng, &format!("{base}.ffn"), d, ffn_dim),
                        ln1: LnParams::new(store, rng, &format!("{base}.ln1"), d),
                        ln2: LnParams::new(store, rng, &format!("{base}.ln2"), d),
                    },
                    AttentionMode::Split => LayerParams::Split {
                        self_attn: AttnParams::new(store, rng, &format!("{base}.self_attn"), d),
                        cross_attn: AttnParams::new(store, rng, &format!("{base}.cross_attn"), d),
                        img_attn: AttnParams::new(store, rng, &format!("{base}.img_attn"), d),
                        motion_ffn: FfnParams::new(store, rng, &format!("{base}.motion_ffn"), d, ffn_dim),
                        img_ffn: FfnParams::new(store, rng, &format!("{base}.img_ffn"), d, ffn_dim),
                        motion_ln1: LnParams::new(store, rng, &format!("{base}.motion_ln1"), d),
                        motion_ln2: LnParams::new(store, rng, &format!("{base}.motion_ln2"), d),
                        img_ln1: LnParams::new(store, rng, &format!("{base}.img_ln1"), d),
                        img_ln2: LnParams::new(store, rng, &format!("{base}.img_ln2"), d),
                    },
                }
            })
            .collect();
        let head_w = store.add_init("transformer.head.weight", &[d, 6], Init::Zeros, rng);
        let head_b = store.add("transformer.head.bias", &[6], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        MotionTransformer { motion_tokens, layers: layer_params, head_w, head_b, k, heads, block_form }
    }

    /// Runs the layer stack over the image tokens and decodes [K,6] motion
    /// parameters. `want_attention` keeps per-layer attention maps.
    pub fn forward(&self, g: &Graph, image_tokens: &Tensor, want_attention: bool) -> Result<TransformerOut> {
        let motion = g.leaf(self.motion_tokens);
        let mut attention = Vec::new();

        let final_motion = match self.layers.first() {
            Some(LayerParams::Split { .. }) | None => {
                let mut m = motion;
                let mut img = image_tokens.clone();
                for layer in &self.layers {
                    let LayerParams::Split {
                        self_attn,
                        cross_attn,
                        img_attn,
                        motion_ffn,
                        img_ffn,
                        motion_ln1,
                        motion_ln2,
                        img_ln1,
                        img_ln2,
                    } = layer
                    else {
                        return Err(Error::Config("mixed layer kinds in one stack".into()));
                    };
                    let w = SplitLayerTensors {
                        self_attn: self_attn.tensors(g),
                        cross_attn: cross_attn.tensors(g),
                        img_attn: img_attn.tensors(g),
                        motion_ffn: motion_ffn.tensors(g),
                        img_ffn: img_ffn.tensors(g),
                        motion_ln1: motion_ln1.tensors(g),
                        motion_ln2: motion_ln2.tensors(g),
                        img_ln1: img_ln1.tensors(g),
                        img_ln2: img_ln2.tensors(g),
                    };
                    let (m2, i2, attn) = split_layer(&m, &img, &w, self.heads, self.block_form)?;
                    if want_attention {
                        attention.push(attn);
                    }
                    m = m2;
                    img = i2;
                }
                m
            }
            Some(LayerParams::Unified { .. }) => {
                let mut x = concat(&[&motion, image_tokens], 0)?;
                for layer in &self.layers {
                    let LayerParams::Unified { attn, ffn, ln1, ln2 } = layer else {
                        return Err(Error::Config("mixed layer kinds in one stack".into()));
                    };
                    let w = UnifiedLayerTensors {
                        attn: attn.tensors(g),
                        ffn: ffn.tensors(g),
                        ln1: ln1.tensors(g),
                        ln2: ln2.tensors(g),
                    };
                    let (x2, attn_full) = unified_layer(&x, &w, self.heads, self.block_form)?;
                    if want_attention {
                        attention.push(attn_full.narrow(0, 0, self.k)?);
                    }
                    x = x2;
                }
                x.narrow(0, 0, self.k)?
            }
        };
        let params = decode_head(&final_motion, &g.leaf(self.head_w), &g.leaf(self.head_b))?;
        Ok(TransformerOut { params, attention })
    }
}
