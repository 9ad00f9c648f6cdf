//! Convolution, pooling, and resampling on [C×H×W] tensors.

use super::ops::{matmul_acc, transpose_raw};
use super::Tensor;
use crate::error::{Error, Result};

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::dim(op, format!("expected [C,H,W] tensor, got {s:?}"))),
    }
}

/// col[(ci·kh+ki)·kw+kj, oy·wo+ox] = x[ci, oy·s+ki−pad, ox·s+kj−pad], 0 outside.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let l = ho * wo;
    let mut col = vec![0.0; cin * kh * kw * l];
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let l = ho * wo;
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((ci * kh + ki) * kw + kj) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation of [Cin,H,W] with kernels [Cout,Cin,kh,kw] and
    /// per-channel bias, zero padding. Differentiable in input, kernels, bias.
    pub fn conv2d(
        &self,
        kernels: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (cin, h, w) = dims3(self, "conv2d")?;
        let (cout, kcin, kh, kw) = match kernels.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(Error::dim("conv2d", format!("kernels must be 4-D, got {s:?}")));
            }
        };
        if kcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {cin} vs kernel channels {kcin}"),
            ));
        }
        if bias.shape() != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} does not match {cout} output channels", bias.shape()),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad || stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let l = ho * wo;
        let ck = cin * kh * kw;

        let col = im2col(self.data(), cin, h, w, kh, kw, stride, pad, ho, wo);
        let mut data = vec![0.0; cout * l];
        matmul_acc(kernels.data(), &col, cout, ck, l, &mut data);
        for (co, row) in data.chunks_mut(l).enumerate() {
            let b = bias.data()[co];
            for v in row.iter_mut() {
                *v += b;
            }
        }

        let (px, pk, pb) = (self.clone(), kernels.clone(), bias.clone());
        Ok(Tensor::from_op(vec![cout, ho, wo], data, &[self, kernels, bias], move |g| {
            // The column matrix is recomputed here rather than captured: it is
            // the largest intermediate and only needed again on this path.
            let col = im2col(px.data(), cin, h, w, kh, kw, stride, pad, ho, wo);
            pk.grad_mut(|buf| {
                let colt = transpose_raw(&col, ck, l);
                matmul_acc(g, &colt, cout, l, ck, buf);
            });
            pb.grad_mut(|buf| {
                for (co, row) in g.chunks(l).enumerate() {
                    buf[co] += row.iter().sum::<f64>();
                }
            });
            px.grad_mut(|buf| {
                let wt = transpose_raw(pk.data(), cout, ck);
                let mut dcol = vec![0.0; ck * l];
                matmul_acc(&wt, g, ck, cout, l, &mut dcol);
                col2im_add(&dcol, cin, h, w, kh, kw, stride, pad, ho, wo, buf);
            });
        }))
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let (c, h, w) = dims3(self, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("avg_pool2", format!("odd spatial dims {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut data = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = (ci * h + 2 * oy) * w + 2 * ox;
                    data[(ci * ho + oy) * wo + ox] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(vec![c, ho, wo], data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = 0.25 * g[(ci * ho + oy) * wo + ox];
                            let base = (ci * h + 2 * oy) * w + 2 * ox;
                            buf[base] += v;
                            buf[base + 1] += v;
                            buf[base + w] += v;
                            buf[base + w + 1] += v;
                        }
                    }
                }
            });
        }))
    }

    /// Bilinear resize with align-corners mapping. Exactly reproduces linear
    /// ramps, so an identity flow stays identity under resizing.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let (c, h, w) = dims3(self, "upsample_bilinear")?;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("upsample_bilinear", "zero output size".to_string()));
        }
        // tap: output index -> (i0, i1, weight of i1)
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    if n_out == 1 || n_in == 1 {
                        return (0, 0, 0.0);
                    }
                    let f = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                    let i0 = (f.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, f - i0 as f64)
                })
                .collect()
        };
        let ty = taps(h, oh);
        let tx = taps(w, ow);
        let x = self.data();
        let mut data = vec![0.0; c * oh * ow];
        for ci in 0..c {
            let plane = &x[ci * h * w..][..h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let v = (1.0 - wy) * (1.0 - wx) * plane[y0 * w + x0]
                        + (1.0 - wy) * wx * plane[y0 * w + x1]
                        + wy * (1.0 - wx) * plane[y1 * w + x0]
                        + wy * wx * plane[y1 * w + x1];
                    data[(ci * oh + oy) * ow + ox] = v;
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(vec![c, oh, ow], data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for ci in 0..c {
                    let plane = &mut buf[ci * h * w..][..h * w];
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let v = g[(ci * oh + oy) * ow + ox];
                            plane[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * v;
                            plane[y0 * w + x1] += (1.0 - wy) * wx * v;
                            plane[y1 * w + x0] += wy * (1.0 - wx) * v;
                            plane[y1 * w + x1] += wy * wx * v;
                        }
                    }
                }
            });
        }))
    }

    /// Per-pixel gate: [C,H,W] ⊙ [1,H,W] broadcast over channels.
    pub fn mul_channelwise(&self, gate: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(self, "mul_channelwise")?;
        if gate.shape() != [1, h, w] {
            return Err(Error::dim(
                "mul_channelwise",
                format!("gate {:?} does not match spatial dims of {:?}", gate.shape(), self.shape()),
            ));
        }
        let hw = h * w;
        let x = self.data();
        let m = gate.data();
        let mut data = vec![0.0; c * hw];
        for ci in 0..c {
            for p in 0..hw {
                data[ci * hw + p] = x[ci * hw + p] * m[p];
            }
        }
        let (pa, pm) = (self.clone(), gate.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, gate], move |g| {
            pa.grad_mut(|buf| {
                let m = pm.data();
                for ci in 0..c {
                    for p in 0..hw {
                        buf[ci * hw + p] += g[ci * hw + p] * m[p];
                    }
                }
            });
            pm.grad_mut(|buf| {
                let x = pa.data();
                for ci in 0..c {
                    for p in 0..hw {
                        buf[p] += g[ci * hw + p] * x[ci * hw + p];
                    }
                }
            });
        }))
    }
}
