//! Matrix products, normalization, softmax, and structural ops.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Threshold (in multiply-adds) below which matmul stays single-threaded.
const PAR_MATMUL_WORK: usize = 1 << 15;

/// out[m×n] += a[m×k] · b[k×n]. Row-parallel; each output row is written by
/// exactly one task with a sequential inner loop, so results are independent
/// of thread count.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_MATMUL_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits a shape at `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tensor {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected 2-D tensor, got {s:?}"))),
        }
    }

    /// Standard matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions of {:?} and {:?} differ", self.shape(), other.shape()),
            ));
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(self.data(), other.data(), m, k, n, &mut data);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(vec![m, n], data, &[self, other], move |g| {
            pa.grad_mut(|buf| {
                let bt = transpose_raw(pb.data(), k, n);
                matmul_acc(g, &bt, m, n, k, buf);
            });
            pb.grad_mut(|buf| {
                let at = transpose_raw(pa.data(), m, k);
                matmul_acc(&at, g, k, m, n, buf);
            });
        }))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose2d")?;
        let data = transpose_raw(self.data(), r, c);
        let pa = self.clone();
        Ok(Tensor::from_op(vec![c, r], data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            });
        }))
    }

    /// Row-broadcast add: [r×c] + [c].
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_r, c) = self.dims2("add_row_bias")?;
        if bias.shape() != [c] {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} does not match row width of {:?}", bias.shape(), self.shape()),
            ));
        }
        let mut data = self.to_vec();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, bias], move |g| {
            pa.accum_grad(g);
            pb.grad_mut(|buf| {
                for row in g.chunks(c) {
                    for (x, &v) in buf.iter_mut().zip(row) {
                        *x += v;
                    }
                }
            });
        }))
    }

    /// Numerically stabilized softmax along `axis`. Outputs are positive and
    /// sum to 1 along the axis.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(x[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (x[base + l * inner] - max).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[base + l * inner] /= sum;
                }
            }
        }
        let y = data.clone();
        let pa = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            buf[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }))
    }

    /// Per-row layer normalization of [r×c]: zero mean, unit variance over
    /// the feature axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2("layer_norm")?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match feature width {c}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; r];
        let mut data = vec![0.0; x.len()];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                data[i * c + j] = h * gain.data()[j] + bias.data()[j];
            }
        }
        let (pa, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, gain, bias], move |g| {
            pg.grad_mut(|buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            });
            pb.grad_mut(|buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[j] += g[i * c + j];
                    }
                }
            });
            pa.grad_mut(|buf| {
                for i in 0..r {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = g[i * c + j] * pg.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i * c + j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = g[i * c + j] * pg.data()[j];
                        buf[i * c + j] +=
                            inv_std[i] * (dh - mean_dh - xhat[i * c + j] * mean_dh_h);
                    }
                }
            });
        }))
    }

    /// Copies `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, shape),
            ));
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        let x = self.data();
        for o in 0..outer {
            let src = o * full * inner + start * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
        }
        let pa = self.clone();
        Ok(Tensor::from_op(out_shape, data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        buf[dst + t] += g[src + t];
                    }
                }
            });
        }))
    }

    /// [H,W,C] → [C,H,W].
    pub fn hwc_to_chw(&self) -> Result<Tensor> {
        let (h, w, c) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::dim("hwc_to_chw", format!("expected 3-D tensor, got {s:?}"))),
        };
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    data[ch * h * w + i * w + j] = x[(i * w + j) * c + ch];
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(vec![c, h, w], data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for i in 0..h {
                    for j in 0..w {
                        for ch in 0..c {
                            buf[(i * w + j) * c + ch] += g[ch * h * w + i * w + j];
                        }
                    }
                }
            });
        }))
    }

    /// [C,H,W] → [H,W,C].
    pub fn chw_to_hwc(&self) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("chw_to_hwc", format!("expected 3-D tensor, got {s:?}"))),
        };
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data[(i * w + j) * c + ch] = x[ch * h * w + i * w + j];
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(vec![h, w, c], data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            buf[ch * h * w + i * w + j] += g[(i * w + j) * c + ch];
                        }
                    }
                }
            });
        }))
    }
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "no tensors given".to_string()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape()),
        ));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for p in parts {
        if p.shape().len() != rank
            || p.shape()
                .iter()
                .enumerate()
                .any(|(i, &d)| i != axis && d != first.shape()[i])
        {
            return Err(Error::dim(
                "concat",
                format!("shape {:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
        out_shape[axis] += p.shape()[axis];
    }
    let (outer, total, inner) = axis_split(&out_shape, axis);
    let mut data = vec![0.0; outer * total * inner];
    let mut offset = 0;
    for p in parts {
        let len = p.shape()[axis];
        let x = p.data();
        for o in 0..outer {
            let dst = o * total * inner + offset * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
        }
        offset += len;
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Ok(Tensor::from_op(out_shape, data, parts, move |g| {
        let mut offset = 0;
        for p in &owned {
            let len = p.shape()[axis];
            p.grad_mut(|buf| {
                for o in 0..outer {
                    let src = o * total * inner + offset * inner;
                    let dst = o * len * inner;
                    for t in 0..len * inner {
                        buf[dst + t] += g[src + t];
                    }
                }
            });
            offset += len;
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_zero_and_dot() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(eye.matmul(&a).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(a.matmul(&zero).unwrap().to_vec(), vec![0.0; 4]);

        let v = t(&[5.0, 6.0], &[2, 1]);
        assert_eq!(a.matmul(&v).unwrap().to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch_with_shapes() {
        let a = t(&[0.0; 6], &[2, 3]);
        let b = t(&[0.0; 8], &[2, 4]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn softmax_matches_hand_values() {
        let x = t(&[5.0, 5.0, 5.0], &[1, 3]);
        assert!(close(&x.softmax(1).unwrap().to_vec(), &[1.0 / 3.0; 3], 1e-12));

        let x = t(&[0.0, 2.0f64.ln()], &[1, 2]);
        assert!(close(&x.softmax(1).unwrap().to_vec(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12));
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let x = t(&[0.3, -1.2, 4.0, 2.2], &[1, 4]);
        let shifted = x.add_scalar(123.456);
        let (a, b) = (x.softmax(1).unwrap(), shifted.softmax(1).unwrap());
        assert!(close(&a.to_vec(), &b.to_vec(), 1e-12));
        assert!((a.to_vec().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.to_vec().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 1, 2]);
        let y = x.softmax(0).unwrap();
        let d = y.to_vec();
        for col in 0..2 {
            let s: f64 = (0..3).map(|l| d[l * 2 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_hand_cases() {
        let g1 = t(&[1.0, 1.0], &[2]);
        let b0 = t(&[0.0, 0.0], &[2]);
        let x = t(&[1.0, -1.0], &[1, 2]);
        let y = x.layer_norm(&g1, &b0, 0.0).unwrap();
        assert!(close(&y.to_vec(), &[1.0, -1.0], 1e-12));

        // Constant row normalizes to zero (epsilon guards the variance).
        let c = t(&[3.0, 3.0], &[1, 2]);
        let y = c.layer_norm(&g1, &b0, 1e-5).unwrap();
        assert!(close(&y.to_vec(), &[0.0, 0.0], 1e-12));

        // Invariance to adding a constant to the input row.
        let x2 = t(&[0.4, -0.3, 2.0], &[1, 3]);
        let g3 = t(&[1.0, 1.0, 1.0], &[3]);
        let b3 = t(&[0.0, 0.0, 0.0], &[3]);
        let y1 = x2.layer_norm(&g3, &b3, 1e-5).unwrap();
        let y2 = x2.add_scalar(10.0).layer_norm(&g3, &b3, 1e-5).unwrap();
        assert!(close(&y1.to_vec(), &y2.to_vec(), 1e-9));
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let left = x.narrow(1, 0, 1).unwrap();
        let right = x.narrow(1, 1, 2).unwrap();
        let back = concat(&[&left, &right], 1).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let y = back.sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn concat_axis0_stacks_rows() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let y = concat(&[&a, &b], 0).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn transpose_round_trip_gradient() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.transpose2d().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        y.mul(&y).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }
}
