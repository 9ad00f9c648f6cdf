//! Grid sampling, patch extraction, and keypoint heatmaps.
//!
//! Coordinates are normalized to [−1,1] with x rightward, y downward and the
//! align-corners convention: pixel i of an axis of size n sits at −1 + 2i/(n−1)
//! (0 when n = 1).

use super::Tensor;
use crate::error::{Error, Result};

/// Pixel index of normalized coordinate `v` on an axis of size `n`.
pub fn to_pixel(v: f64, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        (v + 1.0) * 0.5 * (n - 1) as f64
    }
}

impl Tensor {
    /// Samples [C,H,W] at `grid` [h,w,2] of normalized (x,y) coordinates.
    /// Out-of-range taps read as zero. Differentiable with respect to both
    /// the image values and the grid coordinates.
    pub fn bilinear_sample(&self, grid: &Tensor) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("bilinear_sample", format!("image must be [C,H,W], got {s:?}"))),
        };
        let (gh, gw) = match grid.shape() {
            [gh, gw, 2] => (*gh, *gw),
            s => return Err(Error::dim("bilinear_sample", format!("grid must be [h,w,2], got {s:?}"))),
        };
        let img = self.data();
        let g = grid.data();
        let n = gh * gw;
        let mut data = vec![0.0; c * n];
        let tap = |ix: isize, iy: isize, ci: usize| -> f64 {
            if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                0.0
            } else {
                img[(ci * h + iy as usize) * w + ix as usize]
            }
        };
        for p in 0..n {
            let px = to_pixel(g[p * 2], w);
            let py = to_pixel(g[p * 2 + 1], h);
            let x0 = px.floor();
            let y0 = py.floor();
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ci in 0..c {
                let v00 = tap(x0, y0, ci);
                let v01 = tap(x0 + 1, y0, ci);
                let v10 = tap(x0, y0 + 1, ci);
                let v11 = tap(x0 + 1, y0 + 1, ci);
                data[ci * n + p] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
        let (pi, pg) = (self.clone(), grid.clone());
        Ok(Tensor::from_op(vec![c, gh, gw], data, &[self, grid], move |go| {
            let img = pi.data();
            let g = pg.data();
            let tap = |ix: isize, iy: isize, ci: usize| -> f64 {
                if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                    0.0
                } else {
                    img[(ci * h + iy as usize) * w + ix as usize]
                }
            };
            pi.grad_mut(|buf| {
                for p in 0..n {
                    let px = to_pixel(g[p * 2], w);
                    let py = to_pixel(g[p * 2 + 1], h);
                    let x0f = px.floor();
                    let y0f = py.floor();
                    let (fx, fy) = (px - x0f, py - y0f);
                    let (x0, y0) = (x0f as isize, y0f as isize);
                    let mut scatter = |ix: isize, iy: isize, wgt: f64, ci: usize| {
                        if ix >= 0 && iy >= 0 && ix < w as isize && iy < h as isize {
                            buf[(ci * h + iy as usize) * w + ix as usize] += wgt;
                        }
                    };
                    for ci in 0..c {
                        let v = go[ci * n + p];
                        scatter(x0, y0, v * (1.0 - fy) * (1.0 - fx), ci);
                        scatter(x0 + 1, y0, v * (1.0 - fy) * fx, ci);
                        scatter(x0, y0 + 1, v * fy * (1.0 - fx), ci);
                        scatter(x0 + 1, y0 + 1, v * fy * fx, ci);
                    }
                }
            });
            pg.grad_mut(|buf| {
                for p in 0..n {
                    let px = to_pixel(g[p * 2], w);
                    let py = to_pixel(g[p * 2 + 1], h);
                    let x0f = px.floor();
                    let y0f = py.floor();
                    let (fx, fy) = (px - x0f, py - y0f);
                    let (x0, y0) = (x0f as isize, y0f as isize);
                    let (mut dpx, mut dpy) = (0.0, 0.0);
                    for ci in 0..c {
                        let v = go[ci * n + p];
                        if v == 0.0 {
                            continue;
                        }
                        let v00 = tap(x0, y0, ci);
                        let v01 = tap(x0 + 1, y0, ci);
                        let v10 = tap(x0, y0 + 1, ci);
                        let v11 = tap(x0 + 1, y0 + 1, ci);
                        dpx += v * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        dpy += v * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    if w > 1 {
                        buf[p * 2] += dpx * 0.5 * (w - 1) as f64;
                    }
                    if h > 1 {
                        buf[p * 2 + 1] += dpy * 0.5 * (h - 1) as f64;
                    }
                }
            });
        }))
    }

    /// Splits [C,H,W] into non-overlapping p×p patches in raster order and
    /// flattens each to a row: output [(H/p)(W/p), C·p·p].
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("patchify", format!("expected [C,H,W], got {s:?}"))),
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::dim(
                "patchify",
                format!("spatial dims {h}x{w} not divisible by patch {p}"),
            ));
        }
        let (rows, cols) = (h / p, w / p);
        let n = rows * cols;
        let f = c * p * p;
        let x = self.data();
        let mut data = vec![0.0; n * f];
        for r in 0..rows {
            for cc in 0..cols {
                let patch = r * cols + cc;
                for ci in 0..c {
                    for ki in 0..p {
                        for kj in 0..p {
                            data[patch * f + (ci * p + ki) * p + kj] =
                                x[(ci * h + r * p + ki) * w + cc * p + kj];
                        }
                    }
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(vec![n, f], data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for r in 0..rows {
                    for cc in 0..cols {
                        let patch = r * cols + cc;
                        for ci in 0..c {
                            for ki in 0..p {
                                for kj in 0..p {
                                    buf[(ci * h + r * p + ki) * w + cc * p + kj] +=
                                        g[patch * f + (ci * p + ki) * p + kj];
                                }
                            }
                        }
                    }
                }
            });
        }))
    }
}

/// exp(−‖c − t_k‖²/(2σ²)) over the identity grid for each keypoint row of
/// `keypoints` [K,2]; output [K,h,w]. Differentiable in the keypoints.
pub fn gaussian_heatmaps(keypoints: &Tensor, h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    let k = match keypoints.shape() {
        [k, 2] => *k,
        s => {
            return Err(Error::dim(
                "gaussian_heatmaps",
                format!("keypoints must be [K,2], got {s:?}"),
            ));
        }
    };
    if sigma <= 0.0 {
        return Err(Error::dim("gaussian_heatmaps", format!("sigma {sigma} must be positive")));
    }
    let xs: Vec<f64> = (0..w).map(|i| axis_coord(i, w)).collect();
    let ys: Vec<f64> = (0..h).map(|i| axis_coord(i, h)).collect();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let kp = keypoints.data();
    let mut data = vec![0.0; k * h * w];
    for ki in 0..k {
        let (tx, ty) = (kp[ki * 2], kp[ki * 2 + 1]);
        for (yi, &cy) in ys.iter().enumerate() {
            let dy2 = (cy - ty) * (cy - ty);
            for (xi, &cx) in xs.iter().enumerate() {
                let d2 = (cx - tx) * (cx - tx) + dy2;
                data[(ki * h + yi) * w + xi] = (-d2 * inv).exp();
            }
        }
    }
    let y = data.clone();
    let pk = keypoints.clone();
    Ok(Tensor::from_op(vec![k, h, w], data, &[keypoints], move |g| {
        pk.grad_mut(|buf| {
            let kp = pk.data();
            for ki in 0..k {
                let (tx, ty) = (kp[ki * 2], kp[ki * 2 + 1]);
                let (mut dx, mut dy) = (0.0, 0.0);
                for (yi, &cy) in ys.iter().enumerate() {
                    for (xi, &cx) in xs.iter().enumerate() {
                        let idx = (ki * h + yi) * w + xi;
                        // d m / d t = m · (c − t)/σ²
                        let common = g[idx] * y[idx] * 2.0 * inv;
                        dx += common * (cx - tx);
                        dy += common * (cy - ty);
                    }
                }
                buf[ki * 2] += dx;
                buf[ki * 2 + 1] += dy;
            }
        });
    }))
}

/// Normalized coordinate of pixel i on an axis of size n (align-corners).
pub fn axis_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::identity_grid;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_grid_sampling_is_exact() {
        let x = t(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &[1, 2, 3]);
        let grid = identity_grid(2, 3);
        let y = x.bilinear_sample(&grid).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn center_sample_averages_four_neighbors() {
        let x = t(&[0.0, 1.0, 2.0, 3.0], &[1, 2, 2]);
        let grid = t(&[0.0, 0.0], &[1, 1, 2]);
        let y = x.bilinear_sample(&grid).unwrap();
        assert!((y.item() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn far_outside_grid_samples_zero() {
        let x = t(&[1.0; 16], &[1, 4, 4]);
        let grid = t(&[5.0, 5.0, -3.0, 2.0], &[1, 2, 2]);
        let y = x.bilinear_sample(&grid).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn patchify_orders_rows_by_lattice() {
        #[rustfmt::skip]
        let x = t(&[
            1.0, 2.0, 5.0, 6.0,
            3.0, 4.0, 7.0, 8.0,
        ], &[1, 2, 4]);
        let y = x.patchify(2).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        y.narrow(0, 1, 1).unwrap().sum_all().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(&g[..4], &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn heatmap_peaks_at_keypoint() {
        let kp = t(&[0.0, 0.0], &[1, 2]);
        let m = gaussian_heatmaps(&kp, 5, 5, 0.1).unwrap();
        // (0,0) is the center pixel of an odd grid.
        assert!((m.data()[2 * 5 + 2] - 1.0).abs() < 1e-12);
        // Symmetric under reflection for a centered keypoint.
        let d = m.data();
        for y in 0..5 {
            for x in 0..5 {
                assert!((d[y * 5 + x] - d[(4 - y) * 5 + (4 - x)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heatmap_value_at_one_sigma() {
        // Keypoint at a grid point; a pixel at normalized distance sigma.
        let sigma = 2.0 / 4.0; // one pixel step on a 5-wide axis
        let kp = t(&[0.0, 0.0], &[1, 2]);
        let m = gaussian_heatmaps(&kp, 5, 5, sigma).unwrap();
        let v = m.data()[2 * 5 + 3];
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
    }
}
