//! Activations, normalization, softmax and resampling.

use super::Tensor;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source coordinate and blend weight for an align-corners resize axis.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl Tensor {
    fn map_unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let out = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |c| {
            let x = c.inputs[0].data();
            vec![Some(
                c.grad
                    .iter()
                    .zip(x)
                    .zip(c.output)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// `x / (1 + e^{-x})`
    pub fn silu(&self) -> Tensor {
        self.map_unary(
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&self) -> Tensor {
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting each row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = vec![0.0; m * n];
        for (dst, row) in out.chunks_mut(n).zip(self.data().chunks(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        Ok(Tensor::from_op(vec![m, n], out, vec![self.clone()], move |c| {
            let mut g = vec![0.0; m * n];
            for ((gi, y), dy) in g.chunks_mut(n).zip(c.output.chunks(n)).zip(c.grad.chunks(n)) {
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for ((gv, &yv), &dyv) in gi.iter_mut().zip(y).zip(dy) {
                    *gv = yv * (dyv - dot);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Normalize over every element of `x[L, ...]` with a single mean and
    /// variance, then apply the per-row affine `w[L]`, `b[L]`.
    pub fn layer_norm(&self, w: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(crate::error::invalid("layer_norm eps must be positive"));
        }
        let rows = self.shape()[0];
        if w.len() != rows || b.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let n = self.len();
        let cols = n / rows;
        let x = self.data();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let (wd, bd) = (w.data(), b.data());
        let out = xhat
            .chunks(cols)
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |v| wd[i] * v + bd[i]))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), w.clone(), b.clone()],
            move |c| {
                let wd = c.inputs[1].data();
                let dx = c.needs[0].then(|| {
                    let dxhat: Vec<f64> = c
                        .grad
                        .chunks(cols)
                        .enumerate()
                        .flat_map(|(i, r)| r.iter().map(move |g| g * wd[i]))
                        .collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(d, xh)| inv_std * (d - mean_d - xh * mean_dx))
                        .collect()
                });
                let dw = c.needs[1].then(|| {
                    c.grad
                        .chunks(cols)
                        .zip(xhat.chunks(cols))
                        .map(|(g, xh)| g.iter().zip(xh).map(|(a, b)| a * b).sum())
                        .collect()
                });
                let db = c.needs[2].then(|| c.grad.chunks(cols).map(|g| g.iter().sum()).collect());
                vec![dx, dw, db]
            },
        ))
    }

    /// Align-corners bilinear resize of `x[H, W, C]` to `[out_h, out_w, C]`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (h, w, ch) = self.dims3("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(crate::error::invalid("bilinear_resize target must be non-empty"));
        }
        let rows = resize_axis(h, out_h);
        let cols = resize_axis(w, out_w);
        let x = self.data();
        let mut out = vec![0.0; out_h * out_w * ch];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let dst = &mut out[(i * out_w + j) * ch..(i * out_w + j + 1) * ch];
                let taps = [
                    (r0, c0, (1.0 - fr) * (1.0 - fc)),
                    (r0, c1, (1.0 - fr) * fc),
                    (r1, c0, fr * (1.0 - fc)),
                    (r1, c1, fr * fc),
                ];
                for (r, cc, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let src = &x[(r * w + cc) * ch..(r * w + cc + 1) * ch];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![out_h, out_w, ch],
            out,
            vec![self.clone()],
            move |c| {
                let mut g = vec![0.0; h * w * ch];
                for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let up = &c.grad[(i * out_w + j) * ch..(i * out_w + j + 1) * ch];
                        let taps = [
                            (r0, c0, (1.0 - fr) * (1.0 - fc)),
                            (r0, c1, (1.0 - fr) * fc),
                            (r1, c0, fr * (1.0 - fc)),
                            (r1, c1, fr * fc),
                        ];
                        for (r, cc, wt) in taps {
                            if wt == 0.0 {
                                continue;
                            }
                            let dst = &mut g[(r * w + cc) * ch..(r * w + cc + 1) * ch];
                            dst.iter_mut().zip(up).for_each(|(d, u)| *d += wt * u);
                        }
                    }
                }
                vec![Some(g)]
            },
        ))
    }
}
