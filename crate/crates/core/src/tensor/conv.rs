//! Stride-1 "same" 2-D cross-correlation.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    /// In-bounds kernel offsets for output coordinate `i` along an axis.
    #[inline]
    fn taps(i: usize, k: usize, pad: usize, extent: usize) -> std::ops::Range<usize> {
        let lo = pad.saturating_sub(i);
        let hi = k.min(extent + pad - i);
        lo..hi
    }

    /// Calls `f(out_pixel, first_in_pixel, first_tap, run)` for every output
    /// pixel and kernel row, where `run` consecutive taps along the kernel
    /// width pair with `run` consecutive input pixels.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for i in 0..self.h {
            let rows = Self::taps(i, self.kh, self.pad_top, self.h);
            for j in 0..self.w {
                let cols = Self::taps(j, self.kw, self.pad_left, self.w);
                if cols.is_empty() {
                    continue;
                }
                let out = i * self.w + j;
                let jj = j + cols.start - self.pad_left;
                for di in rows.clone() {
                    let ii = i + di - self.pad_top;
                    f(out, ii * self.w + jj, di * self.kw + cols.start, cols.len());
                }
            }
        }
    }

    fn taps_per_out(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// `kernel[kh, kw, cin, cout]` to `[cout][kh, kw, cin]`.
fn channel_major(k: &[f64], cin_taps: usize, cout: usize) -> Vec<f64> {
    let mut t = vec![0.0; k.len()];
    for (m, row) in k.chunks_exact(cout).enumerate() {
        for (co, &v) in row.iter().enumerate() {
            t[co * cin_taps + m] = v;
        }
    }
    debug_assert_eq!(k.len(), cin_taps * cout);
    t
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for q in 0..4 {
            acc[q] += x[q] * y[q];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn forward(g: &Geometry, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let (cin, cout, span) = (g.cin, g.cout, g.taps_per_out());
    let kt = channel_major(k, span, cout);
    let mut out: Vec<f64> = (0..g.h * g.w).flat_map(|_| bias.iter().copied()).collect();
    g.for_each_run(|o, p, t, n| {
        let src = &x[p * cin..(p + n) * cin];
        for co in 0..cout {
            let ker = &kt[co * span + t * cin..co * span + (t + n) * cin];
            out[o * cout + co] += dot(src, ker);
        }
    });
    out
}

fn grad_input(g: &Geometry, dy: &[f64], k: &[f64]) -> Vec<f64> {
    let (cin, cout, span) = (g.cin, g.cout, g.taps_per_out());
    let kt = channel_major(k, span, cout);
    let mut dx = vec![0.0; g.h * g.w * cin];
    g.for_each_run(|o, p, t, n| {
        let dst = &mut dx[p * cin..(p + n) * cin];
        for co in 0..cout {
            let ker = &kt[co * span + t * cin..co * span + (t + n) * cin];
            axpy(dst, dy[o * cout + co], ker);
        }
    });
    dx
}

fn grad_kernel(g: &Geometry, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let (cin, cout, span) = (g.cin, g.cout, g.taps_per_out());
    let mut dkt = vec![0.0; span * cout];
    g.for_each_run(|o, p, t, n| {
        let src = &x[p * cin..(p + n) * cin];
        for co in 0..cout {
            let dst = &mut dkt[co * span + t * cin..co * span + (t + n) * cin];
            axpy(dst, dy[o * cout + co], src);
        }
    });
    let mut dk = vec![0.0; span * cout];
    for co in 0..cout {
        for (m, &v) in dkt[co * span..(co + 1) * span].iter().enumerate() {
            dk[m * cout + co] = v;
        }
    }
    dk
}

impl Tensor {
    /// Zero-padded, size-preserving convolution of `self[H, W, C_in]` with
    /// `kernel[kh, kw, C_in, C_out]` plus `bias[C_out]`.
    ///
    /// Even kernel extents pad `(k-1)/2` before and the remainder after.
    pub fn conv2d_same(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (h, w, cin) = self.dims3("conv2d_same")?;
        let (kh, kw, kcin, cout) = match kernel.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d_same",
                    lhs: self.shape().to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        if kcin != cin || bias.len() != cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let geo = Geometry {
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            pad_top: (kh - 1) / 2,
            pad_left: (kw - 1) / 2,
        };
        let out = forward(&geo, self.data(), kernel.data(), bias.data());
        Ok(Tensor::from_op(
            vec![h, w, cout],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |c| {
                let dx = c.needs[0].then(|| grad_input(&geo, c.grad, c.inputs[1].data()));
                let dk = c.needs[1].then(|| grad_kernel(&geo, c.grad, c.inputs[0].data()));
                let db = c.needs[2].then(|| {
                    let mut acc = vec![0.0; cout];
                    for px in c.grad.chunks(cout) {
                        acc.iter_mut().zip(px).for_each(|(a, g)| *a += g);
                    }
                    acc
                });
                vec![dx, dk, db]
            },
        ))
    }
}
