//! Bidirectional selective scan `h_t = a_t∘h_{t-1} + b_t` run in both
//! directions and summed.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Gate tensors feeding the scan, each `L × c` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanInputs {
    pub len: usize,
    pub channels: usize,
    /// Retention gate, strictly inside (0, 1).
    pub a: Vec<f64>,
    /// Drive.
    pub b: Vec<f64>,
    /// Output gate.
    pub g: Vec<f64>,
}

impl ScanInputs {
    pub fn new(len: usize, channels: usize, a: Vec<f64>, b: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        let n = len * channels;
        if len == 0 || channels == 0 || a.len() != n || b.len() != n || g.len() != n {
            return Err(invalid(format!("scan inputs must all be {len}x{channels}")));
        }
        if a.iter().chain(&b).chain(&g).any(|v| !v.is_finite()) {
            return Err(crate::error::Error::NonFinite("scan"));
        }
        Ok(Self { len, channels, a, b, g })
    }

    /// Reverse the token order of every gate.
    pub fn reversed(&self) -> Self {
        let rev = |v: &[f64]| -> Vec<f64> {
            v.chunks(self.channels).rev().flatten().copied().collect()
        };
        Self {
            len: self.len,
            channels: self.channels,
            a: rev(&self.a),
            b: rev(&self.b),
            g: rev(&self.g),
        }
    }
}

/// How the forward pass evaluates the recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

/// Forward and backward state sequences, each `L × c`.
fn states_sequential(a: &[f64], b: &[f64], len: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut hf = vec![0.0; len * c];
    let mut hb = vec![0.0; len * c];
    hf[..c].copy_from_slice(&b[..c]);
    for t in 1..len {
        let (prev, cur) = hf.split_at_mut(t * c);
        let prev = &prev[(t - 1) * c..];
        for i in 0..c {
            cur[i] = a[t * c + i] * prev[i] + b[t * c + i];
        }
    }
    let last = (len - 1) * c;
    hb[last..].copy_from_slice(&b[last..]);
    for t in (0..len - 1).rev() {
        let (cur, next) = hb.split_at_mut((t + 1) * c);
        let cur = &mut cur[t * c..];
        for i in 0..c {
            cur[i] = a[t * c + i] * next[i] + b[t * c + i];
        }
    }
    (hf, hb)
}

/// `h_t = h^f_t + h^b_t`, evaluated step by step.
pub fn scan_sequential(s: &ScanInputs) -> Vec<f64> {
    let mut out = Vec::new();
    scan_sequential_into(s, &mut out);
    out
}

/// [`scan_sequential`] writing into `out`, which is resized to `L × c`.
/// The backward state is carried in a `c`-wide register instead of a full
/// state sequence, so reusing `out` makes repeated calls allocation free.
pub fn scan_sequential_into(s: &ScanInputs, out: &mut Vec<f64>) {
    let (len, c) = (s.len, s.channels);
    out.resize(len * c, 0.0);
    out[..c].copy_from_slice(&s.b[..c]);
    for t in 1..len {
        let (prev, cur) = out.split_at_mut(t * c);
        let prev = &prev[(t - 1) * c..];
        let (a, b) = (&s.a[t * c..(t + 1) * c], &s.b[t * c..(t + 1) * c]);
        for i in 0..c {
            cur[i] = a[i] * prev[i] + b[i];
        }
    }
    let mut state = vec![0.0; c];
    for t in (0..len).rev() {
        let row = t * c..(t + 1) * c;
        let (a, b, o) = (&s.a[row.clone()], &s.b[row.clone()], &mut out[row]);
        for i in 0..c {
            state[i] = a[i] * state[i] + b[i];
            o[i] += state[i];
        }
    }
}

/// `(a₁, b₁) ⊕ (a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`: apply segment 1, then segment 2.
#[inline]
fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

const CHUNKS: usize = 16;

/// Three-phase chunked prefix scan of one direction over `order`.
///
/// Chunks reduce independently, an exclusive scan over chunk summaries
/// yields each chunk's incoming state, and chunks then re-scan locally.
/// The chunk count is fixed so results do not depend on the thread count.
fn prefix_states(a: &[f64], b: &[f64], len: usize, c: usize, reverse: bool) -> Vec<f64> {
    let idx = |t: usize| if reverse { len - 1 - t } else { t };
    let chunk = len.div_ceil(CHUNKS).max(1);
    let starts: Vec<usize> = (0..len).step_by(chunk).collect();

    let summaries: Vec<Vec<(f64, f64)>> = starts
        .par_iter()
        .map(|&s| {
            let end = (s + chunk).min(len);
            let mut acc = vec![(1.0, 0.0); c];
            for t in s..end {
                let r = idx(t) * c;
                for (i, v) in acc.iter_mut().enumerate() {
                    *v = combine(*v, (a[r + i], b[r + i]));
                }
            }
            acc
        })
        .collect();

    let mut carry = vec![vec![0.0; c]; starts.len()];
    let mut state = vec![0.0; c];
    for (k, summary) in summaries.iter().enumerate() {
        carry[k].copy_from_slice(&state);
        for (i, s) in state.iter_mut().enumerate() {
            // Applying a segment to an incoming state is the combine's b-slot.
            *s = combine((1.0, *s), summary[i]).1;
        }
    }

    let blocks: Vec<Vec<f64>> = starts
        .par_iter()
        .zip(carry.par_iter())
        .map(|(&s, init)| {
            let end = (s + chunk).min(len);
            let mut h = init.clone();
            let mut out = Vec::with_capacity((end - s) * c);
            for t in s..end {
                let r = idx(t) * c;
                for (i, v) in h.iter_mut().enumerate() {
                    *v = a[r + i] * *v + b[r + i];
                }
                out.extend_from_slice(&h);
            }
            out
        })
        .collect();

    let mut states = vec![0.0; len * c];
    for (t, row) in blocks.iter().flat_map(|blk| blk.chunks(c)).enumerate() {
        let r = idx(t) * c;
        states[r..r + c].copy_from_slice(row);
    }
    states
}

/// Same result as [`scan_sequential`], computed with an associative
/// prefix combine over chunks.
pub fn scan_parallel(s: &ScanInputs) -> Vec<f64> {
    let (hf, hb) = rayon::join(
        || prefix_states(&s.a, &s.b, s.len, s.channels, false),
        || prefix_states(&s.a, &s.b, s.len, s.channels, true),
    );
    hf.iter().zip(&hb).map(|(x, y)| x + y).collect()
}

/// Differentiable bidirectional scan of `a[L×c]`, `b[L×c]`.
pub fn bidirectional_scan(a: &Tensor, b: &Tensor, mode: ScanMode) -> Result<Tensor> {
    let (len, c) = a.dims2("bidirectional_scan")?;
    if b.shape() != a.shape() {
        return Err(crate::error::Error::ShapeMismatch {
            op: "bidirectional_scan",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let (hf, hb) = match mode {
        ScanMode::Sequential => states_sequential(ad, bd, len, c),
        ScanMode::Parallel => rayon::join(
            || prefix_states(ad, bd, len, c, false),
            || prefix_states(ad, bd, len, c, true),
        ),
    };
    let out: Vec<f64> = hf.iter().zip(&hb).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        vec![len, c],
        out,
        vec![a.clone(), b.clone()],
        move |ctx| {
            let a = ctx.inputs[0].data();
            let g = ctx.grad;
            let mut da = vec![0.0; len * c];
            let mut db = vec![0.0; len * c];
            // Adjoint of the forward chain runs right to left.
            let mut lam = vec![0.0; c];
            for t in (0..len).rev() {
                for i in 0..c {
                    let r = t * c + i;
                    lam[i] = g[r] + if t + 1 < len { a[r + c] * lam[i] } else { 0.0 };
                    db[r] += lam[i];
                    if t > 0 {
                        da[r] += lam[i] * hf[r - c];
                    }
                }
            }
            // Adjoint of the backward chain runs left to right.
            lam.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..len {
                for i in 0..c {
                    let r = t * c + i;
                    lam[i] = g[r] + if t > 0 { a[r - c] * lam[i] } else { 0.0 };
                    db[r] += lam[i];
                    if t + 1 < len {
                        da[r] += lam[i] * hb[r + c];
                    }
                }
            }
            vec![ctx.needs[0].then_some(da), ctx.needs[1].then_some(db)]
        },
    ))
}
