//! Linear algebra, elementwise arithmetic, and reshaping.

use super::{GradCtx, Tensor};
use crate::error::{Error, Result};

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tensor {
    /// Matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self, rhs));
        }
        let out = matmul_raw(self.data(), rhs.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |c: &GradCtx<'_>| {
                let (a, b) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    c.needs[0].then(|| matmul_bt_raw(c.grad, b, m, n, k)),
                    c.needs[1].then(|| matmul_at_raw(a, c.grad, m, k, n)),
                ]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let out = transpose_raw(self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], out, vec![self.clone()], move |c| {
            vec![Some(transpose_raw(c.grad, n, m))]
        }))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            |c| vec![Some(c.grad.to_vec())],
        ))
    }

    fn zip_same(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape() != rhs.shape() {
            return Err(mismatch(op, self, rhs));
        }
        Ok(self.data().iter().zip(rhs.data()).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(rhs, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            |c| vec![c.needs[0].then(|| c.grad.to_vec()), c.needs[1].then(|| c.grad.to_vec())],
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(rhs, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            |c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| c.grad.iter().map(|g| -g).collect()),
                ]
            },
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(rhs, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            |c| {
                let (a, b) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    c.needs[0].then(|| c.grad.iter().zip(b).map(|(g, b)| g * b).collect()),
                    c.needs[1].then(|| c.grad.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            },
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |c| {
            vec![Some(c.grad.iter().map(|g| g * s).collect())]
        })
    }

    /// `x[i, j] + bias[i]` for `x[m×n]`, `bias[m]`.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_bias_rows")?;
        if bias.len() != m {
            return Err(mismatch("add_bias_rows", self, bias));
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks(n)
            .zip(b)
            .flat_map(|(row, &bv)| row.iter().map(move |v| v + bv))
            .collect();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            move |c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| c.grad.chunks(n).map(|r| r.iter().sum()).collect()),
                ]
            },
        ))
    }

    /// `x[i, j] + bias[j]` for `x[m×n]`, `bias[n]`.
    pub fn add_bias_cols(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_bias_cols")?;
        if bias.len() != n {
            return Err(mismatch("add_bias_cols", self, bias));
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            move |c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| {
                        let mut acc = vec![0.0; n];
                        for row in c.grad.chunks(n) {
                            acc.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                        acc
                    }),
                ]
            },
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Tensor::from_op(vec![len, n], out, vec![self.clone()], move |c| {
            let mut g = vec![0.0; m * n];
            g[start * n..(start + len) * n].copy_from_slice(c.grad);
            vec![Some(g)]
        }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(Tensor::from_op(vec![m, len], out, vec![self.clone()], move |c| {
            let mut g = vec![0.0; m * n];
            for (dst, src) in g.chunks_mut(n).zip(c.grad.chunks(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            vec![Some(g)]
        }))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| crate::error::invalid("concat_rows of nothing"))?;
        let (_, n) = first.dims2("concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            let (m, n2) = p.dims2("concat_rows")?;
            if n2 != n {
                return Err(mismatch("concat_rows", first, p));
            }
            rows.push(m);
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        let total = rows.iter().sum();
        Ok(Tensor::from_op(vec![total, n], data, parts.to_vec(), move |c| {
            let mut offset = 0;
            rows.iter()
                .zip(c.needs)
                .map(|(&m, &need)| {
                    let g = need.then(|| c.grad[offset * n..(offset + m) * n].to_vec());
                    offset += m;
                    g
                })
                .collect()
        }))
    }

    /// Row `r` of the result is row `rows[r]` of `self`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2("gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(crate::error::invalid("gather_rows index out of range"));
        }
        let src = self.data();
        let out = rows.iter().flat_map(|&r| src[r * n..(r + 1) * n].iter().copied()).collect();
        let rows = rows.to_vec();
        Ok(Tensor::from_op(vec![rows.len(), n], out, vec![self.clone()], move |c| {
            let mut g = vec![0.0; m * n];
            for (dst, up) in rows.iter().zip(c.grad.chunks(n)) {
                g[dst * n..(dst + 1) * n].iter_mut().zip(up).for_each(|(a, b)| *a += b);
            }
            vec![Some(g)]
        }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let len = self.len();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |c| {
            vec![Some(vec![c.grad[0]; len])]
        })
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len() as f64)
    }
}
