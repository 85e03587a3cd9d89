use std::sync::Arc;

use rand::Rng;

use super::{flops, Float, Tensor};
use crate::error::{Error, Result};
use crate::rope::RopeTable;

/// Operation that produced a non-leaf tensor, with whatever the backward rule needs.
pub(crate) enum Op<T: Float> {
    Matmul(Tensor<T>, Tensor<T>),
    Transpose(Tensor<T>),
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddRow(Tensor<T>, Tensor<T>),
    MulCol(Tensor<T>, Tensor<T>),
    Sum(Tensor<T>),
    MeanRows(Tensor<T>),
    Reshape(Tensor<T>),
    Softmax {
        input: Tensor<T>,
        axis: usize,
    },
    CrossEntropy {
        logits: Tensor<T>,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Tensor<T>,
        gain: Tensor<T>,
        offset: Tensor<T>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Tensor<T>),
    Rope {
        x: Tensor<T>,
        positions: Vec<i64>,
        table: Arc<RopeTable>,
    },
    CausalMask(Tensor<T>, usize),
    Dropout(Tensor<T>, Vec<T>),
    NarrowCols(Tensor<T>, usize),
    ConcatCols(Vec<Tensor<T>>),
    ConcatRows(Vec<Tensor<T>>),
    IndexRows(Tensor<T>, Vec<usize>),
    ScatterRows(Vec<(Tensor<T>, Vec<usize>)>),
    Gather(Tensor<T>, Vec<usize>),
    NormalizeRows(Tensor<T>),
}

impl<T: Float> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddRow(a, b) | Op::MulCol(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::Reshape(a)
            | Op::Gelu(a)
            | Op::CausalMask(a, _)
            | Op::Dropout(a, _)
            | Op::NarrowCols(a, _)
            | Op::IndexRows(a, _)
            | Op::Gather(a, _)
            | Op::NormalizeRows(a) => vec![a],
            Op::Softmax { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::LayerNorm { x, gain, offset, .. } => vec![x, gain, offset],
            Op::Rope { x, .. } => vec![x],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().collect(),
            Op::ScatterRows(parts) => parts.iter().map(|(t, _)| t).collect(),
        }
    }
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let (a, b) = (a.data(), b.data());
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// `c = a · b` for row-major `a[m×k]`, `b[k×n]`.
pub(crate) fn matmul_kernel<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_kernel<T: Float>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) const GELU_C: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<T: Float> Tensor<T> {
    /// Matrix product; counts `2·m·n·k` FLOPs.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        flops::add(2 * (m * n * k) as u64);
        let c = matmul_kernel(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(vec![m, n], c, Op::Matmul(self.clone(), other.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let out = transpose_kernel(&self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], out, Op::Transpose(self.clone())))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = zip_map(self, other, |x, y| x + y);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = zip_map(self, other, |x, y| x - y);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let out = zip_map(self, other, |x, y| x * y);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(self.clone(), c))
    }

    /// Adds `row` (length = last extent) to every row.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap_or(&1);
        if row.numel() != d {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let r = row.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % d])
            .collect();
        drop(r);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::AddRow(self.clone(), row.clone())))
    }

    /// Scales row `i` of a matrix by `col[i]`.
    pub fn mul_col(&self, col: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if col.numel() != m {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: self.shape().to_vec(),
                rhs: col.shape().to_vec(),
            });
        }
        let c = col.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * c[i / n])
            .collect();
        drop(c);
        Ok(Tensor::from_op(vec![m, n], out, Op::MulCol(self.clone(), col.clone())))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Column means of a matrix: `[m×n] → [n]`.
    pub fn mean_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); n];
        for row in self.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let inv = T::one() / T::lit(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(Tensor::from_op(vec![n], out, Op::MeanRows(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone())))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (x[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] = out[idx(i)] / total;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            Op::Softmax {
                input: self.clone(),
                axis,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `self[n×V]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (n, v) = self.dims2()?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} >= vocabulary {v}")));
        }
        let x = self.data();
        let mut probs = vec![T::zero(); n * v];
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&z| (z - max).exp()).sum();
            let log_z = max + total.ln();
            for (p, &z) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (z - log_z).exp();
            }
            loss += log_z - row[t];
        }
        drop(x);
        loss = loss / T::lit(n as f64);
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Normalises over the last axis, then applies `gain ⊙ x̂ + offset`.
    pub fn layer_norm(&self, gain: &Tensor<T>, offset: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap_or(&1);
        if gain.numel() != d || offset.numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let x = self.data();
        let (g, b) = (gain.data(), offset.data());
        let rows = x.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        drop((x, g, b));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                offset: offset.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| gelu_value(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Gelu(self.clone()))
    }

    /// Rotates consecutive coordinate pairs of each row of `self[n×d_k]` by the
    /// angle for that row's position. Negative positions rotate backwards.
    pub fn rope(&self, positions: &[i64], table: &Arc<RopeTable>) -> Result<Tensor<T>> {
        let (n, dk) = self.dims2()?;
        if positions.len() != n {
            return Err(Error::Shape {
                op: "rope",
                lhs: self.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let mut out = self.to_vec();
        table.rotate(&mut out, dk, positions, false)?;
        Ok(Tensor::from_op(
            vec![n, dk],
            out,
            Op::Rope {
                x: self.clone(),
                positions: positions.to_vec(),
                table: Arc::clone(table),
            },
        ))
    }

    /// Sets entry `(i, j)` of a score matrix to `-inf` when `j > i + offset`.
    pub fn causal_mask(&self, offset: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let mut out = self.to_vec();
        for i in 0..m {
            for j in (i + offset + 1).min(n)..n {
                out[i * n + j] = T::neg_infinity();
            }
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::CausalMask(self.clone(), offset)))
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Tensor<T> {
        if rate <= 0.0 {
            return self.clone();
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Dropout(self.clone(), mask))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if start + len > n {
            return Err(Error::Index(format!(
                "columns {start}..{} of a {m}×{n} matrix",
                start + len
            )));
        }
        let x = self.data();
        let out = (0..m)
            .flat_map(|i| x[i * n + start..i * n + start + len].iter().copied())
            .collect();
        drop(x);
        Ok(Tensor::from_op(vec![m, len], out, Op::NarrowCols(self.clone(), start)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let m = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for i in 0..m {
            for (d, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let n = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?.dims2()?.1;
        let mut rows = 0;
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(vec![rows, n], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Gathers whole rows (embedding lookup, expert dispatch).
    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} of a {m}-row matrix")));
        }
        let x = self.data();
        let out = rows
            .iter()
            .flat_map(|&r| x[r * n..(r + 1) * n].iter().copied())
            .collect();
        drop(x);
        Ok(Tensor::from_op(vec![rows.len(), n], out, Op::IndexRows(self.clone(), rows.to_vec())))
    }

    /// `out[rows[j]] += src[j]` for every `(src, rows)` part, into an `n_rows×width` zero matrix.
    pub fn scatter_rows(n_rows: usize, width: usize, parts: Vec<(Tensor<T>, Vec<usize>)>) -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); n_rows * width];
        for (src, rows) in &parts {
            let (m, n) = src.dims2()?;
            if n != width || m != rows.len() {
                return Err(Error::Shape {
                    op: "scatter_rows",
                    lhs: vec![rows.len(), width],
                    rhs: src.shape().to_vec(),
                });
            }
            let s = src.data();
            for (j, &r) in rows.iter().enumerate() {
                if r >= n_rows {
                    return Err(Error::Index(format!("scatter row {r} >= {n_rows}")));
                }
                out[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&s[j * width..(j + 1) * width])
                    .for_each(|(o, &v)| *o += v);
            }
        }
        Ok(Tensor::from_op(vec![n_rows, width], out, Op::ScatterRows(parts)))
    }

    /// Picks entries by flat row-major index into a 1-D tensor.
    pub fn gather(&self, positions: &[usize]) -> Result<Tensor<T>> {
        let len = self.numel();
        if let Some(&bad) = positions.iter().find(|&&p| p >= len) {
            return Err(Error::Index(format!("flat index {bad} >= {len}")));
        }
        let x = self.data();
        let out = positions.iter().map(|&p| x[p]).collect();
        drop(x);
        Ok(Tensor::from_op(vec![positions.len()], out, Op::Gather(self.clone(), positions.to_vec())))
    }

    /// Divides each row of a matrix by its sum.
    pub fn normalize_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let x = self.data();
        let mut out = x.clone();
        for row in out.chunks_mut(n) {
            let s: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        drop(x);
        Ok(Tensor::from_op(vec![m, n], out, Op::NormalizeRows(self.clone())))
    }
}

pub(crate) fn gelu_value<T: Float>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let u = c * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_derivative<T: Float>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let u = c * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// `(outer, len, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
