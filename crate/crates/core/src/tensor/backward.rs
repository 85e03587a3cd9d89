use std::collections::{HashMap, HashSet};

use super::ops::{gelu_derivative, matmul_kernel, split_axis, transpose_kernel, Op};
use super::{Float, Tensor};
use crate::error::{Error, Result};

impl<T: Float> Tensor<T> {
    /// Accumulates `d self / d leaf` into every trainable leaf reachable from `self`.
    ///
    /// `self` must hold exactly one element. Gradients add onto whatever the
    /// leaves already hold; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.op().is_none() {
            self.accumulate_grad(&[T::one()]);
            return Ok(());
        }

        let order = topo_order(self);
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            let op = node.op().expect("interior nodes carry an op");
            let grads = input_grads(op, node, &g);
            for (input, grad) in op.inputs().into_iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if input.op().is_some() {
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(input.id(), grad);
                        }
                    }
                } else {
                    input.accumulate_grad(&grad);
                }
            }
        }
        Ok(())
    }
}

/// Interior nodes reachable from `root`, children before parents.
fn topo_order<T: Float>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, inputs expanded?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for input in op.inputs() {
                if input.op().is_some() && input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn input_grads<T: Float>(op: &Op<T>, out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Matmul(a, b) => {
            let (m, k) = a.dims2().expect("matrix");
            let n = b.dims2().expect("matrix").1;
            let da = a.requires_grad().then(|| {
                let bt = transpose_kernel(&b.data(), k, n);
                matmul_kernel(g, &bt, m, n, k)
            });
            let db = b.requires_grad().then(|| {
                let at = transpose_kernel(&a.data(), m, k);
                matmul_kernel(&at, g, k, m, n)
            });
            vec![da, db]
        }
        Op::Transpose(a) => {
            let (m, n) = a.dims2().expect("matrix");
            vec![Some(transpose_kernel(g, n, m))]
        }
        Op::Add(..) => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub(..) => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let da = a.requires_grad().then(|| g.iter().zip(b.data().iter()).map(|(&g, &y)| g * y).collect());
            let db = b.requires_grad().then(|| g.iter().zip(a.data().iter()).map(|(&g, &x)| g * x).collect());
            vec![da, db]
        }
        Op::Scale(_, c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
        Op::AddRow(_, row) => {
            let d = row.numel();
            let mut drow = vec![T::zero(); d];
            for chunk in g.chunks(d) {
                drow.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
            }
            vec![Some(g.to_vec()), Some(drow)]
        }
        Op::MulCol(x, col) => {
            let (_, n) = x.dims2().expect("matrix");
            let c = col.data();
            let dx = x.requires_grad().then(|| {
                g.iter().enumerate().map(|(i, &v)| v * c[i / n]).collect()
            });
            let dc = col.requires_grad().then(|| {
                let xd = x.data();
                g.chunks(n)
                    .zip(xd.chunks(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                    .collect()
            });
            vec![dx, dc]
        }
        Op::Sum(a) => vec![Some(vec![g[0]; a.numel()])],
        Op::MeanRows(a) => {
            let (m, _) = a.dims2().expect("matrix");
            let inv = T::one() / T::lit(m as f64);
            let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
            vec![Some(row.iter().copied().cycle().take(a.numel()).collect())]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Softmax { axis, .. } => {
            let y = out.data();
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + j;
                    let dot: T = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::CrossEntropy { targets, probs, .. } => {
            let n = targets.len();
            let v = probs.len() / n;
            let scale = g[0] / T::lit(n as f64);
            let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                dx[i * v + t] -= scale;
            }
            vec![Some(dx)]
        }
        Op::LayerNorm { x, gain, offset, xhat, rstd } => {
            let d = gain.numel();
            let gd = gain.data();
            let mut dx = vec![T::zero(); g.len()];
            let mut dgain = vec![T::zero(); d];
            let mut doffset = vec![T::zero(); d];
            let inv_d = T::one() / T::lit(d as f64);
            for (r, &s) in rstd.iter().enumerate() {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for j in 0..d {
                    dgain[j] += gr[j] * hr[j];
                    doffset[j] += gr[j];
                    let dh = gr[j] * gd[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                }
                for j in 0..d {
                    let dh = gr[j] * gd[j];
                    dx[r * d + j] = s * (dh - sum_dh * inv_d - hr[j] * sum_dh_h * inv_d);
                }
            }
            vec![
                x.requires_grad().then_some(dx),
                gain.requires_grad().then_some(dgain),
                offset.requires_grad().then_some(doffset),
            ]
        }
        Op::Gelu(x) => {
            let xd = x.data();
            vec![Some(g.iter().zip(xd.iter()).map(|(&g, &x)| g * gelu_derivative(x)).collect())]
        }
        Op::Rope { x, positions, table } => {
            let dk = x.dims2().expect("matrix").1;
            let mut dx = g.to_vec();
            table
                .rotate(&mut dx, dk, positions, true)
                .expect("positions validated in forward");
            vec![Some(dx)]
        }
        Op::CausalMask(x, offset) => {
            let (m, n) = x.dims2().expect("matrix");
            let mut dx = g.to_vec();
            for i in 0..m {
                for j in (i + offset + 1).min(n)..n {
                    dx[i * n + j] = T::zero();
                }
            }
            vec![Some(dx)]
        }
        Op::Dropout(_, mask) => vec![Some(g.iter().zip(mask).map(|(&g, &m)| g * m).collect())],
        Op::NarrowCols(x, start) => {
            let (m, n) = x.dims2().expect("matrix");
            let len = g.len() / m;
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(dx)]
        }
        Op::ConcatCols(parts) => {
            let m = parts[0].dims2().expect("matrix").0;
            let total = g.len() / m;
            let mut col = 0;
            parts
                .iter()
                .map(|p| {
                    let w = p.dims2().expect("matrix").1;
                    let dp = (0..m)
                        .flat_map(|i| g[i * total + col..i * total + col + w].iter().copied())
                        .collect();
                    col += w;
                    Some(dp)
                })
                .collect()
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            parts
                .iter()
                .map(|p| {
                    let len = p.numel();
                    let dp = g[at..at + len].to_vec();
                    at += len;
                    Some(dp)
                })
                .collect()
        }
        Op::IndexRows(x, rows) => {
            let n = x.dims2().expect("matrix").1;
            let mut dx = vec![T::zero(); x.numel()];
            for (j, &r) in rows.iter().enumerate() {
                dx[r * n..(r + 1) * n]
                    .iter_mut()
                    .zip(&g[j * n..(j + 1) * n])
                    .for_each(|(a, &b)| *a += b);
            }
            vec![Some(dx)]
        }
        Op::ScatterRows(parts) => {
            let width = out.dims2().expect("matrix").1;
            parts
                .iter()
                .map(|(_, rows)| {
                    Some(
                        rows.iter()
                            .flat_map(|&r| g[r * width..(r + 1) * width].iter().copied())
                            .collect(),
                    )
                })
                .collect()
        }
        Op::Gather(x, positions) => {
            let mut dx = vec![T::zero(); x.numel()];
            for (&p, &v) in positions.iter().zip(g) {
                dx[p] += v;
            }
            vec![Some(dx)]
        }
        Op::NormalizeRows(x) => {
            let (_, n) = x.dims2().expect("matrix");
            let xd = x.data();
            let y = out.data();
            let mut dx = vec![T::zero(); xd.len()];
            for r in 0..xd.len() / n {
                let s: T = xd[r * n..(r + 1) * n].iter().copied().sum();
                let dot: T = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                for j in 0..n {
                    dx[r * n + j] = (g[r * n + j] - dot) / s;
                }
            }
            vec![Some(dx)]
        }
    }
}
