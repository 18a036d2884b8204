use super::graph::{Graph, Op, Var};
use super::kernels::{axis_extents, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Gradients of a scalar loss with respect to every trainable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

struct Acc<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Acc<T> {
    fn slot(&mut self, v: Var, len: usize) -> &mut [T] {
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn add(&mut self, v: Var, src: &[T]) {
        match &mut self.slots[v.0] {
            Some(dst) => {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(src.to_vec()),
        }
    }

    fn add_owned(&mut self, v: Var, src: Vec<T>) {
        match &mut self.slots[v.0] {
            Some(dst) => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(src),
        }
    }
}

impl<T: Real> Graph<T> {
    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Each node is visited once in reverse recording order; contributions to
    /// shared inputs accumulate additively. Intermediate gradients are dropped
    /// as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut acc = Acc {
            slots: (0..n).map(|_| None).collect(),
        };
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaves });
        }
        acc.slots[loss.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = acc.slots[idx].take() else {
                continue;
            };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), dy)?);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2().unwrap();
                    let n = val(*b).shape()[1];
                    if rg(*a) {
                        let da = acc.slot(*a, m * k);
                        gemm_nt(&dy, val(*b).data(), da, m, n, k);
                    }
                    if rg(*b) {
                        let db = acc.slot(*b, k * n);
                        gemm_tn(val(*a).data(), &dy, db, m, k, n);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc.add(*a, &dy);
                    }
                    if rg(*b) {
                        acc.add_owned(*b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc.add(*a, &dy);
                    }
                    if rg(*b) {
                        acc.add_owned(*b, dy.iter().map(|&g| -g).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let g = dy.iter().zip(val(*b).data()).map(|(&g, &x)| g * x).collect();
                        acc.add_owned(*a, g);
                    }
                    if rg(*b) {
                        let g = dy.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                        acc.add_owned(*b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*row) {
                        let m = val(*row).len();
                        let dr = acc.slot(*row, m);
                        for chunk in dy.chunks(m) {
                            for (d, &g) in dr.iter_mut().zip(chunk) {
                                *d += g;
                            }
                        }
                    }
                    if rg(*a) {
                        acc.add_owned(*a, dy);
                    }
                }
                Op::Scale(a, c) => {
                    acc.add_owned(*a, dy.iter().map(|&g| g * *c).collect());
                }
                Op::Shift(a) => acc.add_owned(*a, dy),
                Op::Relu(a) => {
                    let g = dy
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    acc.add_owned(*a, g);
                }
                Op::Sin(a) => {
                    let g = dy.iter().zip(val(*a).data()).map(|(&g, &x)| g * x.cos()).collect();
                    acc.add_owned(*a, g);
                }
                Op::Exp(a) => {
                    let g = dy.iter().zip(y).map(|(&g, &e)| g * e).collect();
                    acc.add_owned(*a, g);
                }
                Op::Sigmoid(a) => {
                    let g = dy
                        .iter()
                        .zip(y)
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect();
                    acc.add_owned(*a, g);
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    let mut g = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: T = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] = y[at(j)] * (dy[at(j)] - s);
                            }
                        }
                    }
                    acc.add_owned(*x, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let m = val(*gamma).len();
                    let mf = T::of(m as f64);
                    if rg(*beta) {
                        let db = acc.slot(*beta, m);
                        for chunk in dy.chunks(m) {
                            for (d, &g) in db.iter_mut().zip(chunk) {
                                *d += g;
                            }
                        }
                    }
                    if rg(*gamma) {
                        let dg = acc.slot(*gamma, m);
                        for (chunk, h) in dy.chunks(m).zip(xhat.chunks(m)) {
                            for j in 0..m {
                                dg[j] += chunk[j] * h[j];
                            }
                        }
                    }
                    if rg(*x) {
                        let g = val(*gamma).data();
                        let mut dx = vec![T::zero(); dy.len()];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let dyr = &dy[r * m..(r + 1) * m];
                            let h = &xhat[r * m..(r + 1) * m];
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for j in 0..m {
                                let d = dyr[j] * g[j];
                                mean_d += d;
                                mean_dh += d * h[j];
                            }
                            mean_d = mean_d / mf;
                            mean_dh = mean_dh / mf;
                            for j in 0..m {
                                let d = dyr[j] * g[j];
                                dx[r * m + j] = rs * (d - mean_d - h[j] * mean_dh);
                            }
                        }
                        acc.add_owned(*x, dx);
                    }
                }
                Op::L2Normalize { x, axis, norms } => {
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    let mut g = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: T = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                            let inv = T::one() / norms[o * inner + i];
                            for j in 0..len {
                                g[at(j)] = (dy[at(j)] - y[at(j)] * s) * inv;
                            }
                        }
                    }
                    acc.add_owned(*x, g);
                }
                Op::Concat { xs, axis } => {
                    let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                    let mut offset = 0;
                    let total = node.value.shape()[*axis];
                    for &x in xs {
                        let len = val(x).shape()[*axis];
                        if rg(x) {
                            let dst = acc.slot(x, val(x).len());
                            for o in 0..outer {
                                let src = &dy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                for (d, &s) in dst[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let src_shape = val(*x).shape();
                    let (outer, len, inner) = axis_extents(src_shape, *axis);
                    let w = node.value.shape()[*axis];
                    let dst = acc.slot(*x, val(*x).len());
                    for o in 0..outer {
                        let d = &mut dst[(o * len + start) * inner..(o * len + start + w) * inner];
                        for (d, &s) in d.iter_mut().zip(&dy[o * w * inner..(o + 1) * w * inner]) {
                            *d += s;
                        }
                    }
                }
                Op::Reshape(x) => acc.add_owned(*x, dy),
                Op::Transpose(x) => {
                    let (r, c) = node.value.dims2().unwrap();
                    let mut g = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] = dy[i * c + j];
                        }
                    }
                    acc.add_owned(*x, g);
                }
                Op::Sum(x) => {
                    let g = dy[0];
                    acc.add_owned(*x, vec![g; val(*x).len()]);
                }
                Op::Mean(x) => {
                    let len = val(*x).len();
                    let g = dy[0] / T::of(len as f64);
                    acc.add_owned(*x, vec![g; len]);
                }
                Op::SumAxis { x, axis } => {
                    let (outer, len, inner) = axis_extents(val(*x).shape(), *axis);
                    let mut g = vec![T::zero(); val(*x).len()];
                    for o in 0..outer {
                        for j in 0..len {
                            g[(o * len + j) * inner..(o * len + j + 1) * inner]
                                .copy_from_slice(&dy[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc.add_owned(*x, g);
                }
                Op::SquaredError(a, b) => {
                    let two = T::of(2.0) * dy[0];
                    let diff: Vec<T> = val(*a)
                        .data()
                        .iter()
                        .zip(val(*b).data())
                        .map(|(&x, &t)| two * (x - t))
                        .collect();
                    if rg(*b) {
                        acc.add_owned(*b, diff.iter().map(|&d| -d).collect());
                    }
                    if rg(*a) {
                        acc.add_owned(*a, diff);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}
