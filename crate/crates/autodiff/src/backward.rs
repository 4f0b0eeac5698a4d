use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::graph::{silu_derivative, Graph, Op, Var};
use crate::kernels;
use crate::tensor::{numel, Tensor};

/// Adjoints of every gradient-carrying leaf reached from the loss.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`; zero-filled when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<T: Element> Graph<T> {
    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// parameter leaf. Tangents recorded during the forward pass are ignored.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(AutodiffError::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        let mut grads = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = adj[i].take() else { continue };
            if let Op::Leaf = node.op {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: "backward" });
                }
                grads.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            if let Some(f) = node.op.primitive().and_then(|p| self.prims.derivative_factor(p)) {
                let f = T::from_f64(f);
                g.iter_mut().for_each(|v| *v = *v * f);
            }
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
        }

        // Parameters that exist but did not reach the loss get zero gradients.
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor<T>, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let n = |v: Var| numel(self.shape(v));
        match op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(&mut adj[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut adj[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut adj[b.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], g.len(), |buf| {
                        buf.iter_mut().zip(g.iter().zip(xb)).for_each(|(d, (&gv, &y))| *d = *d + gv * y)
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut adj[b.0], g.len(), |buf| {
                        buf.iter_mut().zip(g.iter().zip(xa)).for_each(|(d, (&gv, &x))| *d = *d + gv * x)
                    });
                }
            }
            Op::Scale(a, k) => {
                let k = T::from_f64(*k);
                accumulate(&mut adj[a.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * k)
                });
            }
            Op::MatMul { a, b, trans_b, dims } => {
                if self.wants(*a) {
                    let xb = self.value(*b).data();
                    accumulate(&mut adj[a.0], n(*a), |buf| {
                        kernels::matmul_grad_lhs(*dims, g, xb, *trans_b, buf)
                    });
                }
                if self.wants(*b) {
                    let xa = self.value(*a).data();
                    accumulate(&mut adj[b.0], n(*b), |buf| {
                        kernels::matmul_grad_rhs(*dims, xa, g, *trans_b, buf)
                    });
                }
            }
            Op::Reshape(a) => add_into(&mut adj[a.0], g),
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute(g, out.shape(), &inv);
                add_into(&mut adj[a.0], &back);
            }
            Op::Broadcast(a) => {
                let back = kernels::reduce_broadcast(g, self.shape(*a), out.shape());
                add_into(&mut adj[a.0], &back);
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let part = kernels::slice_axis(g, out.shape(), *axis, start, len);
                        add_into(&mut adj[v.0], &part);
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let len = out.shape()[*axis];
                let shape = self.shape(*input);
                accumulate(&mut adj[input.0], numel(shape), |buf| {
                    kernels::unslice_axis_add(buf, shape, *axis, *start, g, len)
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                accumulate(&mut adj[a.0], n(*a), |buf| buf.iter_mut().for_each(|d| *d = *d + gv));
            }
            Op::SumLast(a) => {
                let w = *self.shape(*a).last().unwrap();
                accumulate(&mut adj[a.0], n(*a), |buf| {
                    for (row, &gv) in buf.chunks_exact_mut(w.max(1)).zip(g) {
                        row.iter_mut().for_each(|d| *d = *d + gv);
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                accumulate(&mut adj[a.0], g.len(), |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(d, (&gv, &xv))| *d = *d + gv * silu_derivative(xv))
                });
            }
            Op::Sin(a) => {
                let x = self.value(*a).data();
                accumulate(&mut adj[a.0], g.len(), |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(d, (&gv, &xv))| *d = *d + gv * xv.cos())
                });
            }
            Op::Cos(a) => {
                let x = self.value(*a).data();
                accumulate(&mut adj[a.0], g.len(), |buf| {
                    buf.iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(d, (&gv, &xv))| *d = *d - gv * xv.sin())
                });
            }
            Op::Softmax(a) => {
                let w = *out.shape().last().unwrap();
                let back = kernels::softmax_jacobian_apply(out.data(), g, w);
                add_into(&mut adj[a.0], &back);
            }
            Op::RmsNormalize { input, eps } => {
                let x = self.value(*input).data();
                let w = *out.shape().last().unwrap();
                let inv = kernels::inv_rms_rows(x, w, T::from_f64(*eps));
                let back = kernels::rms_jacobian_apply(x, &inv, g, w);
                add_into(&mut adj[input.0], &back);
            }
            Op::Conv1d { x, w, dims } => {
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    accumulate(&mut adj[x.0], n(*x), |buf| kernels::conv1d_grad_input(*dims, g, wv, buf));
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    accumulate(&mut adj[w.0], n(*w), |buf| kernels::conv1d_grad_kernel(*dims, xv, g, buf));
                }
            }
            Op::Gather { table, indices } => {
                let width = self.shape(*table)[1];
                accumulate(&mut adj[table.0], n(*table), |buf| {
                    for (row, &i) in indices.iter().enumerate() {
                        let src = &g[row * width..(row + 1) * width];
                        for (d, &v) in buf[i * width..(i + 1) * width].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
