use std::collections::HashSet;

use crate::error::{Result, TensorError};
use crate::ops::{for_each_broadcast, matmul_nt, matmul_tn, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<F: Scalar> Tensor<F> {
    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable tensor that requires them; call [`Tensor::zero_grad`] on
    /// leaves between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let order = topo_order(self);
        self.accumulate_grad(&[F::one()]);
        // `order` has parents before children; walk it back to front so each
        // node's gradient is complete before it is pushed to its parents.
        for node in order.iter().rev() {
            let grad = match node.grad() {
                Some(g) => g,
                None => continue, // not on any path to the loss
            };
            node.push_to_parents(&grad);
        }
        Ok(())
    }

    fn push_to_parents(&self, g: &[F]) {
        let parents = &self.inner.parents;
        match &self.inner.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (&parents[0], &parents[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt(g, &b.data(), &mut da, m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn(&a.data(), g, &mut db, m, k, n);
                    b.accumulate_grad(&db);
                }
            }
            Op::Transpose => {
                let a = &parents[0];
                if a.requires_grad() {
                    let (n, m) = (self.shape()[0], self.shape()[1]);
                    let mut da = vec![F::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = g[i * m + j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::Reshape => {
                let a = &parents[0];
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                self.push_binary(g);
            }
            Op::AddScalar(_) => {
                let a = &parents[0];
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }
            Op::MulScalar(c) => self.push_unary(g, |gi, _, _| gi * *c),
            Op::DivScalar(c) => self.push_unary(g, |gi, _, _| gi / *c),
            Op::RsubScalar(_) => self.push_unary(g, |gi, _, _| -gi),
            Op::Exp => self.push_unary(g, |gi, _, out| gi * out),
            Op::Sqrt => self.push_unary(g, |gi, _, out| {
                if gi == F::zero() {
                    F::zero()
                } else {
                    gi * F::from_f64_lossy(0.5) / out
                }
            }),
            Op::Relu => self.push_unary(g, |gi, x, _| if x > F::zero() { gi } else { F::zero() }),
            Op::EluPlusOne => self.push_unary(g, |gi, x, out| {
                if x > F::zero() {
                    gi
                } else {
                    gi * out // d/dx exp(x) = exp(x) = out on this branch
                }
            }),
            Op::Gelu => self.push_unary(g, |gi, x, _| gi * crate::ops::gelu_derivative(x)),
            Op::ClampMin(lo) => {
                let lo = *lo;
                self.push_unary(g, move |gi, x, _| if x > lo { gi } else { F::zero() })
            }
            Op::Clamp(lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.push_unary(
                    g,
                    move |gi, x, _| if x > lo && x < hi { gi } else { F::zero() },
                )
            }
            Op::SumAll => {
                let a = &parents[0];
                if a.requires_grad() {
                    a.accumulate_grad(&vec![g[0]; a.numel()]);
                }
            }
            Op::MeanAll => {
                let a = &parents[0];
                if a.requires_grad() {
                    let scale = g[0] / F::from_usize_lossy(a.numel());
                    a.accumulate_grad(&vec![scale; a.numel()]);
                }
            }
            Op::SumLastKeep => {
                let a = &parents[0];
                if a.requires_grad() {
                    let cols = *a.shape().last().unwrap();
                    let rows = a.numel() / cols;
                    let mut da = vec![F::zero(); a.numel()];
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] = g[r];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::Dropout { mask } => {
                let a = &parents[0];
                if a.requires_grad() {
                    let da: Vec<F> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::GradHook { scale } => {
                let a = &parents[0];
                if a.requires_grad() {
                    let da: Vec<F> = g.iter().zip(scale).map(|(&gi, &s)| gi * s).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::LayerNorm { mean, inv_std } => {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                let cols = gamma.numel();
                let rows = x.numel() / cols;
                let cols_f = F::from_usize_lossy(cols);
                let xd = x.data();
                let gd = gamma.data();
                let mut dx = vec![F::zero(); x.numel()];
                let mut dgamma = vec![F::zero(); cols];
                let mut dbeta = vec![F::zero(); cols];
                for r in 0..rows {
                    let is = inv_std[r];
                    let mu = mean[r];
                    let base = r * cols;
                    // x̂ and γ⊙dy row sums
                    let mut sum_dyg = F::zero();
                    let mut sum_dyg_xhat = F::zero();
                    for c in 0..cols {
                        let xhat = (xd[base + c] - mu) * is;
                        let dyg = g[base + c] * gd[c];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                        dgamma[c] += g[base + c] * xhat;
                        dbeta[c] += g[base + c];
                    }
                    let m1 = sum_dyg / cols_f;
                    let m2 = sum_dyg_xhat / cols_f;
                    for c in 0..cols {
                        let xhat = (xd[base + c] - mu) * is;
                        dx[base + c] = is * (g[base + c] * gd[c] - m1 - xhat * m2);
                    }
                }
                drop(xd);
                drop(gd);
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&dgamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&dbeta);
                }
            }
        }
    }

    fn push_unary(&self, g: &[F], f: impl Fn(F, F, F) -> F) {
        let a = &self.inner.parents[0];
        if !a.requires_grad() {
            return;
        }
        let xd = a.data();
        let out = self.data();
        let da: Vec<F> = g
            .iter()
            .zip(xd.iter())
            .zip(out.iter())
            .map(|((&gi, &x), &o)| f(gi, x, o))
            .collect();
        drop(xd);
        drop(out);
        a.accumulate_grad(&da);
    }

    fn push_binary(&self, g: &[F]) {
        let (a, b) = (&self.inner.parents[0], &self.inner.parents[1]);
        let mut da = if a.requires_grad() {
            Some(vec![F::zero(); a.numel()])
        } else {
            None
        };
        let mut db = if b.requires_grad() {
            Some(vec![F::zero(); b.numel()])
        } else {
            None
        };
        let ad = a.data();
        let bd = b.data();
        let out_shape = self.shape();
        match &self.inner.op {
            Op::Add => {
                for_each_broadcast::<F>(out_shape, a.shape(), b.shape(), |o, li, ri| {
                    if let Some(da) = da.as_mut() {
                        da[li] += g[o];
                    }
                    if let Some(db) = db.as_mut() {
                        db[ri] += g[o];
                    }
                });
            }
            Op::Sub => {
                for_each_broadcast::<F>(out_shape, a.shape(), b.shape(), |o, li, ri| {
                    if let Some(da) = da.as_mut() {
                        da[li] += g[o];
                    }
                    if let Some(db) = db.as_mut() {
                        db[ri] -= g[o];
                    }
                });
            }
            Op::Mul => {
                for_each_broadcast::<F>(out_shape, a.shape(), b.shape(), |o, li, ri| {
                    if let Some(da) = da.as_mut() {
                        da[li] += g[o] * bd[ri];
                    }
                    if let Some(db) = db.as_mut() {
                        db[ri] += g[o] * ad[li];
                    }
                });
            }
            Op::Div => {
                for_each_broadcast::<F>(out_shape, a.shape(), b.shape(), |o, li, ri| {
                    let denom = bd[ri];
                    if let Some(da) = da.as_mut() {
                        da[li] += g[o] / denom;
                    }
                    if let Some(db) = db.as_mut() {
                        db[ri] -= g[o] * ad[li] / (denom * denom);
                    }
                });
            }
            _ => unreachable!(),
        }
        drop(ad);
        drop(bd);
        if let Some(da) = da {
            a.accumulate_grad(&da);
        }
        if let Some(db) = db {
            b.accumulate_grad(&db);
        }
    }
}

/// Iterative post-order DFS over the grad-requiring subgraph: every node
/// appears after all of its parents.
fn topo_order<F: Scalar>(root: &Tensor<F>) -> Vec<Tensor<F>> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited: HashSet<usize> = HashSet::new();
    // (node, next parent index to visit)
    let mut stack: Vec<(Tensor<F>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, idx)) = stack.pop() {
        let parents = &node.inner.parents;
        if idx < parents.len() {
            stack.push((node.clone(), idx + 1));
            let p = &parents[idx];
            if p.requires_grad() && visited.insert(p.id()) {
                stack.push((p.clone(), 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use crate::{Tensor64, TensorError};

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor64::from_vec(&[4], vec![0.5, -1.0, 2.0, 3.0], true).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let x = Tensor64::from_vec(&[3], vec![0.5, -1.0, 2.0], true).unwrap();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor64::ones(&[3], true);
        assert!(matches!(
            x.backward(),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn all_ones_hook_leaves_gradients_bitwise_unchanged() {
        let data = vec![0.37, -1.25, 2.5, 0.125];
        let run = |hook: bool| {
            let x = Tensor64::from_vec(&[4], data.clone(), true).unwrap();
            let y = if hook {
                x.attach_grad_hook(&[1.0; 4]).unwrap()
            } else {
                x.clone()
            };
            y.gelu().mul(&y).unwrap().sum_all().backward().unwrap();
            x.grad().unwrap()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn all_zeros_hook_annihilates_gradients() {
        let x = Tensor64::from_vec(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let h = x.attach_grad_hook(&[0.0; 3]).unwrap();
        h.mul(&h).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let x = Tensor64::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
        x.sum_all().backward().unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let x = Tensor64::ones(&[2], true);
        let w = Tensor64::ones(&[2], false);
        x.mul(&w).unwrap().sum_all().backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }
}
