use rand::Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Recorded operation; carries whatever the backward pass needs beyond the
/// parent tensors themselves.
pub(crate) enum Op<F: Scalar> {
    Leaf,
    Matmul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(F),
    MulScalar(F),
    DivScalar(F),
    /// c - x
    RsubScalar(F),
    Exp,
    Sqrt,
    Relu,
    EluPlusOne,
    Gelu,
    ClampMin(F),
    Clamp(F, F),
    SumAll,
    MeanAll,
    SumLastKeep,
    /// Mask entries are 0 or 1/(1-p); forward and backward both multiply by it.
    Dropout { mask: Vec<F> },
    /// Per-row statistics saved from the forward pass.
    LayerNorm { mean: Vec<F>, inv_std: Vec<F> },
    /// Detached per-element scale applied to the incoming gradient.
    GradHook { scale: Vec<F> },
}

// ── raw matmul kernels ──────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
pub(crate) fn matmul_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
pub(crate) fn matmul_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
pub(crate) fn matmul_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let crow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

// ── broadcasting ────────────────────────────────────────────────────────

/// Output shape of trailing-dimension (numpy-style) broadcasting.
pub(crate) fn broadcast_shape(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>> {
    let ndim = lhs.len().max(rhs.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = dim_from_right(lhs, ndim, i);
        let db = dim_from_right(rhs, ndim, i);
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], ndim: usize, i: usize) -> usize {
    let pad = ndim - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Row-major strides, with stride 0 on broadcast (size-1 or missing) axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let pad = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Iterates flat indices of the broadcast output together with the mapped
/// flat indices into both operands.
pub(crate) fn for_each_broadcast<F: Scalar>(
    out_shape: &[usize],
    lhs_shape: &[usize],
    rhs_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let _ = std::marker::PhantomData::<F>;
    let numel: usize = out_shape.iter().product();
    let ndim = out_shape.len();
    let ls = broadcast_strides(lhs_shape, out_shape);
    let rs = broadcast_strides(rhs_shape, out_shape);
    let mut coords = vec![0usize; ndim];
    let mut li = 0usize;
    let mut ri = 0usize;
    for flat in 0..numel {
        f(flat, li, ri);
        // advance multi-index, rightmost fastest
        for d in (0..ndim).rev() {
            coords[d] += 1;
            li += ls[d];
            ri += rs[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            li -= ls[d] * out_shape[d];
            ri -= rs[d] * out_shape[d];
        }
    }
}

// ── op constructors ─────────────────────────────────────────────────────

impl<F: Scalar> Tensor<F> {
    /// 2-D matrix product; backward accumulates dA = dC·Bᵀ and dB = Aᵀ·dC.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_nn(&self.data(), &rhs.data(), &mut out, m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Op::Matmul,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                expected: "a 2-D tensor",
                got: s.to_vec(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = self.data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = data[i * n + j];
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Op::Transpose,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                expected: "a shape with matching element count",
                got: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Op::Reshape,
        ))
    }

    fn binary(&self, rhs: &Tensor<F>, op: Op<F>, name: &'static str) -> Result<Tensor<F>> {
        let out_shape = broadcast_shape(name, self.shape(), rhs.shape())?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![F::zero(); numel];
        let l = self.data();
        let r = rhs.data();
        if self.shape() == rhs.shape() {
            match op {
                Op::Add => {
                    for i in 0..numel {
                        out[i] = l[i] + r[i];
                    }
                }
                Op::Sub => {
                    for i in 0..numel {
                        out[i] = l[i] - r[i];
                    }
                }
                Op::Mul => {
                    for i in 0..numel {
                        out[i] = l[i] * r[i];
                    }
                }
                Op::Div => {
                    for i in 0..numel {
                        out[i] = l[i] / r[i];
                    }
                }
                _ => unreachable!(),
            }
        } else {
            for_each_broadcast::<F>(&out_shape, self.shape(), rhs.shape(), |o, li, ri| {
                out[o] = match op {
                    Op::Add => l[li] + r[ri],
                    Op::Sub => l[li] - r[ri],
                    Op::Mul => l[li] * r[ri],
                    Op::Div => l[li] / r[ri],
                    _ => unreachable!(),
                };
            });
        }
        drop(l);
        drop(r);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            op,
        ))
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, Op::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, Op::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, Op::Mul, "mul")
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, Op::Div, "div")
    }

    fn unary(&self, op: Op<F>, f: impl Fn(F) -> F) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], op)
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        self.unary(Op::AddScalar(c), |x| x + c)
    }

    pub fn mul_scalar(&self, c: F) -> Tensor<F> {
        self.unary(Op::MulScalar(c), |x| x * c)
    }

    pub fn div_scalar(&self, c: F) -> Tensor<F> {
        self.unary(Op::DivScalar(c), |x| x / c)
    }

    /// c - x
    pub fn rsub_scalar(&self, c: F) -> Tensor<F> {
        self.unary(Op::RsubScalar(c), |x| c - x)
    }

    pub fn neg(&self) -> Tensor<F> {
        self.mul_scalar(-F::one())
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary(Op::Exp, |x| x.exp())
    }

    pub fn sqrt(&self) -> Tensor<F> {
        self.unary(Op::Sqrt, |x| x.sqrt())
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(Op::Relu, |x| if x > F::zero() { x } else { F::zero() })
    }

    /// elu(x) + 1: strictly positive, C¹ everywhere.
    pub fn elu_plus_one(&self) -> Tensor<F> {
        self.unary(Op::EluPlusOne, |x| {
            if x > F::zero() {
                x + F::one()
            } else {
                x.exp()
            }
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<F> {
        self.unary(Op::Gelu, gelu_value)
    }

    pub fn clamp_min(&self, lo: F) -> Tensor<F> {
        self.unary(Op::ClampMin(lo), |x| if x > lo { x } else { lo })
    }

    pub fn clamp(&self, lo: F, hi: F) -> Tensor<F> {
        self.unary(Op::Clamp(lo, hi), |x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        })
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let mut s = F::zero();
        for &v in self.data().iter() {
            s += v;
        }
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], Op::SumAll)
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = F::from_usize_lossy(self.numel());
        let mut s = F::zero();
        for &v in self.data().iter() {
            s += v;
        }
        Tensor::from_op(vec![1], vec![s / n], vec![self.clone()], Op::MeanAll)
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last_keep(&self) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "sum_last_keep",
                expected: "at least one axis",
                got: s.to_vec(),
            });
        }
        let cols = s[s.len() - 1];
        let rows = self.numel() / cols;
        let data = self.data();
        let mut out = vec![F::zero(); rows];
        for r in 0..rows {
            let mut acc = F::zero();
            for c in 0..cols {
                acc += data[r * cols + c];
            }
            out[r] = acc;
        }
        drop(data);
        let mut out_shape = s.to_vec();
        *out_shape.last_mut().unwrap() = 1;
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Op::SumLastKeep,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `prob` and survivors are scaled by 1/(1-prob); in eval
    /// mode (or at prob 0) this is exactly the identity.
    pub fn dropout<R: Rng>(&self, prob: f64, training: bool, rng: &mut R) -> Result<Tensor<F>> {
        if !(0.0..1.0).contains(&prob) {
            return Err(TensorError::InvalidParameter {
                op: "dropout",
                reason: format!("prob must be in [0,1), got {prob}"),
            });
        }
        if !training || prob == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = F::from_f64_lossy(1.0 / (1.0 - prob));
        let mask: Vec<F> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < prob {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self.data();
        let out: Vec<F> = data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        drop(data);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Op::Dropout { mask },
        ))
    }

    /// Per-token normalization over the last axis, then affine with
    /// `gamma`/`beta` of that axis' size.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let s = self.shape();
        let cols = *s.last().ok_or(TensorError::InvalidShape {
            op: "layer_norm",
            expected: "at least one axis",
            got: s.to_vec(),
        })?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: s.to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / cols;
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let cols_f = F::from_usize_lossy(cols);
        let mut out = vec![F::zero(); rows * cols];
        let mut means = vec![F::zero(); rows];
        let mut inv_stds = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean /= cols_f;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= cols_f;
            let inv_std = F::one() / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Op::LayerNorm {
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    /// Identity in the forward pass; during backward the gradient flowing
    /// into `self` is multiplied elementwise by `scale_map`, which is treated
    /// as a constant.
    pub fn attach_grad_hook(&self, scale_map: &[F]) -> Result<Tensor<F>> {
        if scale_map.len() != self.numel() {
            return Err(TensorError::InvalidParameter {
                op: "attach_grad_hook",
                reason: format!(
                    "scale map has {} entries, tensor has {}",
                    scale_map.len(),
                    self.numel()
                ),
            });
        }
        if let Some(bad) = scale_map.iter().find(|v| !v.is_finite() || **v < F::zero()) {
            return Err(TensorError::InvalidParameter {
                op: "attach_grad_hook",
                reason: format!("scale entries must be finite and >= 0, got {bad}"),
            });
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Op::GradHook {
                scale: scale_map.to_vec(),
            },
        ))
    }
}

pub(crate) fn gelu_value<F: Scalar>(x: F) -> F {
    // 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
    let half = F::from_f64_lossy(0.5);
    let c0 = F::FRAC_2_PI().sqrt();
    let c1 = F::from_f64_lossy(0.044715);
    let inner = c0 * (x + c1 * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub(crate) fn gelu_derivative<F: Scalar>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let c0 = F::FRAC_2_PI().sqrt();
    let c1 = F::from_f64_lossy(0.044715);
    let three = F::from_f64_lossy(3.0);
    let inner = c0 * (x + c1 * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c0 * (F::one() + three * c1 * x * x)
}
