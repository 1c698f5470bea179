use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::ops::Op;
use crate::scalar::Scalar;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) struct Node<F: Scalar> {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<F>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<F>>>,
    pub(crate) parents: Vec<Tensor<F>>,
    pub(crate) op: Op<F>,
}

/// Cheap handle to a node in the computation graph. Cloning shares storage.
pub struct Tensor<F: Scalar> {
    pub(crate) inner: Rc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    /// Leaf tensor from raw row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, requires_grad))
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                op: Op::Leaf,
            }),
        }
    }

    /// Interior node. Degrades to a leaf when no parent needs gradients, so
    /// frozen subgraphs do not retain their history.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        op: Op<F>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::leaf(shape, data, false);
        }
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                op,
            }),
        }
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![F::zero(); numel], requires_grad)
    }

    pub fn ones(shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![F::one(); numel], requires_grad)
    }

    pub fn full(shape: &[usize], value: F, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], requires_grad)
    }

    pub fn scalar(value: F) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Leaf with entries drawn from N(0, std^2). Draws are made in f64 and
    /// converted, so a fixed seed yields the same stream for every scalar type.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<F> = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64_lossy(z * std)
            })
            .collect();
        Self::leaf(shape.to_vec(), data, requires_grad)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when both handles point at the same storage.
    pub fn ptr_eq(&self, other: &Tensor<F>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.inner.data.borrow()
    }

    /// Mutable view of the raw buffer; used by optimizers between steps.
    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[F]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Copy of the values as a fresh leaf outside any recorded graph.
    pub fn detach(&self) -> Tensor<F> {
        Self::leaf(self.inner.shape.clone(), self.to_vec(), false)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}
