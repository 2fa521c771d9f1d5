use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tape::{self, BackwardFn, GradCell, Link};
use crate::error::{Error, Result};

#[derive(Clone)]
enum Origin {
    Constant,
    Leaf(GradCell),
    Node { id: usize, epoch: u64 },
}

/// Dense row-major `f64` array that optionally participates in the
/// thread-local reverse-mode tape.
///
/// Cloning is cheap: the buffer is reference counted and a clone refers to
/// the same tape node (or gradient cell, for leaves).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    origin: Origin,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.origin {
            Origin::Constant => "const",
            Origin::Leaf(_) => "leaf",
            Origin::Node { .. } => "node",
        };
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("kind", &kind)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// A constant tensor. Fails when `shape` does not account for exactly
    /// `data.len()` elements or a dimension is zero.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn vector(data: &[f64]) -> Tensor {
        Tensor::from_parts(vec![data.len()], data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    /// A trainable leaf. Its gradient starts at zero and accumulates across
    /// backward passes until [`Tensor::zero_grad`].
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, data)?;
        t.origin = Origin::Leaf(Rc::new(RefCell::new(vec![0.0; t.len()])));
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Rc::new(data),
            origin: Origin::Constant,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Rc::try_unwrap(self.data).unwrap_or_else(|rc| (*rc).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Whether this tensor is a trainable leaf or was produced from one on
    /// the current tape.
    pub fn requires_grad(&self) -> bool {
        self.link_kind().is_some()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.origin, Origin::Leaf(_))
    }

    /// Accumulated gradient of a leaf; `None` for non-leaves.
    pub fn grad(&self) -> Option<Vec<f64>> {
        match &self.origin {
            Origin::Leaf(cell) => Some(cell.borrow().clone()),
            _ => None,
        }
    }

    pub fn zero_grad(&self) {
        if let Origin::Leaf(cell) = &self.origin {
            cell.borrow_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            origin: Origin::Constant,
        }
    }

    /// Populates the gradient of every leaf this scalar depends on, then
    /// consumes the tape. Gradients accumulate across calls. A root that does
    /// not depend on any leaf leaves all gradients untouched.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape
            )));
        }
        match self.link_kind() {
            Some(Link::Node(id)) => tape::run_backward(id, vec![1.0]),
            Some(Link::Leaf(cell)) => {
                cell.borrow_mut()[0] += 1.0;
                tape::reset_tape();
            }
            _ => tape::reset_tape(),
        }
        Ok(())
    }

    fn link_kind(&self) -> Option<Link> {
        match &self.origin {
            Origin::Constant => None,
            Origin::Leaf(cell) => Some(Link::Leaf(Rc::clone(cell))),
            Origin::Node { id, epoch } => {
                (*epoch == tape::current_epoch()).then_some(Link::Node(*id))
            }
        }
    }

    /// Builds an op result, recording it on the tape when any input tracks
    /// gradients and recording is enabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        backward: impl FnOnce(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let mut out = Tensor::from_parts(shape, data);
        if !tape::grad_enabled() {
            return out;
        }
        let links: Vec<Link> = inputs
            .iter()
            .map(|t| t.link_kind().unwrap_or(Link::Constant))
            .collect();
        if links.iter().all(|l| matches!(l, Link::Constant)) {
            return out;
        }
        let backward: BackwardFn = Box::new(backward);
        let (id, epoch) = tape::push(links, backward);
        out.origin = Origin::Node { id, epoch };
        out
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }
}
