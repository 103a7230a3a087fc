//! Dense NCHW tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is four-dimensional. Operations that produce a tensor from
//! inputs requiring gradients record a backward closure and their parents;
//! [`Tensor::backward`] walks the resulting graph in reverse topological
//! order. Tensors are immutable once produced, apart from their gradient
//! buffer.

mod conv;
mod gradcheck;
mod ops;
mod scalar;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

pub use conv::{conv2d, conv_transpose2d, downsample2x, mask_mean3x3, maxpool2x2, renormalize};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use ops::{concat_batch, concat_channels, spatial_gradient, ElementwiseOp, ReduceOp};
pub use scalar::Scalar;

use crate::error::{shape_err, Error, Result};

/// Tensor extents in NCHW order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape::new(1, 1, 1, 1);

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Inputs to a recorded backward closure.
pub(crate) struct BackwardCtx<'a, S: Scalar> {
    pub parents: &'a [Tensor<S>],
    pub out: &'a [S],
    pub grad: &'a [S],
}

/// Returns one gradient per parent; `None` for parents that do not require one.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&BackwardCtx<'_, S>) -> Vec<Option<Vec<S>>> + Send + Sync>;

struct Node<S: Scalar> {
    shape: Shape,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// A dense 4-D array. Cloning is cheap and shares storage.
pub struct Tensor<S: Scalar = f32>(Arc<Node<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn from_node(
        shape: Shape,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor(Arc::new(Node {
            shape,
            data: Arc::new(data),
            requires_grad,
            grad: Mutex::new(None),
            parents,
            backward,
        }))
    }

    /// Constant leaf.
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Self::from_node(shape, data, false, Vec::new(), None))
    }

    /// Leaf that accumulates a gradient during [`Tensor::backward`].
    pub fn variable(shape: impl Into<Shape>, data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.requires_grad_(true))
    }

    pub fn full(shape: impl Into<Shape>, value: S) -> Self {
        let shape = shape.into();
        Self::from_node(shape, vec![value; shape.numel()], false, Vec::new(), None)
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// New leaf sharing this tensor's storage, with the given gradient flag.
    pub fn requires_grad_(&self, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            shape: self.0.shape,
            data: Arc::clone(&self.0.data),
            requires_grad,
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Constant leaf sharing storage; gradients stop here.
    pub fn detach(&self) -> Self {
        self.requires_grad_(false)
    }

    pub(crate) fn op_result(shape: Shape, data: Vec<S>, parents: Vec<Tensor<S>>, backward: BackwardFn<S>) -> Self {
        if parents.iter().any(Tensor::requires_grad) {
            Self::from_node(shape, data, true, parents, Some(backward))
        } else {
            Self::from_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn data(&self) -> &[S] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if !self.shape().is_scalar() {
            return Err(shape_err!("item() on non-scalar tensor {}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        let s = self.0.shape;
        self.0.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// True when both handles refer to the same graph node.
    pub fn same_node(&self, other: &Tensor<S>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn node_id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.0.data.iter().map(|v| T::from_f64(v.as_f64())).collect();
        Tensor::<T>::from_node(self.0.shape, data, false, Vec::new(), None)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss. Gradients add into the grad
    /// buffers of every reachable tensor that requires one.
    pub fn backward(&self) -> Result<()> {
        if !self.shape().is_scalar() {
            return Err(shape_err!(
                "backward requires a scalar loss, got shape {}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let tape = Tape::record(self);
        tape.run(self)
    }

    /// Writes the debug text form: `N C H W` header then values.
    pub fn to_text(&self) -> String {
        let s = self.shape();
        let mut out = format!("{} {} {} {}\n", s.n, s.c, s.h, s.w);
        let body: Vec<String> = self.data().iter().map(|v| format!("{v}")).collect();
        out.push_str(&body.join(" "));
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::format("tensor text", i, "missing header dimension"))?;
            *d = tok
                .parse()
                .map_err(|_| Error::format("tensor text", i, format!("bad dimension {tok:?}")))?;
        }
        let shape = Shape::from(dims);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("tensor text", 0, "dimension product overflows"))?;
        let mut data = Vec::with_capacity(numel.min(1 << 20));
        for (i, tok) in tokens.enumerate() {
            if i >= numel {
                return Err(Error::format("tensor text", 4 + i, "trailing values"));
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format("tensor text", 4 + i, format!("bad value {tok:?}")))?;
            data.push(S::from_f64(v));
        }
        if data.len() != numel {
            return Err(Error::format(
                "tensor text",
                4 + data.len(),
                format!("expected {numel} values, found {}", data.len()),
            ));
        }
        Tensor::from_vec(shape, data)
    }
}

/// Reverse topological order of the graph reachable from a root, restricted
/// to nodes that require gradients. Inputs always precede their consumers.
pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn record(root: &Tensor<S>) -> Self {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, next parent index to visit)
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(root.clone(), 0)];
        visited.insert(root.node_id());
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.requires_grad() && visited.insert(parent.node_id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn run(&self, root: &Tensor<S>) -> Result<()> {
        let index: HashMap<usize, usize> = self.nodes.iter().enumerate().map(|(i, t)| (t.node_id(), i)).collect();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        let root_idx = index[&root.node_id()];
        grads[root_idx] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(backward) = &node.0.backward {
                let ctx = BackwardCtx {
                    parents: &node.0.parents,
                    out: &node.0.data,
                    grad: &grad,
                };
                let parent_grads = backward(&ctx);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    let j = index[&parent.node_id()];
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += *g),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            let mut slot = node.0.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }
}
