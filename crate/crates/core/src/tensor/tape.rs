use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::ops::{backward_node, Op};
use super::{Real, Result, Tensor, TensorError};

/// Backward rule of a user-supplied primitive: maps the output gradient to
/// one gradient per input (same shapes as the inputs).
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

pub(crate) struct Node<F: Real> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

/// Append-only record of primitive applications in evaluation order.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(1024)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Registers a primitive whose backward rule is supplied by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, F>],
        value: Tensor<F>,
        backward: BackwardFn<F>,
    ) -> Result<Var<'t, F>> {
        super::check_finite("custom", value.data())?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = ids.iter().any(|&i| self.requires_grad(i));
        Ok(self.push(value, Op::Custom { inputs: ids, backward: Arc::from(backward) }, rg))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if out_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![F::one()]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for input in node.op.inputs() {
                if input >= id {
                    return Err(TensorError::Cycle(id));
                }
            }
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            backward_node(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g.into_vec());
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<'t, F: Real> Var<'t, F> {
    pub fn value(&self) -> Tensor<F> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient of the backward output with respect to every recorded node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `v`; zeros if `v` did not participate.
    pub fn wrt(&self, v: Var<'_, F>) -> Tensor<F> {
        self.wrt_id(v.id)
    }

    pub fn wrt_id(&self, id: usize) -> Tensor<F> {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed gradient buffer, `None` when the node did not participate.
    pub fn raw(&self, id: usize) -> Option<&[F]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}
