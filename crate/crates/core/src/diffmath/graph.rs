use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ValueId(pub(crate) usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule plus the inputs it needs.
#[derive(Debug)]
pub(crate) enum Op<T> {
    Linear { x: ValueId, w: ValueId, b: ValueId },
    LeakyRelu { x: ValueId, slope: T },
    Sigmoid { x: ValueId },
    Concat { parts: Vec<ValueId> },
    Gather { x: ValueId, idx: Vec<usize> },
    MaxOverAxis { x: ValueId, argmax: Vec<u32> },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Affine { x: ValueId, scale: T },
    ScaleRows { x: ValueId, w: ValueId },
    Sum { x: ValueId },
    Mean { x: ValueId },
    RowNorm { x: ValueId },
    Abs { x: ValueId },
    Div { a: ValueId, b: ValueId, eps: T },
    WeightedMean { x: ValueId, w: ValueId },
    Reshape { x: ValueId },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<ValueId> {
        use Op::*;
        match self {
            Linear { x, w, b } => vec![*x, *w, *b],
            Concat { parts } => parts.clone(),
            Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b, .. } => vec![*a, *b],
            ScaleRows { x, w } | WeightedMean { x, w } => vec![*x, *w],
            LeakyRelu { x, .. }
            | Sigmoid { x }
            | Gather { x, .. }
            | MaxOverAxis { x, .. }
            | Affine { x, .. }
            | Sum { x }
            | Mean { x }
            | RowNorm { x }
            | Abs { x }
            | Reshape { x } => vec![*x],
        }
    }
}

/// A node in the computation graph.
#[derive(Debug)]
pub struct Value<T> {
    pub(crate) data: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Option<Op<T>>,
    pub(crate) requires_grad: bool,
}

impl<T: Real> Value<T> {
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Gradient buffer, `None` until something flows into this leaf.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.op.is_none()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Arena holding one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Value<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Value<T> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: ValueId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar value of a rank-0 (or single element) node.
    pub fn scalar(&self, id: ValueId) -> T {
        self.nodes[id.0].data[0]
    }

    fn push_leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<ValueId> {
        if data.len() != numel(&shape) {
            return Err(Error::shape("leaf", &[data.len()], &shape));
        }
        if shape.len() > 4 {
            return Err(Error::InvalidArgument(format!("rank {} exceeds 4", shape.len())));
        }
        let id = ValueId(self.nodes.len());
        self.nodes.push(Value {
            data,
            shape,
            grad: None,
            op: None,
            requires_grad,
        });
        Ok(id)
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Vec<T>, shape: &[usize]) -> Result<ValueId> {
        self.push_leaf(data, shape.to_vec(), true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<ValueId> {
        self.push_leaf(data, shape.to_vec(), false)
    }

    pub(crate) fn push_op(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> ValueId {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let id = ValueId(self.nodes.len());
        self.nodes.push(Value {
            data,
            shape,
            grad: None,
            op: Some(op),
            requires_grad,
        });
        id
    }

    /// Stop-gradient: same data, new leaf, never propagates.
    pub fn detach(&mut self, x: ValueId) -> ValueId {
        let v = &self.nodes[x.0];
        let (data, shape) = (v.data.clone(), v.shape.clone());
        let id = ValueId(self.nodes.len());
        self.nodes.push(Value {
            data,
            shape,
            grad: None,
            op: None,
            requires_grad: false,
        });
        id
    }

    /// Clears every gradient buffer.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar seed. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, seed: ValueId) -> Result<()> {
        let seed_node = &self.nodes[seed.0];
        if seed_node.data.len() != 1 {
            return Err(Error::NonScalarSeed(seed_node.shape.clone()));
        }
        if !seed_node.requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..=seed.0).map(|_| None).collect();
        scratch[seed.0] = Some(vec![T::one()]);

        for i in (0..=seed.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if self.nodes[i].op.is_none() {
                let leaf = &mut self.nodes[i];
                if leaf.requires_grad {
                    match &mut leaf.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(g),
                    }
                }
            } else {
                self.backprop_op(i, &g, &mut scratch);
            }
        }
        Ok(())
    }
}

/// Accumulation target for one input of an op, allocated on first touch.
pub(crate) fn slot<'a, T: Real>(
    scratch: &'a mut [Option<Vec<T>>],
    nodes: &[Value<T>],
    id: ValueId,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.data.len();
    Some(scratch[id.0].get_or_insert_with(|| vec![T::zero(); len]))
}
