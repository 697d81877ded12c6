//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, immutable after construction, and cheap to clone
//! (the buffer is shared). Gradients are recorded on an explicit [`Tape`]:
//! every operation whose inputs include a watched tensor appends a node, and
//! [`Tensor::backward`] replays the tape in reverse. Tensors without a tape
//! participate in the same operations as plain forward arithmetic, so
//! inference and training share one code path.
//!
//! There is no broadcasting except the trailing-dimension bias add
//! ([`Tensor::add_bias`]); all other shapes must match exactly.

mod kernels;
mod ops;
mod store;
mod tape;

pub use ops::{concat_cols, concat_rows, LAYER_NORM_EPS};
pub use store::{load_checkpoint, save_checkpoint, ParamStore};
pub use tape::Tape;

use std::rc::Rc;

use tape::NodeRef;

/// Sentinel standing in for negative infinity in log-space arithmetic.
/// Finite so that differences and sums stay NaN-free.
pub const NEG_INF: f64 = -1.0e30;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows (outer extent); 1 for 0-d.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Extent of the last dimension.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_taped(&self) -> bool {
        self.node.is_some()
    }

    /// Gradient accumulated by the last `backward` call, if this tensor is
    /// on a tape. Zeros when the tensor did not influence the root.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let node = self.node.as_ref()?;
        Some(node.tape.grad_of(node.id, self.numel()))
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Tensor {
        self.node = Some(node);
        self
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("taped", &self.node.is_some())
            .field("data", &self.data)
            .finish()
    }
}

/// Builds an additive attention mask from an allowed/blocked matrix:
/// 0 where allowed, [`NEG_INF`] where blocked.
pub fn additive_mask(allowed: &[bool], rows: usize, cols: usize) -> Tensor {
    assert_eq!(allowed.len(), rows * cols);
    let data = allowed
        .iter()
        .map(|&a| if a { 0.0 } else { NEG_INF })
        .collect();
    Tensor::from_vec(data, &[rows, cols])
}
