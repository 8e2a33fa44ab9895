use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::autograd;
use crate::dtype::DType;
use crate::storage::{Buffer, Data};

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

pub(crate) struct GradFn {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub backward: BackwardFn,
}

pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub buf: Arc<Buffer>,
    pub requires_grad: bool,
    pub grad_fn: Option<GradFn>,
}

/// Reference-counted handle to an immutable n-d array plus its autodiff
/// history. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Drop for Node {
    // Long op chains would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let Some(grad_fn) = self.grad_fn.take() else {
            return;
        };
        let GradFn {
            inputs, backward, ..
        } = grad_fn;
        let mut stack = inputs;
        drop(backward);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(g) = node.grad_fn.take() {
                    let GradFn {
                        inputs, backward, ..
                    } = g;
                    stack.extend(inputs);
                    drop(backward);
                }
            }
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn from_buffer(buf: Arc<Buffer>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(buf.data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            buf,
            requires_grad: false,
            grad_fn: None,
        }))
    }

    pub(crate) fn from_data(data: Data, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length does not match shape {shape:?}"
        );
        Tensor::from_buffer(Arc::new(Buffer::metered(data)), shape)
    }

    /// Builds an op result. `build` receives a gradient-free alias of the
    /// output (for backward rules that need it) and returns the backward
    /// closure; it is only invoked when some input requires a gradient.
    pub(crate) fn from_op<F, B>(
        op: &'static str,
        data: Data,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        build: B,
    ) -> Tensor
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
        B: FnOnce(Tensor) -> F,
    {
        assert_eq!(data.len(), numel(&shape), "{op}: output shape {shape:?}");
        let buf = Arc::new(Buffer::metered(data));
        let track = autograd::grad_enabled() && inputs.iter().any(|t| t.0.requires_grad);
        if !track {
            return Tensor::from_buffer(buf, shape);
        }
        let alias = Tensor::from_buffer(buf.clone(), shape.clone());
        let backward = build(alias);
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            buf,
            requires_grad: true,
            grad_fn: Some(GradFn {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            }),
        }))
    }

    /// Shares the buffer of `self` under a new shape (same element count).
    pub(crate) fn view_op<F, B>(&self, op: &'static str, shape: Vec<usize>, build: B) -> Tensor
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
        B: FnOnce() -> F,
    {
        assert_eq!(numel(&shape), self.numel(), "{op}: {:?} -> {shape:?}", self.shape());
        let track = autograd::grad_enabled() && self.0.requires_grad;
        if !track {
            return Tensor::from_buffer(self.0.buf.clone(), shape);
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            buf: self.0.buf.clone(),
            requires_grad: true,
            grad_fn: Some(GradFn {
                op,
                inputs: vec![self.clone()],
                backward: Box::new(build()),
            }),
        }))
    }

    pub fn from_f32(values: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::from_data(Data::F32(values), shape.to_vec())
    }

    pub fn from_f64(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_data(Data::F64(values), shape.to_vec())
    }

    /// Converts `values` to `dtype` on upload.
    pub fn from_f32_as(values: Vec<f32>, shape: &[usize], dtype: DType) -> Tensor {
        Tensor::from_data(Data::from_f32(values, dtype), shape.to_vec())
    }

    pub fn from_f64_as(values: Vec<f64>, shape: &[usize], dtype: DType) -> Tensor {
        Tensor::from_data(Data::from_f64(values, dtype), shape.to_vec())
    }

    /// A tensor that is not charged to the device meter (e.g. weights bound
    /// from a host-side parameter store, accounted for separately).
    pub fn unmetered_f32(values: Vec<f32>, shape: &[usize], dtype: DType) -> Tensor {
        assert_eq!(values.len(), numel(shape));
        Tensor::from_buffer(
            Arc::new(Buffer::unmetered(Data::from_f32(values, dtype))),
            shape.to_vec(),
        )
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, 1.0, dtype)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        let n = numel(shape);
        let data = match dtype {
            DType::F16 => Data::F16(vec![half::f16::from_f64(value); n]),
            DType::F32 => Data::F32(vec![value as f32; n]),
            DType::F64 => Data::F64(vec![value; n]),
        };
        Tensor::from_data(data, shape.to_vec())
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::full(&[], value, dtype)
    }

    /// Marks a leaf as requiring gradients.
    pub fn requires_grad(self) -> Tensor {
        assert!(
            self.0.grad_fn.is_none(),
            "requires_grad() is only meaningful on leaf tensors"
        );
        Tensor(Rc::new(Node {
            id: self.0.id,
            shape: self.0.shape.clone(),
            buf: self.0.buf.clone(),
            requires_grad: true,
            grad_fn: None,
        }))
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    /// Same data, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_buffer(self.0.buf.clone(), self.0.shape.clone())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn dtype(&self) -> DType {
        self.0.buf.data.dtype()
    }

    pub fn size_in_bytes(&self) -> usize {
        self.0.buf.data.bytes()
    }

    pub(crate) fn data(&self) -> &Data {
        &self.0.buf.data
    }

    pub(crate) fn f32s(&self) -> &[f32] {
        match self.data() {
            Data::F32(v) => v,
            other => panic!("expected f32 storage, found {}", other.dtype().name()),
        }
    }

    pub(crate) fn f64s(&self) -> &[f64] {
        match self.data() {
            Data::F64(v) => v,
            other => panic!("expected f64 storage, found {}", other.dtype().name()),
        }
    }

    pub fn to_vec_f32(&self) -> Vec<f32> {
        self.data().to_f32_vec()
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.data().to_f64_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.to_vec_f64()[0]
    }

    pub(crate) fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor[{:?}, {}{}]",
            self.shape(),
            self.dtype().name(),
            match self.op_name() {
                Some(op) => format!(", grad_fn={op}"),
                None if self.is_tracked() => ", leaf".to_string(),
                None => String::new(),
            }
        )
    }
}
