use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::autodiff::OpRecord;
use crate::error::{Error, Result};

/// Storage precision. Values are held as `f64` either way; `F32` rounds every
/// stored value to `f32` precision after each op, which keeps f32 checkpoints
/// bit-exact on round-trip. Gradient verification runs in `F64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub(crate) fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub(crate) fn round_vec(self, mut v: Vec<f64>) -> Vec<f64> {
        if self == DType::F32 {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        v
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(Error::Checkpoint(format!("unknown dtype code {c}"))),
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) dtype: DType,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<f64>>>,
    pub(crate) op: Mutex<Option<OpRecord>>,
}

/// Dense n-dimensional array, immutable once created except for gradient
/// accumulation. Clones share storage.
pub struct Tensor {
    pub(crate) inner: Arc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("dtype", &self.inner.dtype)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Shape {
            op: "new",
            msg: format!("zero extent in shape {shape:?}"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Shape {
            op: "new",
            msg: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
        });
    }
    Ok(())
}

impl Tensor {
    fn build(data: Vec<f64>, shape: &[usize], dtype: DType, requires_grad: bool) -> Result<Tensor> {
        check_shape(&data, shape)?;
        let data = dtype.round_vec(data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                dtype,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op: Mutex::new(None),
            }),
        })
    }

    /// Leaf tensor that does not participate in gradients.
    pub fn from_vec(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::build(data, shape, dtype, false)
    }

    /// Leaf tensor that accumulates gradients (a parameter).
    pub fn param(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::build(data, shape, dtype, true)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let numel = shape.iter().product();
        Self::build(vec![0.0; numel], shape, dtype, false).expect("zeros")
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Result<Tensor> {
        let numel = shape.iter().product();
        Self::build(vec![value; numel], shape, dtype, false)
    }

    pub fn scalar(value: f64, dtype: DType) -> Result<Tensor> {
        Self::build(vec![value], &[1], dtype, false)
    }

    /// Result of an op. `requires_grad` is inherited from the inputs by the
    /// recording layer; this only assembles storage and validates finiteness.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        requires_grad: bool,
        record: Option<OpRecord>,
    ) -> Result<Tensor> {
        let data = dtype.round_vec(data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op: Mutex::new(record),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Gradient with absent-means-zero semantics: a tensor the loss never
    /// touched has zero gradient.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Same values, detached from the graph, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Self::build(self.inner.data.clone(), &self.inner.shape, self.inner.dtype, false)
            .expect("detach")
    }

    /// Same values as a fresh gradient-accumulating leaf.
    pub fn detach_requiring_grad(&self) -> Tensor {
        Self::build(self.inner.data.clone(), &self.inner.shape, self.inner.dtype, true)
            .expect("detach")
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Self::build(self.inner.data.clone(), &self.inner.shape, dtype, self.inner.requires_grad)
            .expect("to_dtype")
    }
}
