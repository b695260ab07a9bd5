//! Dense 2-D tensors with selectable 32/64-bit precision.
//!
//! Everything the adapter math touches is a matrix: activations are
//! `d x L` (one column per sequence position), weights are `d_o x d_i`,
//! scalars are `1 x 1`. Tensors are immutable after construction; gradients
//! are owned by the [`crate::tape::Tape`] that recorded the computation.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Floating-point width of a tensor's elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element type: `f32` or `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from `bytes`; callers guarantee
    /// `bytes.len() == Self::DTYPE.size_bytes()`.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr) => {
        impl Element for $ty {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $ty
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$ty>::abs(self)
            }
            fn exp(self) -> Self {
                <$ty>::exp(self)
            }
            fn sqrt(self) -> Self {
                <$ty>::sqrt(self)
            }
            fn ln(self) -> Self {
                <$ty>::ln(self)
            }
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }
            fn maximum(self, other: Self) -> Self {
                <$ty>::max(self, other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("element byte width"))
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);

/// Process-unique tensor identity, used by the tape to key gradients.
pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Buf<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

/// Dense row-major matrix. Cloning is cheap (shared buffer) and clones keep
/// the same identity: they are the same logical tensor.
pub struct Tensor<E: Element> {
    buf: Arc<Buf<E>>,
    id: TensorId,
    requires_grad: bool,
    /// Set by the tape when this tensor was produced by a recorded op.
    pub(crate) tracked: bool,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            buf: Arc::clone(&self.buf),
            id: self.id,
            requires_grad: self.requires_grad,
            tracked: self.tracked,
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            buf: Arc::new(Buf { rows, cols, data }),
            id: fresh_id(),
            requires_grad: false,
            tracked: false,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::from_vec(rows, cols, vec![E::ZERO; rows * cols]).expect("positive dims")
    }

    pub fn filled(rows: usize, cols: usize, value: E) -> Self {
        Tensor::from_vec(rows, cols, vec![value; rows * cols]).expect("positive dims")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor::from_vec(rows, cols, data).expect("positive dims")
    }

    /// Builds a tensor from nested rows; convenient in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Config("from_rows: empty input".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows", format!("{cols} cols")));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| E::from_f64(v)))
            .collect();
        Tensor::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::from_vec(1, 1, vec![v]).expect("scalar")
    }

    /// Marks this tensor as a trainable leaf.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.buf.rows
    }

    pub fn cols(&self) -> usize {
        self.buf.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.buf.rows, self.buf.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.buf.rows, self.buf.cols)
    }

    pub fn len(&self) -> usize {
        self.buf.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are positive by construction
    }

    pub fn data(&self) -> &[E] {
        &self.buf.data
    }

    pub fn get(&self, row: usize, col: usize) -> E {
        self.buf.data[row * self.buf.cols + col]
    }

    pub fn is_scalar(&self) -> bool {
        self.buf.rows == 1 && self.buf.cols == 1
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on non-scalar {}", self.shape_str());
        self.buf.data[0]
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Whether gradients can flow out of this tensor: it is either a
    /// trainable leaf or was produced by a recorded op.
    pub(crate) fn live(&self) -> bool {
        self.requires_grad || self.tracked
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    /// Exact bit-level equality of shapes and element payloads.
    pub fn bits_eq(&self, other: &Tensor<E>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.to_f64()).collect()
    }

    /// Pure construction of `self - step * delta`, keeping flags and shape.
    /// Used by the optimizer; the result is a fresh tensor identity.
    pub fn sub_scaled(&self, delta: &Tensor<E>, step: E) -> Result<Tensor<E>> {
        if self.shape() != delta.shape() {
            return Err(Error::shape("sub_scaled", self.shape_str(), delta.shape_str()));
        }
        let data = self
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&p, &g)| p - step * g)
            .collect();
        let mut out = Tensor::from_vec(self.rows(), self.cols(), data)?;
        out.requires_grad = self.requires_grad;
        Ok(out)
    }

    /// Serializes the payload as little-endian element bytes, row-major.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * E::DTYPE.size_bytes());
        for v in self.data() {
            v.write_le(&mut out);
        }
        out
    }

    /// Rebuilds a tensor from little-endian element bytes.
    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let width = E::DTYPE.size_bytes();
        let expect = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Checkpoint("tensor byte size overflow".into()))?;
        if bytes.len() != expect {
            return Err(Error::Checkpoint(format!(
                "payload size {} does not match {}x{} {}",
                bytes.len(),
                rows,
                cols,
                E::DTYPE
            )));
        }
        let data = bytes.chunks_exact(width).map(E::read_le).collect();
        Tensor::from_vec(rows, cols, data)
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>[{}] id={}{}",
            E::DTYPE,
            self.shape_str(),
            self.id,
            if self.requires_grad { " trainable" } else { "" }
        )
    }
}
