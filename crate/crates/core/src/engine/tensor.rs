use std::sync::Arc;

use crate::engine::alloc;
use crate::{Error, Result, Scalar};

/// Immutable dense row-major tensor.
///
/// The buffer is shared (`Arc`), so clones are cheap and never copy data.
/// Allocation accounting happens at buffer construction and final drop,
/// which keeps live/peak element counts exact under sharing.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    buf: Arc<Buf<T>>,
}

#[derive(Debug)]
struct Buf<T> {
    data: Vec<T>,
    tracked: usize,
}

impl<T> Drop for Buf<T> {
    fn drop(&mut self) {
        alloc::on_free(self.tracked);
    }
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                msg: format!("shape wants {} elements, buffer has {}", expect, data.len()),
            });
        }
        Ok(Self::new_unchecked(shape.to_vec(), data))
    }

    fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        let tracked = alloc::on_alloc(data.len());
        Tensor {
            shape,
            buf: Arc::new(Buf { data, tracked }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![value; n])
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::new_unchecked(vec![1], vec![value])
    }

    /// Build elementwise from the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(f).collect();
        Self::new_unchecked(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.buf.data
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.buf.data[0]
    }

    /// Rows of a matrix (or 1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a matrix (or the length of a vector).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Element (i, j) of a matrix.
    pub fn get2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.buf.data[i * self.shape[1] + j]
    }

    /// Reinterpret the same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.numel() {
            return Err(Error::BadShape {
                op: "reshaped",
                shape: shape.to_vec(),
                msg: format!("cannot view {} elements as {:?}", self.numel(), shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::clone(&self.buf),
        })
    }

    /// Contiguous slice `[index]` along the first axis of a rank-3 tensor,
    /// returned as a matrix. Used for per-head views of `[H, N, d]` stacks.
    pub fn index_axis0(&self, index: usize) -> Result<Self> {
        if self.shape.len() != 3 {
            return Err(Error::BadShape {
                op: "index_axis0",
                shape: self.shape.clone(),
                msg: "expected a rank-3 tensor".into(),
            });
        }
        let (n, m) = (self.shape[1], self.shape[2]);
        let start = index * n * m;
        let data = self.buf.data[start..start + n * m].to_vec();
        Ok(Self::new_unchecked(vec![n, m], data))
    }

    /// Stack equally-shaped matrices into a rank-3 tensor `[K, rows, cols]`.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::BadShape {
            op: "stack",
            shape: vec![],
            msg: "empty part list".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::DimMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::new_unchecked(shape, data))
    }

    /// Flat index of the first NaN/Inf entry, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.buf.data.iter().position(|v| !v.is_finite())
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.buf
            .data
            .iter()
            .zip(other.buf.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}
