//! Dense f32 tensors of rank 1 to 3.
//!
//! Storage is channel-major, then row-major: index (c, y, x) lives at
//! `(c * h + y) * w + x`. Tensors are immutable once an operation returns
//! them, so they are safe to share across threads for reading.

use crate::error::{Error, Result};

/// Validated dimension list. Every dim is at least 1 and the element count
/// fits in a usize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Shape> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::Shape(format!(
                "rank must be between 1 and 3, got {}",
                dims.len()
            )));
        }
        let mut count: usize = 1;
        for &d in dims {
            if d == 0 {
                return Err(Error::Shape("every dim must be at least 1".into()));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Shape("element count overflows usize".into()))?;
        }
        Ok(Shape {
            dims: dims.to_vec(),
        })
    }

    /// Rank-1 shape of length `n`.
    pub fn vector(n: usize) -> Result<Shape> {
        Shape::new(&[n])
    }

    /// Rank-3 feature-map shape (channels, height, width).
    pub fn map(c: usize, h: usize, w: usize) -> Result<Shape> {
        Shape::new(&[c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // every dim is >= 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn filled(shape: Shape, fill: f32) -> Tensor {
        let len = shape.len();
        Tensor {
            shape,
            data: vec![fill; len],
        }
    }

    /// Wrap existing data; the length must match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor from a slice.
    pub fn from_slice(values: &[f32]) -> Result<Tensor> {
        Tensor::from_vec(Shape::vector(values.len())?, values.to_vec())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Read element (c, y, x) of a rank-3 tensor.
    pub fn get3(&self, c: usize, y: usize, x: usize) -> f32 {
        debug_assert_eq!(self.shape.rank(), 3);
        let d = self.shape.dims();
        self.data[(c * d[1] + y) * d[2] + x]
    }

    /// Write element (c, y, x) of a rank-3 tensor.
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f32) {
        debug_assert_eq!(self.shape.rank(), 3);
        let d = self.shape.dims();
        self.data[(c * d[1] + y) * d[2] + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Build a tensor of the given dims filled with one value.
pub fn tensor_new(dims: &[usize], fill: f32) -> Result<Tensor> {
    Ok(Tensor::filled(Shape::new(dims)?, fill))
}

/// Rank-1 view of the same elements in storage order. Values are untouched.
pub fn flatten(t: &Tensor) -> Tensor {
    Tensor {
        shape: Shape {
            dims: vec![t.data.len()],
        },
        data: t.data.clone(),
    }
}
