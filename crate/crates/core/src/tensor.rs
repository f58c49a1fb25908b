//! Dense sample storage.
//!
//! Every input is a `channels x height x width` array stored row-major in
//! channel-first order, the same layout the model bridge puts on the wire.
//! A feature is one spatial location (all of its channels together); vectors
//! are represented as `1 x 1 x n`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    /// A one-dimensional input of `n` scalar features.
    pub fn vector(n: usize) -> Self {
        Self::new(1, 1, n)
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width)
    }

    /// Number of features (spatial locations).
    pub fn features(&self) -> usize {
        self.height * self.width
    }

    /// Number of stored scalars.
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_vector(&self) -> bool {
        self.height == 1
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Wraps `data`, returning `None` when its length does not match `shape`.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Option<Self> {
        (data.len() == shape.len()).then_some(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of `(channel, row, col)`.
    #[inline]
    pub fn offset(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.shape.height + row) * self.shape.width + col
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.offset(channel, row, col)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let i = self.offset(channel, row, col);
        self.data[i] = value;
    }
}
