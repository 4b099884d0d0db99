//! Minimal channels-first feature-map container.
//!
//! Layers operate on contiguous `[channels, height * width]` data, which
//! is exactly what the GEMM-based convolutions want; 2-D model inputs and
//! outputs convert to and from `ndarray::Array2` at the network boundary.

use ndarray::Array2;

use crate::real::Real;

/// A `channels x height x width` feature map in one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<F: Real> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<F>,
}

impl<F: Real> Tensor3<F> {
    /// Zero-filled tensor.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    /// Wrap an existing buffer; `data.len()` must equal `c*h*w`.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor buffer size");
        Tensor3 {
            channels,
            height,
            width,
            data,
        }
    }

    /// Single-channel tensor from a 2-D array.
    pub fn from_array2(arr: &Array2<F>) -> Self {
        let (h, w) = arr.dim();
        let data: Vec<F> = arr.iter().copied().collect();
        Tensor3::from_vec(1, h, w, data)
    }

    /// Copy one channel out as a 2-D array.
    pub fn channel_to_array2(&self, c: usize) -> Array2<F> {
        Array2::from_shape_vec((self.height, self.width), self.channel(c).to_vec())
            .expect("length matches shape")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixels per channel.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// One channel as a contiguous row-major slice.
    pub fn channel(&self, c: usize) -> &[F] {
        let plane = self.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let plane = self.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Elementwise sum into `self`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor3<F>) {
        assert_eq!(self.data.len(), other.data.len(), "tensor add shape");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Append `other`'s channels after `self`'s (same spatial dims).
    pub fn concat_channels(&self, other: &Tensor3<F>) -> Tensor3<F> {
        assert_eq!(self.height, other.height, "concat height");
        assert_eq!(self.width, other.width, "concat width");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor3::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Split channels back into two tensors at `first_channels`.
    pub fn split_channels(&self, first_channels: usize) -> (Tensor3<F>, Tensor3<F>) {
        assert!(first_channels <= self.channels, "split point in range");
        let plane = self.plane();
        let cut = first_channels * plane;
        (
            Tensor3::from_vec(first_channels, self.height, self.width, self.data[..cut].to_vec()),
            Tensor3::from_vec(
                self.channels - first_channels,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }
}
