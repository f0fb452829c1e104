use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::real::Real;
use crate::error::{Error, Result};
use crate::volgrid::{MultiChannelVolume, ScalarVolume, Spacing};

/// `(N, C, D, H, W)`.
pub type Shape = [usize; 5];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Dense `(N, C, D, H, W)` array, `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self { shape, data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: [1; 5], data: vec![v] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `[D, H, W]`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::cst(v.as_f64())).collect() }
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::ShapeMismatch("empty stack".into()))?;
        let mut shape = first.shape;
        if shape[0] != 1 {
            return Err(Error::ShapeMismatch("stack expects batch 1 items".into()));
        }
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch(format!("stack {:?} with {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        shape[0] = items.len();
        Ok(Self { shape, data })
    }

    /// One-sample tensor `(1, C, z, y, x)`; the voxel order is shared with
    /// the volume layout, so this is a copy plus a cast.
    pub fn from_volume(v: &MultiChannelVolume) -> Self {
        let [x, y, z] = v.dims();
        Self { shape: [1, v.channels(), z, y, x], data: v.data().iter().map(|&a| T::cst(a as f64)).collect() }
    }

    pub fn from_scalar_volume(v: &ScalarVolume) -> Self {
        let [x, y, z] = v.dims();
        Self { shape: [1, 1, z, y, x], data: v.values().iter().map(|&a| T::cst(a as f64)).collect() }
    }

    /// All channels of one batch entry as a volume.
    pub fn sample_volume(&self, n: usize, spacing: Spacing) -> Result<MultiChannelVolume> {
        let [_, c, d, h, w] = self.shape;
        let len = c * d * h * w;
        let data = self.data[n * len..(n + 1) * len].iter().map(|v| v.as_f64() as f32).collect();
        MultiChannelVolume::new([w, h, d], spacing, c, data)
    }
}
