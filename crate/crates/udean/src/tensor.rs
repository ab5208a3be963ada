//! Element type abstraction and the 5D array layout shared by the
//! autodiff engine and the network components.
//!
//! All differentiable values are `(batch, channel, x, y, z)` arrays.
//! Scalars (losses) are `(1, 1, 1, 1, 1)`. Training runs at `f32`;
//! the verification suite instantiates the same code at `f64`.

use ndarray::{Array3, Array5, LinalgScalar};
use num_traits::Float;

/// Element type for differentiable arrays: `f32` or `f64`.
pub trait Scalar:
    LinalgScalar
    + Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Batched 5D tensor: (batch, channel, x, y, z).
pub type Tensor<T> = Array5<T>;

/// Make a scalar tensor of shape (1,1,1,1,1).
pub fn scalar<T: Scalar>(v: T) -> Tensor<T> {
    Array5::from_elem((1, 1, 1, 1, 1), v)
}

/// Extract the value of a scalar tensor.
pub fn scalar_value<T: Scalar>(t: &Tensor<T>) -> T {
    debug_assert_eq!(t.len(), 1, "expected scalar tensor");
    t[[0, 0, 0, 0, 0]]
}

/// Wrap a single-channel volume as a (1, 1, x, y, z) tensor.
pub fn from_volume<T: Scalar>(v: &Array3<f64>) -> Tensor<T> {
    let (nx, ny, nz) = v.dim();
    let mut out = Array5::zeros((1, 1, nx, ny, nz));
    for ((x, y, z), &val) in v.indexed_iter() {
        out[[0, 0, x, y, z]] = T::from_f64(val);
    }
    out
}

/// Stack single-channel 3D patches into a (batch, 1, x, y, z) tensor.
pub fn batch_from_patches<T: Scalar>(patches: &[Array3<f64>]) -> Tensor<T> {
    assert!(!patches.is_empty(), "empty patch batch");
    let (nx, ny, nz) = patches[0].dim();
    let mut out = Array5::zeros((patches.len(), 1, nx, ny, nz));
    for (b, p) in patches.iter().enumerate() {
        assert_eq!(p.dim(), (nx, ny, nz), "ragged patch batch");
        for ((x, y, z), &val) in p.indexed_iter() {
            out[[b, 0, x, y, z]] = T::from_f64(val);
        }
    }
    out
}

/// Extract one single-channel item of a batch back into a 3D volume.
pub fn to_volume<T: Scalar>(t: &Tensor<T>, item: usize) -> Array3<f64> {
    let (_, c, nx, ny, nz) = t.dim();
    assert_eq!(c, 1, "expected single-channel tensor");
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| t[[item, 0, x, y, z]].into_f64())
}

pub fn all_finite<T: Scalar>(t: &Tensor<T>) -> bool {
    t.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn volume_round_trip() {
        let v = Array3::from_shape_fn((3, 4, 2), |(x, y, z)| (x + 10 * y + 100 * z) as f64);
        let t: Tensor<f64> = from_volume(&v);
        assert_eq!(t.dim(), (1, 1, 3, 4, 2));
        assert_eq!(to_volume(&t, 0), v);
    }

    #[test]
    fn scalar_helpers() {
        let s = scalar(2.5f32);
        assert_eq!(scalar_value(&s), 2.5);
    }
}
