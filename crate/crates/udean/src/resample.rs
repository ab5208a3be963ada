//! Tricubic (cubic-convolution) resampling: the interpolation baseline
//! and the sampling core reused by the misalignment simulator.

use ndarray::Array3;

use crate::kspace::ScaleFactor;
use crate::volume::VolumeImage;

/// Out-of-field handling when sampling off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Replicate edge voxels (used for grid upsampling).
    Clamp,
    /// Treat outside voxels as zero (used for deformation resampling).
    Zero,
}

/// Keys cubic-convolution kernel with a = -0.5; reproduces linear ramps
/// exactly and interpolates (w(0)=1, w(+-1)=w(+-2)=0).
fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

fn taps(u: f64, n: usize, boundary: Boundary) -> [(Option<usize>, f64); 4] {
    let base = u.floor() as isize;
    let frac = u - base as f64;
    let mut out = [(None, 0.0); 4];
    for (j, slot) in out.iter_mut().enumerate() {
        let idx = base - 1 + j as isize;
        let w = cubic_weight(frac - (j as isize - 1) as f64);
        let resolved = match boundary {
            Boundary::Clamp => Some(idx.clamp(0, n as isize - 1) as usize),
            Boundary::Zero => (idx >= 0 && idx < n as isize).then_some(idx as usize),
        };
        *slot = (resolved, w);
    }
    out
}

/// Sample a volume at a continuous voxel coordinate.
pub fn tricubic_sample(data: &Array3<f64>, u: (f64, f64, f64), boundary: Boundary) -> f64 {
    let (nx, ny, nz) = data.dim();
    let tx = taps(u.0, nx, boundary);
    let ty = taps(u.1, ny, boundary);
    let tz = taps(u.2, nz, boundary);
    let mut acc = 0.0;
    for &(ix, wx) in &tx {
        let Some(ix) = ix else { continue };
        if wx == 0.0 {
            continue;
        }
        for &(iy, wy) in &ty {
            let Some(iy) = iy else { continue };
            if wy == 0.0 {
                continue;
            }
            let wxy = wx * wy;
            for &(iz, wz) in &tz {
                let Some(iz) = iz else { continue };
                acc += wxy * wz * data[[ix, iy, iz]];
            }
        }
    }
    acc
}

/// Cubic interpolation of an LR volume onto the HR grid (centers aligned),
/// clamped to [0, 1].
pub fn tricubic_upsample(lr: &VolumeImage, scale: ScaleFactor) -> VolumeImage {
    let (mx, my, mz) = lr.shape();
    let (nx, ny, nz) = scale.hr_shape((mx, my, mz));
    let to_src = |j: usize, s: usize| (j as f64 + 0.5) / s as f64 - 0.5;
    let data = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        tricubic_sample(
            &lr.data,
            (to_src(x, scale.sx), to_src(y, scale.sy), to_src(z, scale.sz)),
            Boundary::Clamp,
        )
        .clamp(0.0, 1.0)
    });
    VolumeImage {
        data,
        spacing: [
            lr.spacing[0] / scale.sx as f64,
            lr.spacing[1] / scale.sy as f64,
            lr.spacing[2] / scale.sz as f64,
        ],
        axis_labels: lr.axis_labels,
        intensity_range: lr.intensity_range,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn kernel_interpolates() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert!(cubic_weight(1.0).abs() < 1e-15);
        assert!(cubic_weight(2.0).abs() < 1e-15);
        // Partition of unity at any phase.
        for phase in [0.0, 0.25, 0.5, 0.9] {
            let sum: f64 = (-1..3).map(|j| cubic_weight(phase - j as f64)).sum();
            assert!((sum - 1.0).abs() < 1e-12, "phase {phase}: {sum}");
        }
    }

    #[test]
    fn constant_volume_upsamples_to_constant() {
        let mut v = VolumeImage::new(Array3::from_elem((4, 4, 2), 0.42));
        v.spacing = [1.4, 1.4, 2.8];
        let up = tricubic_upsample(&v, ScaleFactor::new(2, 2, 2));
        assert_eq!(up.shape(), (8, 8, 4));
        assert!(up.data.iter().all(|&x| (x - 0.42).abs() < 1e-12));
        assert_eq!(up.spacing, [0.7, 0.7, 1.4]);
    }

    #[test]
    fn linear_ramp_reproduced_in_interior() {
        let lr = VolumeImage::new(Array3::from_shape_fn((8, 4, 3), |(x, _, _)| x as f64 / 16.0));
        let up = tricubic_upsample(&lr, ScaleFactor::new(2, 2, 1));
        // HR voxel x maps to source coordinate (x + 0.5)/2 - 0.5.
        for x in 4..12 {
            let expected = ((x as f64 + 0.5) / 2.0 - 0.5) / 16.0;
            let got = up.data[[x, 4, 1]];
            assert!((got - expected).abs() < 1e-9, "x={x}: {got} vs {expected}");
        }
    }

    #[test]
    fn integer_coordinates_sample_exactly() {
        let data = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| (x * 100 + y * 10 + z) as f64);
        for x in 0..5 {
            for y in 0..4 {
                let v = tricubic_sample(&data, (x as f64, y as f64, 1.0), Boundary::Zero);
                assert!((v - data[[x, y, 1]]).abs() < 1e-12);
            }
        }
    }
}
