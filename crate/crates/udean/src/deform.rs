//! Inter-scan misalignment simulation: mild rigid movement (rotation and
//! translation) plus a non-rigid whole-volume shrink, resampled with
//! tricubic interpolation and zero fill outside the field of view.

use ndarray::Array3;
use rand::Rng;

use crate::resample::{tricubic_sample, Boundary};
use crate::volume::{AxisLabel, VolumeImage};
use crate::{Error, Result};

/// Upper bounds for the randomly drawn deformation, all in [0, 2].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationRanges {
    pub rot_deg_max: f64,
    pub trans_vox_max: f64,
    pub shrink_vox_max: f64,
}

impl Default for DeformationRanges {
    fn default() -> Self {
        DeformationRanges { rot_deg_max: 2.0, trans_vox_max: 2.0, shrink_vox_max: 2.0 }
    }
}

impl DeformationRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rot_deg_max", self.rot_deg_max),
            ("trans_vox_max", self.trans_vox_max),
            ("shrink_vox_max", self.shrink_vox_max),
        ] {
            if !(0.0..=2.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 2]")));
            }
        }
        Ok(())
    }
}

/// One concrete deformation: rotation around the head-feet then the
/// left-right axis, translation along head-feet and left-right, and a
/// shrink along anterior-posterior and left-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationParams {
    pub rot_hf_deg: f64,
    pub rot_lr_deg: f64,
    pub trans_hf_vox: f64,
    pub trans_lr_vox: f64,
    pub shrink_ap_vox: f64,
    pub shrink_lr_vox: f64,
    pub seed: u64,
}

impl DeformationParams {
    pub fn identity() -> DeformationParams {
        DeformationParams {
            rot_hf_deg: 0.0,
            rot_lr_deg: 0.0,
            trans_hf_vox: 0.0,
            trans_lr_vox: 0.0,
            shrink_ap_vox: 0.0,
            shrink_lr_vox: 0.0,
            seed: 0,
        }
    }

    /// Draw parameters uniformly within the ranges.
    pub fn draw(ranges: &DeformationRanges, seed: u64, rng: &mut impl Rng) -> DeformationParams {
        let mut u = |hi: f64| if hi == 0.0 { 0.0 } else { rng.gen_range(0.0..=hi) };
        DeformationParams {
            rot_hf_deg: u(ranges.rot_deg_max),
            rot_lr_deg: u(ranges.rot_deg_max),
            trans_hf_vox: u(ranges.trans_vox_max),
            trans_lr_vox: u(ranges.trans_vox_max),
            shrink_ap_vox: u(ranges.shrink_vox_max),
            shrink_lr_vox: u(ranges.shrink_vox_max),
            seed,
        }
    }

    /// Magnitudes stay within 2; rotations and translations may be signed
    /// so that an inverse rotation is expressible, shrink may not grow.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rot_hf_deg", self.rot_hf_deg),
            ("rot_lr_deg", self.rot_lr_deg),
            ("trans_hf_vox", self.trans_hf_vox),
            ("trans_lr_vox", self.trans_lr_vox),
        ] {
            if !(-2.0..=2.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [-2, 2]")));
            }
        }
        for (name, v) in [("shrink_ap_vox", self.shrink_ap_vox), ("shrink_lr_vox", self.shrink_lr_vox)] {
            if !(0.0..=2.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 2]")));
            }
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn identity_mat() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn mat_inv(a: &Mat3) -> Mat3 {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    assert!(det.abs() > 1e-12, "singular deformation matrix");
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = match i {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match j {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            out[j][i] = sign * minor * inv_det; // adjugate transpose
        }
    }
    out
}

/// Rotation by `deg` in the plane perpendicular to `fixed_axis`.
fn rotation_about(fixed_axis: usize, deg: f64) -> Mat3 {
    let (i, j) = match fixed_axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let th = deg.to_radians();
    let (s, c) = th.sin_cos();
    let mut m = identity_mat();
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

/// Apply the misalignment to a volume. Content points are rotated around
/// the head-feet axis then the left-right axis, translated, then shrunk
/// about the volume center by `(n - k) / n` along the affected axes.
pub fn apply_misalignment(hr: &VolumeImage, params: &DeformationParams) -> Result<VolumeImage> {
    params.validate()?;
    let hf = hr.axis_index(AxisLabel::HeadFeet)?;
    let lr_axis = hr.axis_index(AxisLabel::LeftRight)?;
    let ap = hr.axis_index(AxisLabel::AnteriorPosterior)?;
    let shape = hr.shape();
    let dims = [shape.0 as f64, shape.1 as f64, shape.2 as f64];
    let center = [(dims[0] - 1.0) / 2.0, (dims[1] - 1.0) / 2.0, (dims[2] - 1.0) / 2.0];

    let rot = mat_mul(&rotation_about(lr_axis, params.rot_lr_deg), &rotation_about(hf, params.rot_hf_deg));
    let mut scale = identity_mat();
    scale[ap][ap] = (dims[ap] - params.shrink_ap_vox) / dims[ap];
    scale[lr_axis][lr_axis] = (dims[lr_axis] - params.shrink_lr_vox) / dims[lr_axis];
    let mut trans = [0.0; 3];
    trans[hf] = params.trans_hf_vox;
    trans[lr_axis] = params.trans_lr_vox;

    // Content map: p_out = S*(R*(p - c) + t) + c; sample the inverse.
    let forward = mat_mul(&scale, &rot);
    let inverse = mat_inv(&forward);
    let shift = mat_vec(&scale, trans);

    let data = Array3::from_shape_fn(shape, |(x, y, z)| {
        let rel = [
            x as f64 - center[0] - shift[0],
            y as f64 - center[1] - shift[1],
            z as f64 - center[2] - shift[2],
        ];
        let src = mat_vec(&inverse, rel);
        tricubic_sample(
            &hr.data,
            (src[0] + center[0], src[1] + center[1], src[2] + center[2]),
            Boundary::Zero,
        )
    });
    Ok(VolumeImage {
        data,
        spacing: hr.spacing,
        axis_labels: hr.axis_labels,
        intensity_range: hr.intensity_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_AXES;
    use ndarray::Array3;

    fn smooth_volume(shape: (usize, usize, usize)) -> VolumeImage {
        use std::f64::consts::PI;
        let (nx, ny, nz) = shape;
        let data = Array3::from_shape_fn(shape, |(x, y, z)| {
            0.5 + 0.2 * (2.0 * PI * x as f64 / nx as f64).sin() * (2.0 * PI * y as f64 / ny as f64).cos()
                + 0.1 * (2.0 * PI * z as f64 / nz as f64).sin()
        });
        let mut v = VolumeImage::new(data);
        v.axis_labels = DEFAULT_AXES;
        v
    }

    #[test]
    fn identity_params_identity_output() {
        let v = smooth_volume((16, 16, 8));
        let out = apply_misalignment(&v, &DeformationParams::identity()).unwrap();
        let max = (&out.data - &v.data).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 1e-12, "max {max}");
    }

    #[test]
    fn integer_translation_exact_shift() {
        let v = smooth_volume((12, 12, 8));
        let mut p = DeformationParams::identity();
        p.trans_hf_vox = 2.0; // H-F is the z axis under the default labels
        let out = apply_misalignment(&v, &p).unwrap();
        for x in 0..12 {
            for y in 0..12 {
                for z in 0..8 {
                    let expected = if z >= 2 { v.data[[x, y, z - 2]] } else { 0.0 };
                    assert!(
                        (out.data[[x, y, z]] - expected).abs() < 1e-12,
                        "voxel ({x},{y},{z})"
                    );
                }
            }
        }
    }

    #[test]
    fn shrink_scale_fraction() {
        // A 2-voxel shrink on a 256 extent is a 254/256 linear scale,
        // a 0.78% size change.
        let change: f64 = 1.0 - 254.0 / 256.0;
        assert!((change - 0.0078125).abs() < 1e-12);
        assert!((0.007..=0.009).contains(&change));
    }

    #[test]
    fn rotation_round_trip_small_error() {
        let v = smooth_volume((24, 24, 12));
        let mut fwd = DeformationParams::identity();
        fwd.rot_hf_deg = 2.0;
        fwd.rot_lr_deg = 1.5;
        let mut bwd = DeformationParams::identity();
        bwd.rot_hf_deg = -2.0;
        bwd.rot_lr_deg = -1.5;
        let rotated = apply_misalignment(&v, &fwd).unwrap();
        let back = apply_misalignment(&rotated, &bwd).unwrap();
        // The inverse of R_lr * R_hf is R_hf' * R_lr'; at <= 2 degrees the
        // commutator is far below the interpolation tolerance. Compare
        // away from the zero-filled border.
        let mut err = 0.0;
        let mut n = 0usize;
        for x in 4..20 {
            for y in 4..20 {
                for z in 2..10 {
                    err += (back.data[[x, y, z]] - v.data[[x, y, z]]).abs();
                    n += 1;
                }
            }
        }
        let mae = err / n as f64;
        assert!(mae < 1e-2, "mean abs error {mae}");
    }

    #[test]
    fn missing_axis_labels_rejected() {
        let mut v = smooth_volume((8, 8, 8));
        v.axis_labels = [AxisLabel::LeftRight, AxisLabel::LeftRight, AxisLabel::AnteriorPosterior];
        let err = apply_misalignment(&v, &DeformationParams::identity()).unwrap_err();
        assert!(err.to_string().contains("H-F"));
    }

    #[test]
    fn out_of_range_params_rejected() {
        let v = smooth_volume((8, 8, 8));
        let mut p = DeformationParams::identity();
        p.rot_hf_deg = 3.0;
        assert!(apply_misalignment(&v, &p).is_err());
    }
}
