//! Deterministic synthetic test volumes: a handful of smooth ellipsoids
//! with distinct intensities over a low-frequency background, plus fine
//! in-plane sinusoidal texture whose frequency lies above the LR band so
//! downsampling visibly destroys it.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::volume::{VolumeImage, DEFAULT_AXES};

struct Ellipsoid {
    center: [f64; 3],
    inv_semi: [f64; 3],
    intensity: f64,
}

/// Generate a normalized phantom volume. Identical (shape, seed) pairs
/// produce identical volumes.
pub fn make_phantom(shape: (usize, usize, usize), seed: u64) -> VolumeImage {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dims = [shape.0 as f64, shape.1 as f64, shape.2 as f64];

    let n_ellipsoids = rng.gen_range(5..=15);
    let ellipsoids: Vec<Ellipsoid> = (0..n_ellipsoids)
        .map(|i| {
            let center = [
                rng.gen_range(0.2..0.8) * dims[0],
                rng.gen_range(0.2..0.8) * dims[1],
                rng.gen_range(0.2..0.8) * dims[2],
            ];
            let semi = [
                rng.gen_range(0.08..0.3) * dims[0],
                rng.gen_range(0.08..0.3) * dims[1],
                rng.gen_range(0.15..0.45) * dims[2],
            ];
            // Spread intensities so the objects stay distinguishable.
            let base = 0.3 + 0.7 * (i as f64 + rng.gen_range(0.0..0.8)) / n_ellipsoids as f64;
            let sign = if i % 4 == 3 { -0.6 } else { 1.0 };
            Ellipsoid {
                center,
                inv_semi: [1.0 / semi[0], 1.0 / semi[1], 1.0 / semi[2]],
                intensity: base * sign,
            }
        })
        .collect();

    // In-plane texture above the LR passband for a x2 in-plane scale.
    let n_waves = 3;
    let waves: Vec<([f64; 3], [f64; 3], f64)> = (0..n_waves)
        .map(|_| {
            let fx = rng.gen_range(dims[0] / 4.0 + 1.0..(0.45 * dims[0]).max(dims[0] / 4.0 + 2.0));
            let fy = rng.gen_range(dims[1] / 4.0 + 1.0..(0.45 * dims[1]).max(dims[1] / 4.0 + 2.0));
            let fz = rng.gen_range(0.0..(dims[2] / 4.0).max(1.0));
            let phases = [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ];
            let amp = rng.gen_range(0.04..0.09);
            ([fx, fy, fz], phases, amp)
        })
        .collect();

    let bg_amp = rng.gen_range(0.05..0.15);
    let bg_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let tau = std::f64::consts::TAU;
    let mut data = Array3::from_shape_fn(shape, |(x, y, z)| {
        let p = [x as f64, y as f64, z as f64];
        let mut v = bg_amp * (tau * p[0] / dims[0] + bg_phase).cos() * (tau * p[1] / dims[1]).cos();
        for e in &ellipsoids {
            let r2 = (0..3)
                .map(|a| ((p[a] - e.center[a]) * e.inv_semi[a]).powi(2))
                .sum::<f64>();
            // Smooth edge: ~1 inside, ~0 outside, width set by the logistic.
            v += e.intensity / (1.0 + ((r2 - 1.0) / 0.08).exp());
        }
        for (freq, phase, amp) in &waves {
            v += amp
                * (tau * freq[0] * p[0] / dims[0] + phase[0]).cos()
                * (tau * freq[1] * p[1] / dims[1] + phase[1]).cos()
                * (tau * freq[2] * p[2] / dims[2] + phase[2]).cos();
        }
        v
    });

    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    data.mapv_inplace(|v| (v - lo) / (hi - lo));

    let mut vol = VolumeImage::new(data);
    vol.spacing = [0.7, 0.7, 0.7];
    vol.axis_labels = DEFAULT_AXES;
    vol.intensity_range = (lo, hi);
    vol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = make_phantom((32, 32, 8), 7);
        let b = make_phantom((32, 32, 8), 7);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn seeds_differ_substantially() {
        let a = make_phantom((32, 32, 8), 0);
        let b = make_phantom((32, 32, 8), 1);
        let total = a.data.len();
        let differing = a
            .data
            .iter()
            .zip(b.data.iter())
            .filter(|(x, y)| (**x - **y).abs() > 0.05)
            .count();
        assert!(
            differing as f64 >= 0.10 * total as f64,
            "only {differing}/{total} voxels differ by > 0.05"
        );
    }

    #[test]
    fn normalized_to_unit_range() {
        let v = make_phantom((24, 24, 8), 3);
        let lo = v.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn truncation_destroys_texture() {
        // The high-frequency texture must make the downsampled volume
        // measurably different from the original on the shared grid.
        let v = make_phantom((32, 32, 8), 11);
        let lr = crate::kspace::truncate_array(&v.data, (2, 2, 2)).unwrap();
        let up = crate::kspace::zero_pad_upsample(&lr, (2, 2, 2));
        let mae: f64 =
            (&up - &v.data).iter().map(|d| d.abs()).sum::<f64>() / v.data.len() as f64;
        assert!(mae > 0.005, "downsampling barely changed the phantom (mae {mae})");
    }
}
