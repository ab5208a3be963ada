//! Synthetic LR generation by 3D frequency-domain truncation.
//!
//! The downsampler transforms a volume with an unnormalized forward FFT,
//! keeps the centered low-frequency block of bins `[-m/2, m/2 - 1]` per
//! downsampled axis (m = n/s), inverse-transforms on the smaller grid
//! with 1/M normalization, and applies an explicit `1/(sx*sy*sz)` factor
//! so the DC coefficient — and hence the spatial mean — is preserved.
//!
//! For even block sizes the `+m/2` Nyquist plane has no slot of its own;
//! its coefficients are folded onto the `-m/2` plane (the two planes are
//! congruent modulo m). The folded spectrum is Hermitian-symmetric, so
//! the inverse transform is real up to floating-point noise, and
//! embedding the LR spectrum back at the block positions and truncating
//! again reproduces the LR volume exactly.

use ndarray::{Array3, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::volume::VolumeImage;
use crate::{Error, Result};

/// Integer downsampling factor per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScaleFactor {
    pub sx: usize,
    pub sy: usize,
    pub sz: usize,
}

/// The two scale factors the pipeline is exercised with.
pub const SUPPORTED_SCALES: [ScaleFactor; 2] =
    [ScaleFactor { sx: 2, sy: 2, sz: 1 }, ScaleFactor { sx: 2, sy: 2, sz: 2 }];

impl ScaleFactor {
    pub fn new(sx: usize, sy: usize, sz: usize) -> ScaleFactor {
        ScaleFactor { sx, sy, sz }
    }

    pub fn tuple(&self) -> (usize, usize, usize) {
        (self.sx, self.sy, self.sz)
    }

    pub fn product(&self) -> usize {
        self.sx * self.sy * self.sz
    }

    pub fn is_supported(&self) -> bool {
        SUPPORTED_SCALES.contains(self)
    }

    /// Parse the `"2x2x1"` CLI form.
    pub fn parse(s: &str) -> Result<ScaleFactor> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("bad scale factor {s:?} (expected AxBxC)")));
        }
        let p = |t: &str| {
            t.parse::<usize>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| Error::Config(format!("bad scale component {t:?}")))
        };
        Ok(ScaleFactor { sx: p(parts[0])?, sy: p(parts[1])?, sz: p(parts[2])? })
    }

    pub fn divides(&self, shape: (usize, usize, usize)) -> bool {
        shape.0 % self.sx == 0 && shape.1 % self.sy == 0 && shape.2 % self.sz == 0
    }

    pub fn lr_shape(&self, hr: (usize, usize, usize)) -> (usize, usize, usize) {
        (hr.0 / self.sx, hr.1 / self.sy, hr.2 / self.sz)
    }

    pub fn hr_shape(&self, lr: (usize, usize, usize)) -> (usize, usize, usize) {
        (lr.0 * self.sx, lr.1 * self.sy, lr.2 * self.sz)
    }
}

impl std::fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.sx, self.sy, self.sz)
    }
}

fn fft3(data: &mut Array3<Complex64>, inverse: bool) {
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        let n = data.shape()[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for mut lane in data.lanes_mut(Axis(axis)) {
            for (dst, src) in line.iter_mut().zip(lane.iter()) {
                *dst = *src;
            }
            fft.process(&mut line);
            for (dst, src) in lane.iter_mut().zip(line.iter()) {
                *dst = *src;
            }
        }
    }
}

/// Centered closed-block bin range for one axis: `[-m/2, m/2]` when the
/// axis is downsampled, otherwise every bin exactly once.
fn closed_block(n: usize, s: usize) -> Vec<i64> {
    let m = (n / s) as i64;
    if s == 1 {
        (-(m / 2)..m - m / 2).collect()
    } else {
        (-(m / 2)..=m / 2).collect()
    }
}

fn wrap(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

/// Truncate a raw array. Errors if dims are not divisible or fewer than
/// two frequency bins would survive on a downsampled axis.
pub fn truncate_array(hr: &Array3<f64>, scale: (usize, usize, usize)) -> Result<Array3<f64>> {
    let (nx, ny, nz) = hr.dim();
    let (sx, sy, sz) = scale;
    if nx % sx != 0 || ny % sy != 0 || nz % sz != 0 {
        return Err(Error::ShapeMismatch(format!(
            "volume {nx}x{ny}x{nz} not divisible by scale {sx}x{sy}x{sz}"
        )));
    }
    let (mx, my, mz) = (nx / sx, ny / sy, nz / sz);
    for (m, s) in [(mx, sx), (my, sy), (mz, sz)] {
        if s > 1 && m < 2 {
            return Err(Error::ShapeMismatch(
                "downsampled axis must keep at least 2 frequency bins".into(),
            ));
        }
    }

    let mut spectrum = hr.mapv(|v| Complex64::new(v, 0.0));
    fft3(&mut spectrum, false);

    let mut cropped = Array3::from_elem((mx, my, mz), Complex64::new(0.0, 0.0));
    for &kx in &closed_block(nx, sx) {
        for &ky in &closed_block(ny, sy) {
            for &kz in &closed_block(nz, sz) {
                let src = spectrum[[wrap(kx, nx), wrap(ky, ny), wrap(kz, nz)]];
                cropped[[wrap(kx, mx), wrap(ky, my), wrap(kz, mz)]] += src;
            }
        }
    }

    fft3(&mut cropped, true);
    let m_total = (mx * my * mz) as f64;
    let gain = 1.0 / (m_total * (sx * sy * sz) as f64);

    let mut max_re = 0.0f64;
    let mut max_im = 0.0f64;
    for v in cropped.iter() {
        max_re = max_re.max((v.re * gain).abs());
        max_im = max_im.max((v.im * gain).abs());
    }
    if max_im > 1e-9 * max_re.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric(format!(
            "frequency truncation produced imaginary residue {max_im:.3e} (max real {max_re:.3e})"
        )));
    }
    Ok(cropped.mapv(|v| v.re * gain))
}

/// Adjoint of [`truncate_array`] as a real-linear operator; used for the
/// backward pass of the differentiable truncation op.
pub fn truncate_adjoint(
    grad_lr: &Array3<f64>,
    hr_shape: (usize, usize, usize),
    scale: (usize, usize, usize),
) -> Array3<f64> {
    let (nx, ny, nz) = hr_shape;
    let (sx, sy, sz) = scale;
    let (mx, my, mz) = (nx / sx, ny / sy, nz / sz);
    assert_eq!(grad_lr.dim(), (mx, my, mz), "adjoint input shape");

    // Transpose of (1/(M s)) * Re . iDFT_m . fold . DFT_n, using that DFT
    // matrices are symmetric: scatter the unnormalized inverse transform
    // of the gradient to every congruent closed-block bin, then forward
    // transform on the HR grid.
    let mut g = grad_lr.mapv(|v| Complex64::new(v, 0.0));
    fft3(&mut g, true); // unnormalized inverse kernel e^{+2pi i k y / m}

    let mut padded = Array3::from_elem((nx, ny, nz), Complex64::new(0.0, 0.0));
    for &kx in &closed_block(nx, sx) {
        for &ky in &closed_block(ny, sy) {
            for &kz in &closed_block(nz, sz) {
                let val = g[[wrap(kx, mx), wrap(ky, my), wrap(kz, mz)]];
                padded[[wrap(kx, nx), wrap(ky, ny), wrap(kz, nz)]] += val;
            }
        }
    }
    fft3(&mut padded, false);
    let m_total = (mx * my * mz) as f64;
    let gain = 1.0 / (m_total * (sx * sy * sz) as f64);
    padded.mapv(|v| v.re * gain)
}

/// Ideal band-limited upsampling: embed the LR spectrum at the block
/// positions of the HR grid and inverse-transform. Right inverse of the
/// truncation in the sense that truncating the result returns the input.
pub fn zero_pad_upsample(lr: &Array3<f64>, scale: (usize, usize, usize)) -> Array3<f64> {
    let (mx, my, mz) = lr.dim();
    let (sx, sy, sz) = scale;
    let (nx, ny, nz) = (mx * sx, my * sy, mz * sz);

    let mut g = lr.mapv(|v| Complex64::new(v, 0.0));
    fft3(&mut g, false);

    let block = |n: usize, m: usize| -> Vec<i64> {
        let m = m as i64;
        let _ = n;
        (-(m / 2)..m - m / 2).collect()
    };
    let mut padded = Array3::from_elem((nx, ny, nz), Complex64::new(0.0, 0.0));
    let s_total = (sx * sy * sz) as f64;
    for &kx in &block(nx, mx) {
        for &ky in &block(ny, my) {
            for &kz in &block(nz, mz) {
                padded[[wrap(kx, nx), wrap(ky, ny), wrap(kz, nz)]] =
                    g[[wrap(kx, mx), wrap(ky, my), wrap(kz, mz)]] * s_total;
            }
        }
    }
    fft3(&mut padded, true);
    let n_total = (nx * ny * nz) as f64;
    padded.mapv(|v| v.re / n_total)
}

/// Downsample a volume by truncation; spacing grows by the scale factor.
pub fn kspace_truncate(hr: &VolumeImage, scale: ScaleFactor) -> Result<VolumeImage> {
    let data = truncate_array(&hr.data, scale.tuple())?;
    Ok(VolumeImage {
        data,
        spacing: [
            hr.spacing[0] * scale.sx as f64,
            hr.spacing[1] * scale.sy as f64,
            hr.spacing[2] * scale.sz as f64,
        ],
        axis_labels: hr.axis_labels,
        intensity_range: hr.intensity_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn rand_volume(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn constant_volume_preserved() {
        let hr = Array3::from_elem((8, 8, 4), 0.37);
        for scale in [(2, 2, 1), (2, 2, 2)] {
            let lr = truncate_array(&hr, scale).unwrap();
            assert!(lr.iter().all(|&v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn cosine_amplitude_preserved() {
        let hr = Array3::from_shape_fn((8, 8, 4), |(x, _, _)| (2.0 * PI * x as f64 / 8.0).cos());
        let lr = truncate_array(&hr, (2, 2, 2)).unwrap();
        assert_eq!(lr.dim(), (4, 4, 2));
        let expected = Array3::from_shape_fn((4, 4, 2), |(x, _, _)| (2.0 * PI * x as f64 / 4.0).cos());
        assert!(max_abs_diff(&lr, &expected) < 1e-12);
    }

    #[test]
    fn nyquist_frequency_removed() {
        let hr = Array3::from_shape_fn((8, 8, 4), |(x, _, _)| (PI * x as f64).cos());
        let lr = truncate_array(&hr, (2, 2, 1)).unwrap();
        assert!(lr.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn mean_preserved() {
        let hr = rand_volume((8, 8, 4), 3);
        let mean_hr = hr.sum() / hr.len() as f64;
        for scale in [(2, 2, 1), (2, 2, 2)] {
            let lr = truncate_array(&hr, scale).unwrap();
            let mean_lr = lr.sum() / lr.len() as f64;
            assert!((mean_hr - mean_lr).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_in_input() {
        let u = rand_volume((8, 8, 4), 4);
        let v = rand_volume((8, 8, 4), 5);
        let combo = u.mapv(|x| 0.7 * x) + &v.mapv(|x| -0.3 * x);
        let t_combo = truncate_array(&combo, (2, 2, 2)).unwrap();
        let t_u = truncate_array(&u, (2, 2, 2)).unwrap();
        let t_v = truncate_array(&v, (2, 2, 2)).unwrap();
        let recomposed = t_u.mapv(|x| 0.7 * x) + &t_v.mapv(|x| -0.3 * x);
        assert!(max_abs_diff(&t_combo, &recomposed) < 1e-9);
    }

    #[test]
    fn zero_pad_round_trip_exact() {
        let hr = rand_volume((8, 8, 4), 6);
        for scale in [(2, 2, 1), (2, 2, 2)] {
            let lr = truncate_array(&hr, scale).unwrap();
            let up = zero_pad_upsample(&lr, scale);
            let lr2 = truncate_array(&up, scale).unwrap();
            assert!(max_abs_diff(&lr, &lr2) < 1e-12);
        }
    }

    #[test]
    fn adjoint_dot_product_identity() {
        // <T x, y> must equal <x, T^T y> for the backward pass to be sound.
        let x = rand_volume((8, 6, 4), 7);
        for scale in [(2, 2, 1), (2, 2, 2)] {
            let tx = truncate_array(&x, scale).unwrap();
            let y = rand_volume(tx.dim(), 8);
            let lhs: f64 = (&tx * &y).sum();
            let aty = truncate_adjoint(&y, x.dim(), scale);
            let rhs: f64 = (&x * &aty).sum();
            assert!((lhs - rhs).abs() < 1e-10, "scale {scale:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn indivisible_shape_rejected() {
        let hr = Array3::zeros((7, 8, 4));
        assert!(truncate_array(&hr, (2, 2, 1)).is_err());
    }

    #[test]
    fn too_few_surviving_bins_rejected() {
        let hr = Array3::zeros((8, 8, 2));
        assert!(truncate_array(&hr, (2, 2, 2)).is_err());
    }

    #[test]
    fn spacing_scales_with_factor() {
        let mut vol = crate::volume::VolumeImage::new(rand_volume((8, 8, 4), 9));
        vol.spacing = [0.7, 0.7, 1.4];
        let lr = kspace_truncate(&vol, ScaleFactor::new(2, 2, 2)).unwrap();
        assert_eq!(lr.shape(), (4, 4, 2));
        assert_eq!(lr.spacing, [1.4, 1.4, 2.8]);
    }

    #[test]
    fn scale_factor_parsing() {
        assert_eq!(ScaleFactor::parse("2x2x1").unwrap(), ScaleFactor::new(2, 2, 1));
        assert!(ScaleFactor::parse("2x2").is_err());
        assert!(ScaleFactor::parse("2x0x1").is_err());
        assert!(ScaleFactor::new(2, 2, 2).is_supported());
        assert!(!ScaleFactor::new(3, 2, 1).is_supported());
    }
}
