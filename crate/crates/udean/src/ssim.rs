//! Windowed structural similarity, computed per axial slice (the last
//! axis) with a Gaussian window and averaged over slices. The same
//! window definition feeds both this metric and the differentiable loss.

use ndarray::{Array2, Array3};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range L of the data (1 for unit-normalized volumes).
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, data_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (0.01 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.data_range).powi(2)
    }
}

/// Normalized 2D Gaussian window.
pub fn gaussian_window(window: usize, sigma: f64) -> Array2<f64> {
    let half = (window as f64 - 1.0) / 2.0;
    let mut w = Array2::from_shape_fn((window, window), |(i, j)| {
        let di = i as f64 - half;
        let dj = j as f64 - half;
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let total = w.sum();
    w.mapv_inplace(|v| v / total);
    w
}

/// Mean SSIM over all windows of all axial slices.
pub fn ssim_metric(x: &Array3<f64>, y: &Array3<f64>, cfg: &SsimConfig) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ssim operands {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let (nx, ny, nz) = x.dim();
    let w = cfg.window;
    if nx < w || ny < w {
        return Err(Error::ShapeMismatch(format!(
            "slice {nx}x{ny} smaller than the {w}x{w} window"
        )));
    }
    let win = gaussian_window(w, cfg.sigma);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let (ox, oy) = (nx - w + 1, ny - w + 1);

    let mut slice_mean_sum = 0.0;
    for z in 0..nz {
        let mut acc = 0.0;
        for wx in 0..ox {
            for wy in 0..oy {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for i in 0..w {
                    for j in 0..w {
                        let g = win[[i, j]];
                        let xv = x[[wx + i, wy + j, z]];
                        let yv = y[[wx + i, wy + j, z]];
                        mx += g * xv;
                        my += g * yv;
                        mxx += g * xv * xv;
                        myy += g * yv * yv;
                        mxy += g * xv * yv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                acc += num / den;
            }
        }
        slice_mean_sum += acc / (ox * oy) as f64;
    }
    Ok(slice_mean_sum / nz as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_volume(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identical_inputs_score_one() {
        let x = rand_volume((32, 32, 3), 1);
        let s = ssim_metric(&x, &x, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_arguments() {
        let x = rand_volume((32, 32, 3), 2);
        let y = rand_volume((32, 32, 3), 3);
        let cfg = SsimConfig::default();
        let a = ssim_metric(&x, &y, &cfg).unwrap();
        let b = ssim_metric(&y, &x, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_pair_matches_closed_form() {
        // Constant windows have zero variance; only the luminance term
        // and the stabilizing constants remain.
        let cfg = SsimConfig::default();
        let c = 0.4;
        let d = 0.2;
        let x = Array3::from_elem((16, 16, 2), c);
        let y = Array3::from_elem((16, 16, 2), c + d);
        let got = ssim_metric(&x, &y, &cfg).unwrap();
        let (c1, c2) = (cfg.c1(), cfg.c2());
        let expected = ((2.0 * c * (c + d) + c1) * c2) / ((c * c + (c + d) * (c + d) + c1) * c2);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn window_larger_than_slice_rejected() {
        let x = rand_volume((8, 8, 3), 4);
        assert!(ssim_metric(&x, &x, &SsimConfig::default()).is_err());
    }

    #[test]
    fn smaller_window_configs_accepted() {
        let x = rand_volume((8, 8, 3), 5);
        let y = rand_volume((8, 8, 3), 6);
        let cfg = SsimConfig { window: 7, ..SsimConfig::default() };
        let s = ssim_metric(&x, &y, &cfg).unwrap();
        assert!(s.is_finite() && s < 1.0);
    }

    #[test]
    fn gaussian_window_normalized() {
        let w = gaussian_window(11, 1.5);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        // Center dominates corners.
        assert!(w[[5, 5]] > w[[0, 0]] * 100.0);
    }
}
