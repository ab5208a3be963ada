//! Direct 3D convolution kernels built on im2col + matrix multiply.
//!
//! Shapes follow the crate-wide tensor layout: inputs `(B, Cin, X, Y, Z)`,
//! convolution weights `(Cout, Cin, kx, ky, kz)`, transposed-convolution
//! weights `(Cin, Cout, kx, ky, kz)`. Batch items are processed in
//! parallel; gradient contributions are reduced in batch order so results
//! are bit-reproducible across runs.

use ndarray::{s, Array2, Array5, ArrayView4, ArrayViewMut4, Axis};
use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize, usize), stride: (usize, usize, usize), pad: (usize, usize, usize)) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output spatial extent of a forward convolution.
    pub fn out_dim(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        let f = |n: usize, k: usize, st: usize, p: usize| (n + 2 * p - k) / st + 1;
        (
            f(input.0, self.kernel.0, self.stride.0, self.pad.0),
            f(input.1, self.kernel.1, self.stride.1, self.pad.1),
            f(input.2, self.kernel.2, self.stride.2, self.pad.2),
        )
    }

    /// Output spatial extent of a transposed convolution.
    pub fn out_dim_transposed(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        let f = |n: usize, k: usize, st: usize, p: usize| (n - 1) * st + k - 2 * p;
        (
            f(input.0, self.kernel.0, self.stride.0, self.pad.0),
            f(input.1, self.kernel.1, self.stride.1, self.pad.1),
            f(input.2, self.kernel.2, self.stride.2, self.pad.2),
        )
    }
}

/// Gather sliding windows of one sample into a (Cin*kx*ky*kz, nvox) matrix.
fn im2col<T: Scalar>(x: &ArrayView4<T>, spec: &ConvSpec) -> Array2<T> {
    let (cin, nx, ny, nz) = x.dim();
    let (kx, ky, kz) = spec.kernel;
    let (sx, sy, sz) = spec.stride;
    let (px, py, pz) = spec.pad;
    let (ox, oy, oz) = spec.out_dim((nx, ny, nz));
    let nvox = ox * oy * oz;
    let mut col = Array2::zeros((cin * kx * ky * kz, nvox));
    for c in 0..cin {
        for dx in 0..kx {
            for dy in 0..ky {
                for dz in 0..kz {
                    let row = ((c * kx + dx) * ky + dy) * kz + dz;
                    let mut row_view = col.row_mut(row);
                    let mut i = 0usize;
                    for outx in 0..ox {
                        let ix = (outx * sx + dx) as isize - px as isize;
                        let in_x = ix >= 0 && (ix as usize) < nx;
                        for outy in 0..oy {
                            let iy = (outy * sy + dy) as isize - py as isize;
                            let in_y = iy >= 0 && (iy as usize) < ny;
                            for outz in 0..oz {
                                let iz = (outz * sz + dz) as isize - pz as isize;
                                if in_x && in_y && iz >= 0 && (iz as usize) < nz {
                                    row_view[i] = x[[c, ix as usize, iy as usize, iz as usize]];
                                }
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column matrix back into a (Cin, nx, ny, nz) sample;
/// the adjoint of [`im2col`].
fn col2im<T: Scalar>(col: &Array2<T>, out: &mut ArrayViewMut4<T>, spec: &ConvSpec, out_spatial: (usize, usize, usize)) {
    let (cin, nx, ny, nz) = out.dim();
    let (kx, ky, kz) = spec.kernel;
    let (sx, sy, sz) = spec.stride;
    let (px, py, pz) = spec.pad;
    let (ox, oy, oz) = out_spatial;
    for c in 0..cin {
        for dx in 0..kx {
            for dy in 0..ky {
                for dz in 0..kz {
                    let row = ((c * kx + dx) * ky + dy) * kz + dz;
                    let row_view = col.row(row);
                    let mut i = 0usize;
                    for outx in 0..ox {
                        let ix = (outx * sx + dx) as isize - px as isize;
                        let in_x = ix >= 0 && (ix as usize) < nx;
                        for outy in 0..oy {
                            let iy = (outy * sy + dy) as isize - py as isize;
                            let in_y = iy >= 0 && (iy as usize) < ny;
                            for outz in 0..oz {
                                let iz = (outz * sz + dz) as isize - pz as isize;
                                if in_x && in_y && iz >= 0 && (iz as usize) < nz {
                                    out[[c, ix as usize, iy as usize, iz as usize]] =
                                        out[[c, ix as usize, iy as usize, iz as usize]] + row_view[i];
                                }
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn weight_matrix<T: Scalar>(w: &Tensor<T>) -> Array2<T> {
    let (cout, cin, kx, ky, kz) = w.dim();
    w.view()
        .into_shape_with_order((cout, cin * kx * ky * kz))
        .expect("contiguous weight")
        .to_owned()
}

/// Forward convolution. `bias` has shape (1, Cout, 1, 1, 1) when present.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    let (b, cin, nx, ny, nz) = x.dim();
    let (cout, wcin, _, _, _) = w.dim();
    assert_eq!(cin, wcin, "conv3d channel mismatch: input {cin}, weight {wcin}");
    let (ox, oy, oz) = spec.out_dim((nx, ny, nz));
    let wm = weight_matrix(w);
    let mut out = Array5::zeros((b, cout, ox, oy, oz));
    let samples: Vec<Array2<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let sample = x.index_axis(Axis(0), bi);
            let col = im2col(&sample, spec);
            wm.dot(&col)
        })
        .collect();
    for (bi, mat) in samples.into_iter().enumerate() {
        let reshaped = mat.into_shape_with_order((cout, ox, oy, oz)).expect("conv output shape");
        out.slice_mut(s![bi, .., .., .., ..]).assign(&reshaped);
    }
    if let Some(bias) = bias {
        for c in 0..cout {
            let bv = bias[[0, c, 0, 0, 0]];
            out.slice_mut(s![.., c, .., .., ..]).mapv_inplace(|v| v + bv);
        }
    }
    out
}

/// Gradients of [`conv3d`] with respect to input, weight, and bias.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    with_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (dx, dw, db) = conv3d_backward_selective(x, w, grad_out, spec, true, true, with_bias);
    (dx.unwrap(), dw.unwrap(), db)
}

/// Like [`conv3d_backward`] but computes only the requested gradients.
pub fn conv3d_backward_selective<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, cin, nx, ny, nz) = x.dim();
    let (cout, _, kx, ky, kz) = w.dim();
    let (ox, oy, oz) = spec.out_dim((nx, ny, nz));
    let nvox = ox * oy * oz;
    let wm = weight_matrix(w);

    let per_sample: Vec<(Option<Array2<T>>, Option<Array2<T>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let g = grad_out
                .slice(s![bi, .., .., .., ..])
                .into_shape_with_order((cout, nvox))
                .expect("contiguous grad")
                .to_owned();
            let dw = need_dw.then(|| {
                let sample = x.index_axis(Axis(0), bi);
                let col = im2col(&sample, spec);
                g.dot(&col.t())
            });
            let dcol = need_dx.then(|| wm.t().dot(&g));
            (dw, dcol)
        })
        .collect();

    let mut dw_total = need_dw.then(|| Array2::<T>::zeros((cout, cin * kx * ky * kz)));
    let mut dx = need_dx.then(|| Array5::<T>::zeros((b, cin, nx, ny, nz)));
    for (bi, (dw, dcol)) in per_sample.into_iter().enumerate() {
        if let (Some(total), Some(dw)) = (dw_total.as_mut(), dw) {
            *total += &dw;
        }
        if let (Some(dx), Some(dcol)) = (dx.as_mut(), dcol) {
            let mut slot = dx.slice_mut(s![bi, .., .., .., ..]);
            col2im(&dcol, &mut slot, spec, (ox, oy, oz));
        }
    }
    let dw = dw_total.map(|t| {
        t.into_shape_with_order((cout, cin, kx, ky, kz))
            .expect("weight grad shape")
    });
    let db = need_db.then(|| {
        let mut db = Array5::zeros((1, cout, 1, 1, 1));
        for c in 0..cout {
            db[[0, c, 0, 0, 0]] = grad_out.slice(s![.., c, .., .., ..]).sum();
        }
        db
    });
    (dx, dw, db)
}

/// Transposed convolution; weights are (Cin, Cout, kx, ky, kz).
pub fn conv3d_transposed<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Tensor<T> {
    let (b, cin, nx, ny, nz) = x.dim();
    let (wcin, cout, kx, ky, kz) = w.dim();
    assert_eq!(cin, wcin, "conv3d_transposed channel mismatch");
    let (ox, oy, oz) = spec.out_dim_transposed((nx, ny, nz));
    let nvox = nx * ny * nz;
    // As a matrix: columns of the "col" space correspond to input voxels,
    // rows to (Cout, kernel tap); scattering them is col2im on the output grid.
    let wm = w
        .view()
        .into_shape_with_order((cin, cout * kx * ky * kz))
        .expect("contiguous weight")
        .to_owned();
    let per_sample: Vec<Array2<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xin = x
                .slice(s![bi, .., .., .., ..])
                .into_shape_with_order((cin, nvox))
                .expect("contiguous input")
                .to_owned();
            wm.t().dot(&xin)
        })
        .collect();
    let mut out = Array5::zeros((b, cout, ox, oy, oz));
    for (bi, dcol) in per_sample.into_iter().enumerate() {
        let mut slot = out.slice_mut(s![bi, .., .., .., ..]);
        col2im(&dcol, &mut slot, spec, (nx, ny, nz));
    }
    if let Some(bias) = bias {
        for c in 0..cout {
            let bv = bias[[0, c, 0, 0, 0]];
            out.slice_mut(s![.., c, .., .., ..]).mapv_inplace(|v| v + bv);
        }
    }
    out
}

/// Gradients of [`conv3d_transposed`].
pub fn conv3d_transposed_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    with_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (dx, dw, db) = conv3d_transposed_backward_selective(x, w, grad_out, spec, true, true, with_bias);
    (dx.unwrap(), dw.unwrap(), db)
}

/// Like [`conv3d_transposed_backward`] but computes only the requested gradients.
pub fn conv3d_transposed_backward_selective<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, cin, nx, ny, nz) = x.dim();
    let (_, cout, kx, ky, kz) = w.dim();
    let nvox = nx * ny * nz;
    let wm = w
        .view()
        .into_shape_with_order((cin, cout * kx * ky * kz))
        .expect("contiguous weight")
        .to_owned();

    // dX[ci, i] = sum_{co,k} W[ci,co,k] * dY[co, stride*i + k - pad]:
    // an ordinary gather of dY with this op's own geometry.
    let per_sample: Vec<(Option<Array2<T>>, Option<Array2<T>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let gsample = grad_out.index_axis(Axis(0), bi);
            let gcol = im2col(&gsample, spec); // (Cout*k^3, nvox_in)
            let dx = need_dx.then(|| wm.dot(&gcol));
            let dw = need_dw.then(|| {
                let xin = x
                    .slice(s![bi, .., .., .., ..])
                    .into_shape_with_order((cin, nvox))
                    .expect("contiguous input")
                    .to_owned();
                xin.dot(&gcol.t())
            });
            (dx, dw)
        })
        .collect();

    let mut dx = need_dx.then(|| Array5::<T>::zeros((b, cin, nx, ny, nz)));
    let mut dw_total = need_dw.then(|| Array2::<T>::zeros((cin, cout * kx * ky * kz)));
    for (bi, (dxs, dws)) in per_sample.into_iter().enumerate() {
        if let (Some(dx), Some(dxs)) = (dx.as_mut(), dxs) {
            let reshaped = dxs.into_shape_with_order((cin, nx, ny, nz)).expect("dx shape");
            dx.slice_mut(s![bi, .., .., .., ..]).assign(&reshaped);
        }
        if let (Some(total), Some(dws)) = (dw_total.as_mut(), dws) {
            *total += &dws;
        }
    }
    let dw = dw_total.map(|t| {
        t.into_shape_with_order((cin, cout, kx, ky, kz))
            .expect("weight grad shape")
    });
    let db = need_db.then(|| {
        let mut db = Array5::zeros((1, cout, 1, 1, 1));
        for c in 0..cout {
            db[[0, c, 0, 0, 0]] = grad_out.slice(s![.., c, .., .., ..]).sum();
        }
        db
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;

    fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let (b, cin, nx, ny, nz) = x.dim();
        let (cout, _, kx, ky, kz) = w.dim();
        let (ox, oy, oz) = spec.out_dim((nx, ny, nz));
        let mut out = Array5::zeros((b, cout, ox, oy, oz));
        for bi in 0..b {
            for co in 0..cout {
                for i in 0..ox {
                    for j in 0..oy {
                        for k in 0..oz {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                for dx in 0..kx {
                                    for dy in 0..ky {
                                        for dz in 0..kz {
                                            let ix = (i * spec.stride.0 + dx) as isize - spec.pad.0 as isize;
                                            let iy = (j * spec.stride.1 + dy) as isize - spec.pad.1 as isize;
                                            let iz = (k * spec.stride.2 + dz) as isize - spec.pad.2 as isize;
                                            if ix >= 0
                                                && iy >= 0
                                                && iz >= 0
                                                && (ix as usize) < nx
                                                && (iy as usize) < ny
                                                && (iz as usize) < nz
                                            {
                                                acc += x[[bi, ci, ix as usize, iy as usize, iz as usize]]
                                                    * w[[co, ci, dx, dy, dz]];
                                            }
                                        }
                                    }
                                }
                            }
                            out[[bi, co, i, j, k]] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: (usize, usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_reference() {
        let spec = ConvSpec::new((3, 3, 3), (1, 1, 1), (1, 1, 1));
        let x = rand_tensor((2, 3, 5, 4, 3), 1);
        let w = rand_tensor((4, 3, 3, 3, 3), 2);
        let fast = conv3d(&x, &w, None, &spec);
        let slow = reference_conv(&x, &w, &spec);
        let max = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "max diff {max}");
    }

    #[test]
    fn strided_conv_matches_reference() {
        let spec = ConvSpec::new((3, 3, 3), (2, 2, 1), (1, 1, 1));
        let x = rand_tensor((1, 2, 8, 6, 3), 3);
        let w = rand_tensor((5, 2, 3, 3, 3), 4);
        let fast = conv3d(&x, &w, None, &spec);
        let slow = reference_conv(&x, &w, &spec);
        assert_eq!(fast.dim(), (1, 5, 4, 3, 3));
        let max = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "max diff {max}");
    }

    #[test]
    fn conv_backward_finite_difference() {
        let spec = ConvSpec::new((3, 3, 3), (1, 1, 1), (1, 1, 1));
        let x = rand_tensor((1, 2, 4, 4, 3), 5);
        let w = rand_tensor((3, 2, 3, 3, 3), 6);
        let b = rand_tensor((1, 3, 1, 1, 1), 7);
        let proj = rand_tensor((1, 3, 4, 4, 3), 8);
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            (&conv3d(x, w, Some(b), &spec) * &proj).sum()
        };
        let (dx, dw, db) = conv3d_backward(&x, &w, &proj, &spec, true);
        let db = db.unwrap();
        let eps = 1e-6;
        for (idx, analytic) in [(0usize, dx[[0, 1, 2, 1, 1]]), (1, dw[[2, 0, 1, 2, 0]]), (2, db[[0, 1, 0, 0, 0]])] {
            let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
            let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
            match idx {
                0 => {
                    xp[[0, 1, 2, 1, 1]] += eps;
                    xm[[0, 1, 2, 1, 1]] -= eps;
                }
                1 => {
                    wp[[2, 0, 1, 2, 0]] += eps;
                    wm[[2, 0, 1, 2, 0]] -= eps;
                }
                _ => {
                    bp[[0, 1, 0, 0, 0]] += eps;
                    bm[[0, 1, 0, 0, 0]] -= eps;
                }
            }
            let fd = (f(&xp, &wp, &bp) - f(&xm, &wm, &bm)) / (2.0 * eps);
            assert!((fd - analytic).abs() < 1e-7, "fd {fd} vs analytic {analytic}");
        }
    }

    #[test]
    fn transposed_conv_is_conv_adjoint() {
        // <conv(x), y> == <x, convT(y)> when convT uses the same geometry
        // and the transposed weight layout.
        let spec = ConvSpec::new((3, 3, 4), (1, 1, 2), (1, 1, 1));
        let x = rand_tensor((1, 3, 4, 4, 6), 9);
        let w = rand_tensor((2, 3, 3, 3, 4), 10); // conv weights (Cout=2, Cin=3)
        let fwd = conv3d(&x, &w, None, &spec);
        let y = rand_tensor(fwd.dim(), 11);
        let lhs = (&fwd * &y).sum();
        // The same buffer read as (Cin_t=2, Cout_t=3, k) is the adjoint's weight.
        let back = conv3d_transposed(&y, &w, None, &spec);
        assert_eq!(back.dim(), x.dim());
        let rhs = (&back * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_backward_finite_difference() {
        let spec = ConvSpec::new((3, 3, 4), (1, 1, 2), (1, 1, 1));
        let x = rand_tensor((1, 2, 3, 3, 3), 12);
        let w = rand_tensor((2, 3, 3, 3, 4), 13);
        let b = rand_tensor((1, 3, 1, 1, 1), 14);
        let out = conv3d_transposed(&x, &w, Some(&b), &spec);
        assert_eq!(out.dim(), (1, 3, 3, 3, 6));
        let proj = rand_tensor(out.dim(), 15);
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            (&conv3d_transposed(x, w, Some(b), &spec) * &proj).sum()
        };
        let (dx, dw, db) = conv3d_transposed_backward(&x, &w, &proj, &spec, true);
        let db = db.unwrap();
        let eps = 1e-6;

        let mut xp = x.clone();
        xp[[0, 1, 1, 2, 1]] += eps;
        let mut xm = x.clone();
        xm[[0, 1, 1, 2, 1]] -= eps;
        let fd = (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * eps);
        assert!((fd - dx[[0, 1, 1, 2, 1]]).abs() < 1e-7);

        let mut wp = w.clone();
        wp[[1, 2, 0, 1, 3]] += eps;
        let mut wm2 = w.clone();
        wm2[[1, 2, 0, 1, 3]] -= eps;
        let fd = (f(&x, &wp, &b) - f(&x, &wm2, &b)) / (2.0 * eps);
        assert!((fd - dw[[1, 2, 0, 1, 3]]).abs() < 1e-7);

        let mut bp = b.clone();
        bp[[0, 2, 0, 0, 0]] += eps;
        let mut bm = b.clone();
        bm[[0, 2, 0, 0, 0]] -= eps;
        let fd = (f(&x, &w, &bp) - f(&x, &w, &bm)) / (2.0 * eps);
        assert!((fd - db[[0, 2, 0, 0, 0]]).abs() < 1e-7);
    }
}
