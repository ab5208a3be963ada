//! Full-volume SR reconstruction: overlapping LR patches pushed through
//! the LR encoder and SR decoder only, blended by uniform averaging with
//! per-voxel weight normalization.

use ndarray::{s, Array3, Array5};

use crate::network::ComponentSet;
use crate::tape::Tape;
use crate::tensor::Scalar;
use crate::volume::VolumeImage;
use crate::{Error, Result};

/// Patch tiling for reconstruction. Default stride is half the patch
/// in-plane and one slice through-slice; the final origin along each
/// axis is clamped so every voxel is covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchPlan {
    pub patch_shape: (usize, usize, usize),
    pub stride: (usize, usize, usize),
}

impl StitchPlan {
    pub fn new(patch_shape: (usize, usize, usize)) -> StitchPlan {
        StitchPlan {
            patch_shape,
            stride: ((patch_shape.0 / 2).max(1), (patch_shape.1 / 2).max(1), 1),
        }
    }

    pub fn with_stride(patch_shape: (usize, usize, usize), stride: (usize, usize, usize)) -> StitchPlan {
        StitchPlan { patch_shape, stride }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_shape;
        let s = self.stride;
        if s.0 == 0 || s.1 == 0 || s.2 == 0 {
            return Err(Error::Config("stitch stride must be positive".into()));
        }
        if s.0 > p.0 || s.1 > p.1 || s.2 > p.2 {
            return Err(Error::Config(format!(
                "stitch stride {s:?} exceeds patch {p:?}; voxels would be uncovered"
            )));
        }
        Ok(())
    }
}

fn axis_origins(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = n - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// All patch origins of the plan over an LR volume.
pub fn patch_origins(lr_shape: (usize, usize, usize), plan: &StitchPlan) -> Result<Vec<(usize, usize, usize)>> {
    plan.validate()?;
    let p = plan.patch_shape;
    if p.0 > lr_shape.0 || p.1 > lr_shape.1 || p.2 > lr_shape.2 {
        return Err(Error::ShapeMismatch(format!(
            "volume {lr_shape:?} smaller than reconstruction patch {p:?}"
        )));
    }
    let xs = axis_origins(lr_shape.0, p.0, plan.stride.0);
    let ys = axis_origins(lr_shape.1, p.1, plan.stride.1);
    let zs = axis_origins(lr_shape.2, p.2, plan.stride.2);
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                out.push((x, y, z));
            }
        }
    }
    Ok(out)
}

/// Reconstruct the SR volume for an LR input using only the inference
/// path (LR encoder, SR decoder). Output is clamped to [0, 1].
pub fn reconstruct<T: Scalar>(
    lr: &VolumeImage,
    net: &ComponentSet<T>,
    plan: &StitchPlan,
) -> Result<VolumeImage> {
    let scale = net.config.scale;
    let origins = patch_origins(lr.shape(), plan)?;
    let (px, py, pz) = plan.patch_shape;
    let hr_shape = scale.hr_shape(lr.shape());
    let (hpx, hpy, hpz) = scale.hr_shape((px, py, pz));

    let mut acc = Array3::<f64>::zeros(hr_shape);
    let mut weight = Array3::<f64>::zeros(hr_shape);

    // Forward patches in small batches; accumulation stays in origin
    // order so sums are reproducible.
    for chunk in origins.chunks(4) {
        let mut batch = Array5::<T>::zeros((chunk.len(), 1, px, py, pz));
        for (bi, &(ox, oy, oz)) in chunk.iter().enumerate() {
            for i in 0..px {
                for j in 0..py {
                    for k in 0..pz {
                        batch[[bi, 0, i, j, k]] = T::from_f64(lr.data[[ox + i, oy + j, oz + k]]);
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let f = net.lr_encoder.forward(&mut tape, x, false)?;
        let sr = net.sr_decoder.forward(&mut tape, f, false)?;
        let sr_val = tape.value(sr);
        for (bi, &(ox, oy, oz)) in chunk.iter().enumerate() {
            let (hx, hy, hz) = (ox * scale.sx, oy * scale.sy, oz * scale.sz);
            for i in 0..hpx {
                for j in 0..hpy {
                    for k in 0..hpz {
                        acc[[hx + i, hy + j, hz + k]] += sr_val[[bi, 0, i, j, k]].into_f64();
                        weight[[hx + i, hy + j, hz + k]] += 1.0;
                    }
                }
            }
        }
    }

    ndarray::Zip::from(&mut acc).and(&weight).for_each(|a, &w| {
        debug_assert!(w > 0.0, "uncovered voxel in reconstruction");
        *a = (*a / w).clamp(0.0, 1.0);
    });

    Ok(VolumeImage {
        data: acc,
        spacing: [
            lr.spacing[0] / scale.sx as f64,
            lr.spacing[1] / scale.sy as f64,
            lr.spacing[2] / scale.sz as f64,
        ],
        axis_labels: lr.axis_labels,
        intensity_range: lr.intensity_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::ScaleFactor;
    use crate::network::{ComponentKind, NetworkConfig};
    use ndarray::Array3;

    fn tiny_net(scale: ScaleFactor) -> ComponentSet<f32> {
        let cfg = NetworkConfig {
            feat_channels: 8,
            n_groups: 1,
            n_blocks: 1,
            reduction: 8,
            scale,
            disc_base_channels: 8,
        };
        ComponentSet::new(cfg, 21).unwrap()
    }

    #[test]
    fn origins_cover_volume() {
        let plan = StitchPlan::new((8, 8, 3));
        let origins = patch_origins((20, 13, 5), &plan).unwrap();
        let mut covered = Array3::<u32>::zeros((20, 13, 5));
        for (ox, oy, oz) in origins {
            covered
                .slice_mut(s![ox..ox + 8, oy..oy + 8, oz..oz + 3])
                .mapv_inplace(|v| v + 1);
        }
        assert!(covered.iter().all(|&c| c >= 1), "uncovered voxels");
    }

    #[test]
    fn constant_volume_blends_to_constant_with_stub_identity() {
        // Zeroed network with projection bias 0.6 emits a constant
        // everywhere, so blending must reproduce exactly that constant.
        let mut net = tiny_net(ScaleFactor::new(2, 2, 1));
        for kind in [ComponentKind::LrEncoder, ComponentKind::SrDecoder] {
            for e in net.store_mut(kind).entries_mut() {
                e.value.fill(0.0);
                if kind == ComponentKind::SrDecoder && e.name == "proj.bias" {
                    e.value.fill(0.6);
                }
            }
        }
        let mut lr = VolumeImage::new(Array3::from_elem((16, 16, 4), 0.3));
        lr.spacing = [1.4, 1.4, 0.7];
        let plan = StitchPlan::new((8, 8, 3));
        let sr = reconstruct(&lr, &net, &plan).unwrap();
        assert_eq!(sr.shape(), (32, 32, 4));
        assert!(sr.data.iter().all(|&v| (v - 0.6).abs() < 1e-6));
        assert_eq!(sr.spacing, [0.7, 0.7, 0.7]);
    }

    #[test]
    fn output_in_unit_range_and_scaled_shape() {
        let net = tiny_net(ScaleFactor::new(2, 2, 2));
        let lr = crate::phantom::make_phantom((16, 16, 6), 3);
        let plan = StitchPlan::new((8, 8, 3));
        let sr = reconstruct(&lr, &net, &plan).unwrap();
        assert_eq!(sr.shape(), (32, 32, 12));
        assert!(sr.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn volume_smaller_than_patch_rejected() {
        let net = tiny_net(ScaleFactor::new(2, 2, 1));
        let lr = VolumeImage::new(Array3::zeros((6, 6, 2)));
        let plan = StitchPlan::new((8, 8, 3));
        assert!(reconstruct(&lr, &net, &plan).is_err());
    }

    #[test]
    fn inference_touches_only_encoder_and_sr_decoder() {
        let net = tiny_net(ScaleFactor::new(2, 2, 1));
        let lr = crate::phantom::make_phantom((16, 16, 4), 5);
        net.reset_touches();
        let plan = StitchPlan::new((8, 8, 3));
        reconstruct(&lr, &net, &plan).unwrap();
        for (kind, touches) in net.touches() {
            let expect_touched =
                matches!(kind, ComponentKind::LrEncoder | ComponentKind::SrDecoder);
            assert_eq!(touches > 0, expect_touched, "{kind:?} touches={touches}");
        }
    }
}
