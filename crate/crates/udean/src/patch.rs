//! Training patch extraction. Aligned LR/HR pairs serve the supervised
//! baseline and evaluation; unsupervised training draws LR patches from
//! target volumes and HR patches from source volumes by independent calls.

use ndarray::{s, Array3};
use rand::Rng;

use crate::kspace::ScaleFactor;
use crate::volume::VolumeImage;
use crate::{Error, Result};

/// Patch geometry: LR patch extent, the HR extent it implies, and how
/// many patches one draw produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub lr_shape: (usize, usize, usize),
    pub batch_size: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { lr_shape: (64, 64, 3), batch_size: 8 }
    }
}

impl PatchSpec {
    pub fn hr_shape(&self, scale: ScaleFactor) -> (usize, usize, usize) {
        scale.hr_shape(self.lr_shape)
    }
}

/// An LR patch with its grid origin, optionally paired with the HR patch
/// covering exactly the corresponding HR region.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub lr: Array3<f64>,
    pub hr: Option<Array3<f64>>,
    pub lr_origin: (usize, usize, usize),
}

fn checked_span(vol: (usize, usize, usize), patch: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    if patch.0 > vol.0 || patch.1 > vol.1 || patch.2 > vol.2 {
        return Err(Error::ShapeMismatch(format!(
            "patch {patch:?} larger than volume {vol:?}"
        )));
    }
    Ok((vol.0 - patch.0, vol.1 - patch.1, vol.2 - patch.2))
}

fn crop(data: &Array3<f64>, origin: (usize, usize, usize), shape: (usize, usize, usize)) -> Array3<f64> {
    data.slice(s![
        origin.0..origin.0 + shape.0,
        origin.1..origin.1 + shape.1,
        origin.2..origin.2 + shape.2
    ])
    .to_owned()
}

/// Draw `spec.batch_size` LR patches at uniformly random valid origins;
/// when `hr` is present it must be the scale-matched volume and each pair
/// carries the co-located HR patch.
pub fn sample_patches(
    lr: &VolumeImage,
    hr: Option<&VolumeImage>,
    spec: &PatchSpec,
    scale: ScaleFactor,
    rng: &mut impl Rng,
) -> Result<Vec<PatchPair>> {
    if let Some(hr) = hr {
        if hr.shape() != scale.hr_shape(lr.shape()) {
            return Err(Error::ShapeMismatch(format!(
                "HR volume {:?} is not LR {:?} times scale {}",
                hr.shape(),
                lr.shape(),
                scale
            )));
        }
    }
    let span = checked_span(lr.shape(), spec.lr_shape)?;
    let hr_patch = spec.hr_shape(scale);
    let mut out = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let origin = (
            rng.gen_range(0..=span.0),
            rng.gen_range(0..=span.1),
            rng.gen_range(0..=span.2),
        );
        let lr_patch = crop(&lr.data, origin, spec.lr_shape);
        let hr_crop = hr.map(|h| {
            let hr_origin = (origin.0 * scale.sx, origin.1 * scale.sy, origin.2 * scale.sz);
            crop(&h.data, hr_origin, hr_patch)
        });
        out.push(PatchPair { lr: lr_patch, hr: hr_crop, lr_origin: origin });
    }
    Ok(out)
}

/// Independent HR-patch draw from a source volume (no LR counterpart).
pub fn sample_hr_patches(
    hr: &VolumeImage,
    spec: &PatchSpec,
    scale: ScaleFactor,
    rng: &mut impl Rng,
) -> Result<Vec<Array3<f64>>> {
    let shape = spec.hr_shape(scale);
    let span = checked_span(hr.shape(), shape)?;
    Ok((0..spec.batch_size)
        .map(|_| {
            let origin = (
                rng.gen_range(0..=span.0),
                rng.gen_range(0..=span.1),
                rng.gen_range(0..=span.2),
            );
            crop(&hr.data, origin, shape)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace;
    use crate::phantom::make_phantom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn hr_patch_shape_follows_scale() {
        let spec = PatchSpec { lr_shape: (64, 64, 3), batch_size: 2 };
        assert_eq!(spec.hr_shape(ScaleFactor::new(2, 2, 2)), (128, 128, 6));
        assert_eq!(spec.hr_shape(ScaleFactor::new(2, 2, 1)), (128, 128, 3));
    }

    #[test]
    fn paired_patches_are_coordinate_linked() {
        let scale = ScaleFactor::new(2, 2, 2);
        let hr = make_phantom((32, 32, 8), 5);
        let lr = kspace::kspace_truncate(&hr, scale).unwrap();
        let spec = PatchSpec { lr_shape: (8, 8, 3), batch_size: 16 };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let pairs = sample_patches(&lr, Some(&hr), &spec, scale, &mut rng).unwrap();
        for p in &pairs {
            let h = p.hr.as_ref().unwrap();
            assert_eq!(h.dim(), (16, 16, 6));
            // Direct index arithmetic against the source volumes.
            let (ox, oy, oz) = p.lr_origin;
            assert_eq!(p.lr[[0, 0, 0]], lr.data[[ox, oy, oz]]);
            assert_eq!(h[[0, 0, 0]], hr.data[[2 * ox, 2 * oy, 2 * oz]]);
            assert_eq!(h[[15, 15, 5]], hr.data[[2 * ox + 15, 2 * oy + 15, 2 * oz + 5]]);
        }
    }

    #[test]
    fn single_valid_origin_always_chosen() {
        let vol = make_phantom((16, 16, 4), 2);
        let spec = PatchSpec { lr_shape: (16, 16, 4), batch_size: 5 };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let pairs = sample_patches(&vol, None, &spec, ScaleFactor::new(2, 2, 1), &mut rng).unwrap();
        assert!(pairs.iter().all(|p| p.lr_origin == (0, 0, 0)));
    }

    #[test]
    fn fixed_rng_reproduces_origins() {
        let vol = make_phantom((32, 32, 8), 4);
        let spec = PatchSpec { lr_shape: (8, 8, 3), batch_size: 6 };
        let draw = || {
            let mut rng = ChaCha12Rng::seed_from_u64(9);
            sample_patches(&vol, None, &spec, ScaleFactor::new(2, 2, 1), &mut rng)
                .unwrap()
                .iter()
                .map(|p| p.lr_origin)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn oversized_patch_rejected() {
        let vol = make_phantom((16, 16, 4), 6);
        let spec = PatchSpec { lr_shape: (32, 16, 4), batch_size: 1 };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(sample_patches(&vol, None, &spec, ScaleFactor::new(2, 2, 1), &mut rng).is_err());
    }
}
