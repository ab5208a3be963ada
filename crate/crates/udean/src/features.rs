//! Latent-feature extraction and persistence: feature maps of HR source
//! patches (through the downsampling extractor) and LR target patches
//! (through the LR encoder), written as raw-f32 arrays with a manifest
//! for external 2D-embedding visualization.

use std::path::Path;

use ndarray::{Array4, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::network::ComponentSet;
use crate::patch::{sample_hr_patches, sample_patches, PatchSpec};
use crate::tape::Tape;
use crate::tensor::Scalar;
use crate::volume::VolumeImage;
use crate::{Error, Result};

/// Extracted feature maps, one (channels, x, y, z) array per patch.
pub struct FeatureDump {
    pub source_features: Vec<Array4<f32>>,
    pub target_features: Vec<Array4<f32>>,
}

fn to_map<T: Scalar>(t: &crate::tensor::Tensor<T>, item: usize) -> Array4<f32> {
    let (_, c, nx, ny, nz) = t.dim();
    Array4::from_shape_fn((c, nx, ny, nz), |(ci, x, y, z)| t[[item, ci, x, y, z]].into_f64() as f32)
}

/// Sample patches from the given volumes and run the corresponding
/// encoder. Deterministic for a fixed network, volume list, and seed.
pub fn extract_features<T: Scalar>(
    net: &ComponentSet<T>,
    source_hr: &[VolumeImage],
    target_lr: &[VolumeImage],
    spec: &PatchSpec,
    seed: u64,
) -> Result<FeatureDump> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scale = net.config.scale;
    let mut source_features = Vec::new();
    let mut target_features = Vec::new();

    for vol in source_hr {
        let patches = sample_hr_patches(vol, spec, scale, &mut rng)?;
        let batch = crate::tensor::batch_from_patches::<T>(&patches);
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let f = net.extractor.forward(&mut tape, x, false)?;
        for i in 0..patches.len() {
            source_features.push(to_map(tape.value(f), i));
        }
    }
    for vol in target_lr {
        let pairs = sample_patches(vol, None, spec, scale, &mut rng)?;
        let patches: Vec<_> = pairs.into_iter().map(|p| p.lr).collect();
        let batch = crate::tensor::batch_from_patches::<T>(&patches);
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let f = net.lr_encoder.forward(&mut tape, x, false)?;
        for i in 0..patches.len() {
            target_features.push(to_map(tape.value(f), i));
        }
    }
    Ok(FeatureDump { source_features, target_features })
}

fn write_map(path: &Path, map: &Array4<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.len() * 4);
    for &v in map.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write the dump as raw-f32 arrays plus a manifest naming each file and
/// its (channels, x, y, z) shape.
pub fn save_feature_dump(dump: &FeatureDump, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("udean-features 1\n");
    for (tag, maps) in [("f_s", &dump.source_features), ("f_t", &dump.target_features)] {
        for (i, map) in maps.iter().enumerate() {
            let name = format!("{tag}_{i:04}.f32");
            let (c, x, y, z) = map.dim();
            manifest.push_str(&format!("map {tag} {name} {c} {x} {y} {z}\n"));
            write_map(&dir.join(&name), map)?;
        }
    }
    std::fs::write(dir.join("features.txt"), manifest)
        .map_err(|e| Error::io(dir.join("features.txt"), e))
}

/// Per-channel mean and standard deviation pooled over space: the
/// fixed-length descriptor used to probe source/target separability.
pub fn pool_feature_map(map: &Array4<f32>) -> Vec<f64> {
    let (c, nx, ny, nz) = map.dim();
    let n = (nx * ny * nz) as f64;
    let mut out = Vec::with_capacity(2 * c);
    for ci in 0..c {
        let slice = map.slice(ndarray::s![ci, .., .., ..]);
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        out.push(mean);
        out.push(var.sqrt());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::ScaleFactor;
    use crate::network::NetworkConfig;
    use crate::phantom::make_phantom;

    fn tiny_net() -> ComponentSet<f32> {
        let cfg = NetworkConfig {
            feat_channels: 8,
            n_groups: 1,
            n_blocks: 1,
            reduction: 8,
            scale: ScaleFactor::new(2, 2, 2),
            disc_base_channels: 8,
        };
        ComponentSet::new(cfg, 17).unwrap()
    }

    #[test]
    fn shapes_match_between_domains() {
        let net = tiny_net();
        let hr = make_phantom((32, 32, 8), 1);
        let lr = crate::kspace::kspace_truncate(&hr, net.config.scale).unwrap();
        let spec = PatchSpec { lr_shape: (8, 8, 3), batch_size: 3 };
        let dump = extract_features(&net, &[hr], &[lr], &spec, 7).unwrap();
        assert_eq!(dump.source_features.len(), 3);
        assert_eq!(dump.target_features.len(), 3);
        assert_eq!(dump.source_features[0].dim(), dump.target_features[0].dim());
        assert_eq!(dump.source_features[0].dim(), (8, 8, 8, 3));
    }

    #[test]
    fn deterministic_for_fixed_inputs() {
        let net = tiny_net();
        let hr = make_phantom((32, 32, 8), 2);
        let lr = crate::kspace::kspace_truncate(&hr, net.config.scale).unwrap();
        let spec = PatchSpec { lr_shape: (8, 8, 3), batch_size: 2 };
        let a = extract_features(&net, &[hr.clone()], &[lr.clone()], &spec, 9).unwrap();
        let b = extract_features(&net, &[hr], &[lr], &spec, 9).unwrap();
        assert_eq!(a.source_features, b.source_features);
        assert_eq!(a.target_features, b.target_features);
    }

    #[test]
    fn dump_round_trips_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny_net();
        let hr = make_phantom((32, 32, 8), 3);
        let lr = crate::kspace::kspace_truncate(&hr, net.config.scale).unwrap();
        let spec = PatchSpec { lr_shape: (8, 8, 3), batch_size: 2 };
        let dump = extract_features(&net, &[hr], &[lr], &spec, 11).unwrap();
        save_feature_dump(&dump, dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("features.txt")).unwrap();
        assert!(manifest.contains("map f_s f_s_0000.f32 8 8 8 3"));
        assert!(manifest.contains("map f_t f_t_0001.f32 8 8 8 3"));
        let bytes = std::fs::read(dir.path().join("f_s_0000.f32")).unwrap();
        assert_eq!(bytes.len(), 8 * 8 * 8 * 3 * 4);
    }

    #[test]
    fn pooled_descriptor_length() {
        let map = Array4::<f32>::zeros((8, 4, 4, 3));
        assert_eq!(pool_feature_map(&map).len(), 16);
    }
}
