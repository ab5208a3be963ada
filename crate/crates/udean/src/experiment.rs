//! Pipeline commands behind the CLI: data preparation, training,
//! inference, evaluation, feature dumps, and reporting. Every command is
//! a deterministic function of (config, input files, seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::{ExperimentConfig, NormalizationScope};
use crate::deform::{apply_misalignment, DeformationParams};
use crate::features::{extract_features, save_feature_dump};
use crate::kspace::kspace_truncate;
use crate::manifest::{
    load_manifest, save_manifest, split_groups, DatasetManifest, Group, Role, SplitMode,
};
use crate::metrics::{error_map, export_error_map_slices, psnr, summarize, EvalRecord, EvalSummary};
use crate::network::ComponentSet;
use crate::phantom::make_phantom;
use crate::resample::tricubic_upsample;
use crate::ssim::ssim_metric;
use crate::stitch::reconstruct;
use crate::trainer::{TrainData, TrainOutputs, Trainer};
use crate::volume::{load_volume, normalize_unit_range, save_volume, VolumeFormat, VolumeImage};
use crate::{Error, Result};

fn manifest_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn load_entry_volume(base: &Path, rel: &Path) -> Result<VolumeImage> {
    let path = base.join(rel);
    load_volume(&path, VolumeFormat::from_path(&path)?)
}

/// Generate (or ingest) HR volumes, normalize them, derive LR volumes by
/// frequency truncation, deform misaligned source copies, and write the
/// manifest. Returns the manifest path.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = manifest_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let seed = cfg.train.seed;

    // HR inputs keyed by participant id.
    let mut volumes: BTreeMap<String, VolumeImage> = BTreeMap::new();
    if let Some(n) = cfg.data.phantom_count {
        if n == 0 {
            return Err(Error::Config("phantom_count must be positive when set".into()));
        }
        for i in 0..n {
            let id = format!("p{i:04}");
            let vol_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
            volumes.insert(id, make_phantom(cfg.data.phantom_shape, vol_seed));
        }
    } else {
        if cfg.data.input_volumes.is_empty() {
            return Err(Error::Config(
                "no inputs: set data.phantom_count or data.input_volumes".into(),
            ));
        }
        for path in &cfg.data.input_volumes {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad input volume name {path:?}")))?
                .replace(char::is_whitespace, "_");
            let vol = load_volume(path, VolumeFormat::from_path(path)?)?;
            if !cfg.scale.divides(vol.shape()) {
                return Err(Error::ShapeMismatch(format!(
                    "input {} has shape {:?}, not divisible by scale {}",
                    path.display(),
                    vol.shape(),
                    cfg.scale
                )));
            }
            volumes.insert(id, vol);
        }
    }

    // Normalization scope.
    match cfg.data.normalization {
        NormalizationScope::PerVolume => {
            for vol in volumes.values_mut() {
                *vol = normalize_unit_range(vol)?;
            }
        }
        NormalizationScope::PerDataset => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for vol in volumes.values() {
                vol.check_finite()?;
                for &v in vol.data.iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            for vol in volumes.values_mut() {
                vol.data.mapv_inplace(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
                vol.intensity_range = (lo, hi);
            }
        }
    }

    let ids: Vec<String> = volumes.keys().cloned().collect();
    let manifest = split_groups(&ids, cfg.data.counts, seed, cfg.data.mode)?;

    // Deformation parameters per source participant (misaligned mode).
    let source_ids = manifest.participants(Group::Source);
    let mut deformations: BTreeMap<String, DeformationParams> = BTreeMap::new();
    if cfg.data.mode == SplitMode::Misaligned {
        for (idx, id) in source_ids.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(0xDEF0_0000 + idx as u64);
            deformations.insert(
                id.to_string(),
                DeformationParams::draw(&cfg.deformation, seed, &mut rng),
            );
        }
    }

    for entry in &manifest.entries {
        let hr = volumes
            .get(&entry.participant)
            .ok_or_else(|| Error::Manifest(format!("no volume for {}", entry.participant)))?;
        let out = match (entry.group, entry.role) {
            (Group::Source, Role::Hr) => match cfg.data.mode {
                SplitMode::Unpaired => hr.clone(),
                SplitMode::Misaligned => {
                    let params = deformations
                        .get(&entry.participant)
                        .expect("deformation drawn for every source participant");
                    apply_misalignment(hr, params)?
                }
            },
            (_, Role::Hr) => hr.clone(),
            (_, Role::Lr) => kspace_truncate(hr, cfg.scale)?,
        };
        save_volume(&out, &dir.join(&entry.path), VolumeFormat::Nifti1)?;
    }

    save_manifest(&manifest, &cfg.paths.manifest)?;
    cfg.save(&dir.join("prepare_config.toml"))?;
    Ok(cfg.paths.manifest.clone())
}

/// Load the volumes a training run needs from a prepared manifest.
pub fn load_train_data(cfg: &ExperimentConfig) -> Result<(DatasetManifest, TrainData)> {
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let base = manifest_dir(cfg);

    let mut sources = Vec::new();
    for e in manifest.entries_for(Group::Source, Role::Hr) {
        sources.push(load_entry_volume(&base, &e.path)?);
    }
    let mut targets = Vec::new();
    for e in manifest.entries_for(Group::Target, Role::Lr) {
        targets.push(load_entry_volume(&base, &e.path)?);
    }

    // Aligned (LR, deformed HR) pairs exist when source and target share
    // participants.
    let mut aligned = Vec::new();
    if manifest.mode == SplitMode::Misaligned {
        for lr_entry in manifest.entries_for(Group::Target, Role::Lr) {
            let hr_entry = manifest
                .entries
                .iter()
                .find(|e| {
                    e.participant == lr_entry.participant
                        && e.group == Group::Source
                        && e.role == Role::Hr
                })
                .ok_or_else(|| {
                    Error::Manifest(format!(
                        "misaligned manifest missing source HR for {}",
                        lr_entry.participant
                    ))
                })?;
            aligned.push((
                load_entry_volume(&base, &lr_entry.path)?,
                load_entry_volume(&base, &hr_entry.path)?,
            ));
        }
    }

    let mut validation = Vec::new();
    for lr_entry in manifest.entries_for(Group::Validation, Role::Lr) {
        let hr_entry = manifest
            .paired_entry(lr_entry, Role::Hr)
            .ok_or_else(|| Error::Manifest("validation participant missing HR entry".into()))?;
        validation.push((
            load_entry_volume(&base, &lr_entry.path)?,
            load_entry_volume(&base, &hr_entry.path)?,
        ));
    }

    Ok((manifest, TrainData { sources, targets, aligned, validation }))
}

fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.paths.output_dir.clone();
    for sub in ["logs", "checkpoints", "metrics", "figures"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(&dir, e))?;
    }
    cfg.save(&dir.join("config.toml"))?;
    Ok(dir)
}

/// Run the training loop per the config; returns the trainer (holding
/// the final network) and the logged outputs.
pub fn run_training(cfg: &ExperimentConfig) -> Result<(Trainer, TrainOutputs)> {
    cfg.validate()?;
    let (_, data) = load_train_data(cfg)?;
    let run_dir = prepare_run_dir(cfg)?;
    let mut trainer =
        Trainer::new(cfg.network_config(), cfg.train, cfg.loss_weights, cfg.patch)?;
    trainer.set_ssim(cfg.ssim);
    let outputs = trainer.run(&data, Some(&run_dir))?;
    Ok((trainer, outputs))
}

fn check_checkpoint_compatible(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let stored = crate::checkpoint::peek_config(checkpoint)?;
    let expected = cfg.network_config();
    if stored != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with {stored:?}, config expects {expected:?}",
            checkpoint.display()
        )));
    }
    Ok(())
}

/// Reconstruct one SR volume from an LR volume file.
pub fn infer(cfg: &ExperimentConfig, checkpoint: &Path, volume: &Path, output: &Path) -> Result<()> {
    cfg.validate()?;
    check_checkpoint_compatible(cfg, checkpoint)?;
    let net: ComponentSet<f32> = crate::checkpoint::load_checkpoint(checkpoint)?;
    let lr = load_volume(volume, VolumeFormat::from_path(volume)?)?;
    let sr = reconstruct(&lr, &net, &cfg.stitch_plan())?;
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_volume(&sr, output, VolumeFormat::from_path(output)?)
}

/// A method to evaluate on the test group.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    Tricubic,
    Checkpoint { tag: String, path: PathBuf },
}

/// Evaluate methods on the test group; the tricubic baseline is always
/// included as the reference row. Writes per-volume and summary CSVs
/// plus error-map slices for the first test volume of each method.
pub fn evaluate(
    cfg: &ExperimentConfig,
    methods: &[MethodSpec],
) -> Result<(Vec<EvalRecord>, Vec<EvalSummary>)> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let base = manifest_dir(cfg);
    let run_dir = prepare_run_dir(cfg)?;

    let mut cases = Vec::new();
    for lr_entry in manifest.entries_for(Group::Test, Role::Lr) {
        let hr_entry = manifest
            .paired_entry(lr_entry, Role::Hr)
            .ok_or_else(|| Error::Manifest("test participant missing HR entry".into()))?;
        cases.push((
            lr_entry.participant.clone(),
            load_entry_volume(&base, &lr_entry.path)?,
            load_entry_volume(&base, &hr_entry.path)?,
        ));
    }
    if cases.is_empty() {
        return Err(Error::Manifest("test group is empty".into()));
    }

    let mut ordered: Vec<MethodSpec> = Vec::new();
    if !methods.iter().any(|m| matches!(m, MethodSpec::Tricubic)) {
        ordered.push(MethodSpec::Tricubic);
    }
    ordered.extend(methods.iter().cloned());

    let mut records = Vec::new();
    for method in &ordered {
        let (tag, net): (String, Option<ComponentSet<f32>>) = match method {
            MethodSpec::Tricubic => ("tricubic".to_string(), None),
            MethodSpec::Checkpoint { tag, path } => {
                check_checkpoint_compatible(cfg, path)?;
                (tag.clone(), Some(crate::checkpoint::load_checkpoint(path)?))
            }
        };
        for (i, (id, lr, hr)) in cases.iter().enumerate() {
            let sr = match &net {
                None => tricubic_upsample(lr, cfg.scale),
                Some(net) => reconstruct(lr, net, &cfg.stitch_plan())?,
            };
            let ssim = ssim_metric(&sr.data, &hr.data, &cfg.ssim)?;
            let p = psnr(&sr.data, &hr.data, cfg.ssim.data_range)?;
            records.push(EvalRecord { volume_id: id.clone(), method: tag.clone(), ssim, psnr: p });
            if i == 0 {
                let map = error_map(&sr, hr)?;
                export_error_map_slices(
                    &map,
                    &run_dir.join("figures/error_maps").join(&tag),
                    "err",
                    0.25,
                )?;
            }
        }
    }

    let summaries = summarize(&records);
    crate::metrics::write_records_csv(&records, &run_dir.join("metrics/records.csv"))?;
    crate::metrics::write_summary_csv(&summaries, &run_dir.join("metrics/summary.csv"))?;
    Ok((records, summaries))
}

/// Extract and persist latent feature maps of source HR and target LR
/// patches, using the checkpoint when given, else a freshly initialized
/// network (the pre-training reference).
pub fn dump_features_cmd(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let base = manifest_dir(cfg);
    let net: ComponentSet<f32> = match checkpoint {
        Some(path) => {
            check_checkpoint_compatible(cfg, path)?;
            crate::checkpoint::load_checkpoint(path)?
        }
        None => ComponentSet::new(cfg.network_config(), cfg.train.seed)?,
    };
    let mut sources = Vec::new();
    for e in manifest.entries_for(Group::Source, Role::Hr) {
        sources.push(load_entry_volume(&base, &e.path)?);
    }
    let mut targets = Vec::new();
    for e in manifest.entries_for(Group::Target, Role::Lr) {
        targets.push(load_entry_volume(&base, &e.path)?);
    }
    let dump = extract_features(&net, &sources, &targets, &cfg.patch, cfg.train.seed)?;
    save_feature_dump(&dump, out_dir)
}

/// Write the plots + text summary for a run directory.
pub fn report_cmd(run_dir: &Path) -> Result<PathBuf> {
    crate::report::write_report(run_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::example_config;
    use tempfile::tempdir;

    fn desk_config(root: &Path) -> ExperimentConfig {
        let mut cfg = example_config(root);
        cfg.data.counts = crate::manifest::GroupCounts { source: 2, target: 2, validation: 1, test: 2 };
        cfg.data.phantom_count = Some(5);
        cfg.data.phantom_shape = (32, 32, 8);
        cfg.scale = crate::kspace::ScaleFactor::new(2, 2, 2);
        cfg.network.feat_channels = 8;
        cfg.network.n_groups = 1;
        cfg.network.n_blocks = 1;
        cfg.network.reduction = 8;
        cfg.network.disc_base_channels = 8;
        cfg.train.epochs = 1;
        cfg.train.batches_per_epoch = 2;
        cfg.train.batch_size = 2;
        cfg.train.lr_max = 1e-3;
        cfg.patch = crate::patch::PatchSpec { lr_shape: (12, 12, 3), batch_size: 2 };
        cfg.ssim = crate::ssim::SsimConfig { window: 7, ..Default::default() };
        cfg
    }

    #[test]
    fn prepare_is_deterministic_and_grouped() {
        let dir = tempdir().unwrap();
        let cfg = desk_config(dir.path());
        let manifest_path = prepare_data(&cfg).unwrap();
        let m1 = std::fs::read(&manifest_path).unwrap();
        let hashes1: Vec<_> = load_manifest(&manifest_path)
            .unwrap()
            .entries
            .iter()
            .map(|e| std::fs::read(manifest_dir(&cfg).join(&e.path)).unwrap())
            .collect();

        prepare_data(&cfg).unwrap();
        let m2 = std::fs::read(&manifest_path).unwrap();
        assert_eq!(m1, m2);
        let hashes2: Vec<_> = load_manifest(&manifest_path)
            .unwrap()
            .entries
            .iter()
            .map(|e| std::fs::read(manifest_dir(&cfg).join(&e.path)).unwrap())
            .collect();
        assert_eq!(hashes1, hashes2, "volume files changed between identical runs");

        let manifest = load_manifest(&manifest_path).unwrap();
        manifest.validate().unwrap();
        // Misaligned: source shares ids with target and the files differ
        // (deformed copies).
        let src = manifest.participants(Group::Source);
        let tgt = manifest.participants(Group::Target);
        assert_eq!(src, tgt);
    }

    #[test]
    fn unpaired_prepare_disjoint_sources() {
        let dir = tempdir().unwrap();
        let mut cfg = desk_config(dir.path());
        cfg.data.mode = SplitMode::Unpaired;
        cfg.data.phantom_count = Some(7);
        let manifest_path = prepare_data(&cfg).unwrap();
        let manifest = load_manifest(&manifest_path).unwrap();
        let src: std::collections::BTreeSet<_> =
            manifest.participants(Group::Source).into_iter().map(String::from).collect();
        let tgt: std::collections::BTreeSet<_> =
            manifest.participants(Group::Target).into_iter().map(String::from).collect();
        assert!(src.is_disjoint(&tgt));
    }

    #[test]
    fn train_then_infer_and_evaluate() {
        let dir = tempdir().unwrap();
        let cfg = desk_config(dir.path());
        prepare_data(&cfg).unwrap();
        let (_, outputs) = run_training(&cfg).unwrap();
        assert_eq!(outputs.loss_log.len(), 2);
        assert!(!outputs.checkpoints.is_empty());
        let best = cfg.paths.output_dir.join("checkpoints/best.ck");
        assert!(best.exists());

        // Inference writes the scaled SR volume.
        let manifest = load_manifest(&cfg.paths.manifest).unwrap();
        let lr_entry = manifest.entries_for(Group::Test, Role::Lr)[0];
        let lr_path = manifest_dir(&cfg).join(&lr_entry.path);
        let out = dir.path().join("sr.nii");
        infer(&cfg, &best, &lr_path, &out).unwrap();
        let sr = load_volume(&out, VolumeFormat::Nifti1).unwrap();
        assert_eq!(sr.shape(), (32, 32, 8));

        // Evaluation always carries the tricubic reference row.
        let (records, summaries) = evaluate(
            &cfg,
            &[MethodSpec::Checkpoint { tag: "udean".into(), path: best.clone() }],
        )
        .unwrap();
        assert_eq!(records.len(), 4); // 2 methods x 2 test volumes
        assert_eq!(summaries.len(), 2);
        assert!(summaries.iter().any(|s| s.method == "tricubic"));
        assert!(cfg.paths.output_dir.join("metrics/summary.csv").exists());

        // Report marks the completed run.
        let report = report_cmd(&cfg.paths.output_dir).unwrap();
        let text = std::fs::read_to_string(report).unwrap();
        assert!(text.contains("status: complete"), "{text}");
    }

    #[test]
    fn incompatible_checkpoint_rejected_before_compute() {
        let dir = tempdir().unwrap();
        let cfg = desk_config(dir.path());
        prepare_data(&cfg).unwrap();
        let (_, _) = run_training(&cfg).unwrap();
        let best = cfg.paths.output_dir.join("checkpoints/best.ck");
        let mut other = cfg.clone();
        other.network.feat_channels = 16;
        other.network.reduction = 16;
        let err = infer(&other, &best, Path::new("unused.nii"), &dir.path().join("o.nii"))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }
}
