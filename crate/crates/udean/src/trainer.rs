//! Alternating adversarial training: per batch, one discriminator update
//! pass (LR and feature discriminators on detached fakes) followed by one
//! end-to-end generator update against the weighted objective, under
//! ADAM with a per-iteration cosine-decayed learning rate.
//!
//! Parameter isolation is enforced by hashing parameter blocks around
//! each step; alternation by step counters. Either check failing is a
//! bug, so both panic rather than returning an error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::adam::{cosine_lr, Adam, AdamParams};
use crate::kspace::ScaleFactor;
use crate::loss::{
    adv_gen, composite, da_pair, disc_pair, l1, ssim_loss, total_generator, GeneratorParts,
    LossReport, LossWeights,
};
use crate::network::{ComponentKind, ComponentSet, NetworkConfig, COMPONENT_KINDS};
use crate::patch::{sample_hr_patches, sample_patches, PatchSpec};
use crate::ssim::SsimConfig;
use crate::stitch::{reconstruct, StitchPlan};
use crate::tape::{Tape, Var};
use crate::tensor::{batch_from_patches, scalar_value, Tensor};
use crate::volume::VolumeImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Unsupervised,
    SupervisedBaseline,
}

/// How the adversarial term of the HR-domain losses is evaluated: the
/// LR discriminator applied after frequency truncation of the HR-domain
/// output, or dropped entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrAdversarial {
    Truncate,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub da_image_enabled: bool,
    pub da_feature_enabled: bool,
    /// Batches per epoch; 0 means one batch per target training volume.
    pub batches_per_epoch: usize,
    pub hr_adversarial: HrAdversarial,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            adam: AdamParams::default(),
            lr_max: 1e-4,
            lr_min: 1e-8,
            seed: 0,
            mode: TrainMode::Unsupervised,
            da_image_enabled: true,
            da_feature_enabled: true,
            batches_per_epoch: 0,
            hr_adversarial: HrAdversarial::Truncate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_min <= self.lr_max && self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "learning-rate bounds invalid: lr_min {} lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }
}

/// Every intermediate of one training forward pass, as nodes on the
/// generator tape.
pub struct ForwardBundle {
    pub hr_source: Var,
    pub lr_target: Var,
    /// Extractor features of the HR source patch.
    pub source_features: Var,
    /// LR-decoded source patch carrying the learned degradation.
    pub degraded_lr: Var,
    /// LR-encoder features of the degraded patch.
    pub cycled_features: Var,
    /// SR reconstruction closing the cycle.
    pub cycled_sr: Var,
    /// LR-encoder features of the target patch.
    pub target_features: Var,
    /// Within-domain reconstruction of the target patch.
    pub target_recon: Var,
    /// Within-domain SR of the source features.
    pub source_sr: Var,
}

/// Run the full training dataflow on a tape. Generator parameters are
/// bound trainable or frozen according to `trainable`.
pub fn forward_step(
    tape: &mut Tape<f32>,
    net: &ComponentSet<f32>,
    hr_source: Tensor<f32>,
    lr_target: Tensor<f32>,
    trainable: bool,
) -> Result<ForwardBundle> {
    let scale = net.config.scale;
    let (_, _, hx, hy, hz) = hr_source.dim();
    let (_, _, lx, ly, lz) = lr_target.dim();
    if (hx, hy, hz) != scale.hr_shape((lx, ly, lz)) {
        return Err(Error::ShapeMismatch(format!(
            "HR patch {hx}x{hy}x{hz} is not LR {lx}x{ly}x{lz} times scale {scale}"
        )));
    }
    let y_s = tape.constant(hr_source);
    let x_t = tape.constant(lr_target);
    let f_s = net.extractor.forward(tape, y_s, trainable)?;
    let x_st = net.lr_decoder.forward(tape, f_s, trainable)?;
    let f_sts = net.lr_encoder.forward(tape, x_st, trainable)?;
    let y_sts = net.sr_decoder.forward(tape, f_sts, trainable)?;
    let f_t = net.lr_encoder.forward(tape, x_t, trainable)?;
    let x_hat_t = net.lr_decoder.forward(tape, f_t, trainable)?;
    let y_hat_s = net.sr_decoder.forward(tape, f_s, trainable)?;
    Ok(ForwardBundle {
        hr_source: y_s,
        lr_target: x_t,
        source_features: f_s,
        degraded_lr: x_st,
        cycled_features: f_sts,
        cycled_sr: y_sts,
        target_features: f_t,
        target_recon: x_hat_t,
        source_sr: y_hat_s,
    })
}

/// Detached values a discriminator update needs from a fresh bundle.
pub struct BundleSnapshot {
    pub lr_target: Tensor<f32>,
    pub degraded_lr: Tensor<f32>,
    pub source_features: Tensor<f32>,
    pub target_features: Tensor<f32>,
}

impl BundleSnapshot {
    pub fn from_bundle(tape: &Tape<f32>, bundle: &ForwardBundle) -> BundleSnapshot {
        BundleSnapshot {
            lr_target: tape.value(bundle.lr_target).clone(),
            degraded_lr: tape.value(bundle.degraded_lr).clone(),
            source_features: tape.value(bundle.source_features).clone(),
            target_features: tape.value(bundle.target_features).clone(),
        }
    }
}

struct GeneratorOptims {
    extractor: Adam<f32>,
    lr_encoder: Adam<f32>,
    lr_decoder: Adam<f32>,
    sr_decoder: Adam<f32>,
}

/// Logged state of one training iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationLog {
    pub iteration: usize,
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationLog {
    pub epoch: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

/// Training inputs, already loaded and normalized.
pub struct TrainData {
    /// HR source-group volumes (deformed copies in misaligned mode).
    pub sources: Vec<VolumeImage>,
    /// LR target-group volumes.
    pub targets: Vec<VolumeImage>,
    /// (LR, misaligned HR) grid-aligned pairs for the supervised baseline.
    pub aligned: Vec<(VolumeImage, VolumeImage)>,
    /// (LR, ground-truth HR) pairs scored after every epoch.
    pub validation: Vec<(VolumeImage, VolumeImage)>,
}

pub struct TrainOutputs {
    pub loss_log: Vec<IterationLog>,
    pub validation_log: Vec<ValidationLog>,
    pub best_epoch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub net: ComponentSet<f32>,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub patch: PatchSpec,
    pub ssim: SsimConfig,
    gen_opt: GeneratorOptims,
    lr_disc_opt: Adam<f32>,
    feat_disc_opt: Adam<f32>,
    disc_passes: u64,
    gen_passes: u64,
}

fn hash_params(net: &ComponentSet<f32>, kinds: &[ComponentKind]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &kind in kinds {
        for entry in net.store(kind).entries() {
            for &v in entry.value.iter() {
                h ^= v.to_bits() as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

const GENERATOR_KINDS: [ComponentKind; 4] = [
    ComponentKind::Extractor,
    ComponentKind::LrEncoder,
    ComponentKind::LrDecoder,
    ComponentKind::SrDecoder,
];
const DISCRIMINATOR_KINDS: [ComponentKind; 2] =
    [ComponentKind::LrDiscriminator, ComponentKind::FeatureDiscriminator];

impl Trainer {
    pub fn new(
        net_config: NetworkConfig,
        config: TrainConfig,
        weights: LossWeights,
        patch: PatchSpec,
    ) -> Result<Trainer> {
        config.validate()?;
        weights.validate()?;
        let net = ComponentSet::new(net_config, config.seed)?;
        Self::with_network(net, config, weights, patch)
    }

    pub fn with_network(
        net: ComponentSet<f32>,
        config: TrainConfig,
        weights: LossWeights,
        patch: PatchSpec,
    ) -> Result<Trainer> {
        config.validate()?;
        weights.validate()?;
        let gen_opt = GeneratorOptims {
            extractor: Adam::new(net.store(ComponentKind::Extractor), config.adam),
            lr_encoder: Adam::new(net.store(ComponentKind::LrEncoder), config.adam),
            lr_decoder: Adam::new(net.store(ComponentKind::LrDecoder), config.adam),
            sr_decoder: Adam::new(net.store(ComponentKind::SrDecoder), config.adam),
        };
        let lr_disc_opt = Adam::new(net.store(ComponentKind::LrDiscriminator), config.adam);
        let feat_disc_opt = Adam::new(net.store(ComponentKind::FeatureDiscriminator), config.adam);
        let ssim = SsimConfig::default();
        Ok(Trainer {
            net,
            config,
            weights,
            patch,
            ssim,
            gen_opt,
            lr_disc_opt,
            feat_disc_opt,
            disc_passes: 0,
            gen_passes: 0,
        })
    }

    /// Override the SSIM window (training patches must fit it).
    pub fn set_ssim(&mut self, ssim: SsimConfig) {
        self.ssim = ssim;
    }

    fn scale(&self) -> ScaleFactor {
        self.net.config.scale
    }

    /// Compute the detached degradation products for a discriminator
    /// pass without touching generator gradients.
    pub fn degradation_snapshot(
        &self,
        hr_source: &Tensor<f32>,
        lr_target: &Tensor<f32>,
    ) -> Result<BundleSnapshot> {
        let mut tape = Tape::new();
        let y_s = tape.constant(hr_source.clone());
        let x_t = tape.constant(lr_target.clone());
        let f_s = self.net.extractor.forward(&mut tape, y_s, false)?;
        let x_st = self.net.lr_decoder.forward(&mut tape, f_s, false)?;
        let f_t = self.net.lr_encoder.forward(&mut tape, x_t, false)?;
        Ok(BundleSnapshot {
            lr_target: tape.value(x_t).clone(),
            degraded_lr: tape.value(x_st).clone(),
            source_features: tape.value(f_s).clone(),
            target_features: tape.value(f_t).clone(),
        })
    }

    /// One ADAM update per enabled discriminator against the detached
    /// snapshot. Returns (lrd, fd) losses where computed.
    pub fn discriminator_step(
        &mut self,
        snap: &BundleSnapshot,
        lr: f64,
    ) -> Result<(Option<f64>, Option<f64>)> {
        let mut lrd = None;
        let mut fd = None;
        if self.config.da_image_enabled {
            let mut tape = Tape::new();
            let real = tape.constant(snap.lr_target.clone());
            let fake = tape.constant(snap.degraded_lr.clone());
            let d_real = self.net.lr_discriminator.forward(&mut tape, real, true)?;
            let d_fake = self.net.lr_discriminator.forward(&mut tape, fake, true)?;
            let loss = disc_pair(&mut tape, d_real, d_fake);
            let value = scalar_value(tape.value(loss)) as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss("lrd".into()));
            }
            let grads = tape.backward(loss);
            let map: HashMap<_, _> = tape.param_grads(&grads).into_iter().collect();
            self.lr_disc_opt.step(self.net.store_mut(ComponentKind::LrDiscriminator), &map, lr);
            lrd = Some(value);
        }
        if self.config.da_feature_enabled {
            let mut tape = Tape::new();
            let real = tape.constant(snap.source_features.clone());
            let fake = tape.constant(snap.target_features.clone());
            let d_real = self.net.feature_discriminator.forward(&mut tape, real, true)?;
            let d_fake = self.net.feature_discriminator.forward(&mut tape, fake, true)?;
            let loss = disc_pair(&mut tape, d_real, d_fake);
            let value = scalar_value(tape.value(loss)) as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss("fd".into()));
            }
            let grads = tape.backward(loss);
            let map: HashMap<_, _> = tape.param_grads(&grads).into_iter().collect();
            self.feat_disc_opt.step(self.net.store_mut(ComponentKind::FeatureDiscriminator), &map, lr);
            fd = Some(value);
        }
        self.disc_passes += 1;
        Ok((lrd, fd))
    }

    /// Build the generator objective on a fresh tape and apply one ADAM
    /// update to the four generator components.
    pub fn generator_step(
        &mut self,
        hr_source: &Tensor<f32>,
        lr_target: &Tensor<f32>,
        lr: f64,
    ) -> Result<LossReport> {
        let scale = self.scale();
        let use_image_adv = self.config.da_image_enabled;
        let hr_adv = use_image_adv && self.config.hr_adversarial == HrAdversarial::Truncate;

        let mut tape = Tape::new();
        let bundle = forward_step(&mut tape, &self.net, hr_source.clone(), lr_target.clone(), true)?;

        // Image cycle (HR-domain output; adversarial term through
        // truncation to the LR grid when enabled).
        let l1_icyc = l1(&mut tape, bundle.cycled_sr, bundle.hr_source)?;
        let ssim_icyc = ssim_loss(&mut tape, bundle.cycled_sr, bundle.hr_source, &self.ssim)?;
        let adv_icyc = if hr_adv {
            let down = tape.kspace_truncate(bundle.cycled_sr, scale.tuple());
            let d = self.net.lr_discriminator.forward(&mut tape, down, false)?;
            Some(adv_gen(&mut tape, d))
        } else {
            None
        };
        let i_cyc = composite(&mut tape, l1_icyc, ssim_icyc, adv_icyc, self.weights.alpha, self.weights.beta);

        // Feature cycle.
        let f_cyc = l1(&mut tape, bundle.cycled_features, bundle.source_features)?;

        // HR consistency.
        let l1_hr = l1(&mut tape, bundle.source_sr, bundle.hr_source)?;
        let ssim_hr = ssim_loss(&mut tape, bundle.source_sr, bundle.hr_source, &self.ssim)?;
        let adv_hr = if hr_adv {
            let down = tape.kspace_truncate(bundle.source_sr, scale.tuple());
            let d = self.net.lr_discriminator.forward(&mut tape, down, false)?;
            Some(adv_gen(&mut tape, d))
        } else {
            None
        };
        let hr_con = composite(&mut tape, l1_hr, ssim_hr, adv_hr, self.weights.alpha, self.weights.beta);

        // LR consistency (LR-domain output feeds the discriminator directly).
        let l1_lr = l1(&mut tape, bundle.target_recon, bundle.lr_target)?;
        let ssim_lr = ssim_loss(&mut tape, bundle.target_recon, bundle.lr_target, &self.ssim)?;
        let adv_lr = if use_image_adv {
            let d = self.net.lr_discriminator.forward(&mut tape, bundle.target_recon, false)?;
            Some(adv_gen(&mut tape, d))
        } else {
            None
        };
        let lr_con = composite(&mut tape, l1_lr, ssim_lr, adv_lr, self.weights.alpha, self.weights.beta);

        // Adaptation terms.
        let da = if use_image_adv {
            let d_fake = self.net.lr_discriminator.forward(&mut tape, bundle.degraded_lr, false)?;
            let d_real = self.net.lr_discriminator.forward(&mut tape, bundle.lr_target, false)?;
            Some(da_pair(&mut tape, d_fake, d_real))
        } else {
            None
        };
        let fa = if self.config.da_feature_enabled {
            let d_t = self.net.feature_discriminator.forward(&mut tape, bundle.target_features, false)?;
            let d_s = self.net.feature_discriminator.forward(&mut tape, bundle.source_features, false)?;
            Some(da_pair(&mut tape, d_t, d_s))
        } else {
            None
        };

        let parts = GeneratorParts { i_cyc, f_cyc, hr_con, lr_con, da, fa };
        let total = total_generator(&mut tape, &parts, &self.weights);

        let value = |v: Var| scalar_value(tape.value(v)) as f64;
        let report = LossReport {
            i_cyc: value(i_cyc),
            f_cyc: value(f_cyc),
            hr_con: value(hr_con),
            lr_con: value(lr_con),
            da: da.map(value).unwrap_or(0.0),
            fa: fa.map(value).unwrap_or(0.0),
            total: value(total),
            lrd: None,
            fd: None,
        };
        if let Some(name) = report.first_non_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }

        let grads = tape.backward(total);
        let map: HashMap<_, _> = tape.param_grads(&grads).into_iter().collect();
        self.gen_opt.extractor.step(self.net.store_mut(ComponentKind::Extractor), &map, lr);
        self.gen_opt.lr_encoder.step(self.net.store_mut(ComponentKind::LrEncoder), &map, lr);
        self.gen_opt.lr_decoder.step(self.net.store_mut(ComponentKind::LrDecoder), &map, lr);
        self.gen_opt.sr_decoder.step(self.net.store_mut(ComponentKind::SrDecoder), &map, lr);
        self.gen_passes += 1;
        Ok(report)
    }

    /// Supervised baseline step: LR encoder + SR decoder against the
    /// (misaligned) HR patch with the l1 + alpha*ssim objective.
    pub fn supervised_step(
        &mut self,
        lr_in: &Tensor<f32>,
        hr_target: &Tensor<f32>,
        lr: f64,
    ) -> Result<LossReport> {
        let mut tape = Tape::new();
        let x = tape.constant(lr_in.clone());
        let y = tape.constant(hr_target.clone());
        let f = self.net.lr_encoder.forward(&mut tape, x, true)?;
        let sr = self.net.sr_decoder.forward(&mut tape, f, true)?;
        let l1_term = l1(&mut tape, sr, y)?;
        let ssim_term = ssim_loss(&mut tape, sr, y, &self.ssim)?;
        let loss = composite(&mut tape, l1_term, ssim_term, None, self.weights.alpha, 0.0);
        let value = scalar_value(tape.value(loss)) as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss("supervised".into()));
        }
        let grads = tape.backward(loss);
        let map: HashMap<_, _> = tape.param_grads(&grads).into_iter().collect();
        self.gen_opt.lr_encoder.step(self.net.store_mut(ComponentKind::LrEncoder), &map, lr);
        self.gen_opt.sr_decoder.step(self.net.store_mut(ComponentKind::SrDecoder), &map, lr);
        self.gen_passes += 1;
        Ok(LossReport {
            i_cyc: value,
            f_cyc: 0.0,
            hr_con: 0.0,
            lr_con: 0.0,
            da: 0.0,
            fa: 0.0,
            total: value,
            lrd: None,
            fd: None,
        })
    }

    pub fn passes(&self) -> (u64, u64) {
        (self.disc_passes, self.gen_passes)
    }

    fn validation_pass(&self, data: &TrainData, epoch: usize) -> Result<Option<ValidationLog>> {
        if data.validation.is_empty() {
            return Ok(None);
        }
        let plan = StitchPlan::new(self.patch.lr_shape);
        let mut ssims = Vec::new();
        let mut psnrs = Vec::new();
        for (lr_vol, hr_vol) in &data.validation {
            let sr = reconstruct(lr_vol, &self.net, &plan)?;
            ssims.push(crate::ssim::ssim_metric(&sr.data, &hr_vol.data, &self.ssim)?);
            let p = crate::metrics::psnr(&sr.data, &hr_vol.data, 1.0)?;
            if !p.infinite {
                psnrs.push(p.db);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let std = |v: &[f64], m: f64| {
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64).sqrt()
        };
        let sm = mean(&ssims);
        let pm = if psnrs.is_empty() { f64::INFINITY } else { mean(&psnrs) };
        Ok(Some(ValidationLog {
            epoch,
            ssim_mean: sm,
            ssim_std: std(&ssims, sm),
            psnr_mean: pm,
            psnr_std: if psnrs.is_empty() { 0.0 } else { std(&psnrs, pm) },
        }))
    }

    /// Run the full loop. When `run_dir` is given, per-epoch checkpoints,
    /// a best-validation-SSIM checkpoint, the loss log, and the
    /// validation CSV are written beneath it.
    pub fn run(&mut self, data: &TrainData, run_dir: Option<&Path>) -> Result<TrainOutputs> {
        match self.config.mode {
            TrainMode::Unsupervised => {
                if data.sources.is_empty() || data.targets.is_empty() {
                    return Err(Error::Manifest("training needs source and target volumes".into()));
                }
            }
            TrainMode::SupervisedBaseline => {
                if data.aligned.is_empty() {
                    return Err(Error::Manifest(
                        "supervised baseline needs aligned (LR, HR) volume pairs".into(),
                    ));
                }
            }
        }
        let batches_per_epoch = if self.config.batches_per_epoch > 0 {
            self.config.batches_per_epoch
        } else {
            match self.config.mode {
                TrainMode::Unsupervised => data.targets.len(),
                TrainMode::SupervisedBaseline => data.aligned.len(),
            }
        };
        let total_iters = self.config.epochs * batches_per_epoch;
        let scale = self.scale();
        let mut rng = ChaCha12Rng::seed_from_u64(self.config.seed);
        rng.set_stream(0x70617463); // patch-sampling stream

        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            std::fs::create_dir_all(dir.join("logs")).map_err(|e| Error::io(dir, e))?;
        }

        let mut loss_log = Vec::with_capacity(total_iters);
        let mut validation_log = Vec::new();
        let mut checkpoints = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        let mut iteration = 0usize;

        for epoch in 0..self.config.epochs {
            for _ in 0..batches_per_epoch {
                let lr = cosine_lr(iteration, total_iters, self.config.lr_max, self.config.lr_min);
                let report = match self.config.mode {
                    TrainMode::Unsupervised => {
                        let src = &data.sources[rng.gen_range(0..data.sources.len())];
                        let tgt = &data.targets[rng.gen_range(0..data.targets.len())];
                        let hr_patches = sample_hr_patches(src, &self.patch, scale, &mut rng)?;
                        let lr_pairs = sample_patches(tgt, None, &self.patch, scale, &mut rng)?;
                        let lr_patches: Vec<_> = lr_pairs.into_iter().map(|p| p.lr).collect();
                        let y_s = batch_from_patches::<f32>(&hr_patches);
                        let x_t = batch_from_patches::<f32>(&lr_patches);

                        let gen_hash_before = hash_params(&self.net, &GENERATOR_KINDS);
                        let snap = self.degradation_snapshot(&y_s, &x_t)?;
                        let (lrd, fd) = self.discriminator_step(&snap, lr)?;
                        assert_eq!(
                            gen_hash_before,
                            hash_params(&self.net, &GENERATOR_KINDS),
                            "discriminator step modified generator parameters"
                        );

                        let disc_hash_before = hash_params(&self.net, &DISCRIMINATOR_KINDS);
                        let mut report = self.generator_step(&y_s, &x_t, lr)?;
                        assert_eq!(
                            disc_hash_before,
                            hash_params(&self.net, &DISCRIMINATOR_KINDS),
                            "generator step modified discriminator parameters"
                        );
                        assert_eq!(
                            self.disc_passes, self.gen_passes,
                            "alternation broke: discriminator and generator pass counts diverged"
                        );
                        report.lrd = lrd;
                        report.fd = fd;
                        report
                    }
                    TrainMode::SupervisedBaseline => {
                        let (lr_vol, hr_vol) = &data.aligned[rng.gen_range(0..data.aligned.len())];
                        let pairs = sample_patches(lr_vol, Some(hr_vol), &self.patch, scale, &mut rng)?;
                        let lr_patches: Vec<_> = pairs.iter().map(|p| p.lr.clone()).collect();
                        let hr_patches: Vec<_> =
                            pairs.iter().map(|p| p.hr.clone().expect("paired draw")).collect();
                        let x = batch_from_patches::<f32>(&lr_patches);
                        let y = batch_from_patches::<f32>(&hr_patches);
                        self.supervised_step(&x, &y, lr)?
                    }
                };
                loss_log.push(IterationLog { iteration, epoch, report, lr });
                iteration += 1;
            }

            if let Some(v) = self.validation_pass(data, epoch)? {
                let improved = best.map(|(_, s)| v.ssim_mean > s).unwrap_or(true);
                if improved {
                    best = Some((epoch, v.ssim_mean));
                }
                validation_log.push(v);
            }
            if let Some(dir) = run_dir {
                let path = dir.join(format!("checkpoints/epoch_{epoch:03}.ck"));
                crate::checkpoint::save_checkpoint(&self.net, &path)?;
                if best.map(|(e, _)| e) == Some(epoch) {
                    std::fs::copy(&path, dir.join("checkpoints/best.ck"))
                        .map_err(|e| Error::io(dir, e))?;
                }
                checkpoints.push(path);
            }
        }

        if let Some(dir) = run_dir {
            write_loss_log(&loss_log, &dir.join("logs/train_log.csv"))?;
            write_validation_log(&validation_log, &dir.join("logs/validation.csv"))?;
        }
        Ok(TrainOutputs {
            loss_log,
            validation_log,
            best_epoch: best.map(|(e, _)| e),
            checkpoints,
        })
    }
}

/// Line-oriented loss log: iteration, components, total, discriminator
/// losses, learning rate.
pub fn write_loss_log(log: &[IterationLog], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,epoch,i_cyc,f_cyc,hr_con,lr_con,da,fa,total,lrd,fd,lr\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    for entry in log {
        let r = &entry.report;
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{:.9e}\n",
            entry.iteration,
            entry.epoch,
            r.i_cyc,
            r.f_cyc,
            r.hr_con,
            r.lr_con,
            r.da,
            r.fa,
            r.total,
            opt(r.lrd),
            opt(r.fd),
            entry.lr,
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_validation_log(log: &[ValidationLog], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,ssim_mean,ssim_std,psnr_mean,psnr_std\n");
    for v in log {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9}\n",
            v.epoch, v.ssim_mean, v.ssim_std, v.psnr_mean, v.psnr_std
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
