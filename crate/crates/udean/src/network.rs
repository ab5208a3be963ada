//! The six learnable components: downsampling extractor, LR encoder,
//! LR/SR decoders (residual channel-attention trunks), and the two
//! VGG-style patch discriminators.
//!
//! Convolutions are 3D with 3x3x3 kernels so thin-slab patches still mix
//! through-slice information. The extractor places its stride-2 steps on
//! layer 2 (in-plane) and layer 4 (through-slice, only when sz = 2). The
//! SR decoder upsamples in-plane by sub-pixel rearrangement and through
//! slice by a learned transposed convolution.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array5;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::conv::ConvSpec;
use crate::kspace::ScaleFactor;
use crate::tape::{ParamRef, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Negative slope of every leaky rectification in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub feat_channels: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    pub reduction: usize,
    pub scale: ScaleFactor,
    pub disc_base_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            feat_channels: 64,
            n_groups: 5,
            n_blocks: 5,
            reduction: 16,
            scale: ScaleFactor::new(2, 2, 2),
            disc_base_channels: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 1 || self.n_blocks < 1 {
            return Err(Error::Config("n_groups and n_blocks must be >= 1".into()));
        }
        if self.feat_channels == 0 || self.feat_channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "feat_channels {} must be a positive multiple of reduction {}",
                self.feat_channels, self.reduction
            )));
        }
        if !self.scale.is_supported() {
            return Err(Error::Config(format!("unsupported scale factor {}", self.scale)));
        }
        if self.disc_base_channels == 0 {
            return Err(Error::Config("disc_base_channels must be positive".into()));
        }
        Ok(())
    }
}

static STORE_IDS: AtomicU64 = AtomicU64::new(1);

/// Named parameter arrays of one component, with a touch counter that
/// records every binding of a parameter into a forward graph.
pub struct ParamStore<T: Scalar> {
    id: u64,
    pub component: String,
    entries: Vec<ParamEntry<T>>,
    touches: AtomicU64,
}

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(component: &str) -> Self {
        ParamStore {
            id: STORE_IDS.fetch_add(1, Ordering::Relaxed),
            component: component.to_string(),
            entries: Vec::new(),
            touches: AtomicU64::new(0),
        }
    }

    fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        self.entries.push(ParamEntry { name, value });
        self.entries.len() - 1
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn key(&self, index: usize) -> ParamRef {
        ParamRef { store: self.id, index }
    }

    /// Put one parameter on a tape, counting the access.
    pub fn bind(&self, tape: &mut Tape<T>, index: usize, trainable: bool) -> Var {
        self.touches.fetch_add(1, Ordering::Relaxed);
        tape.param(self.entries[index].value.clone(), self.key(index), trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn touches(&self) -> u64 {
        self.touches.load(Ordering::Relaxed)
    }

    pub fn reset_touches(&self) {
        self.touches.store(0, Ordering::Relaxed);
    }
}

fn kaiming_uniform<T: Scalar>(
    rng: &mut ChaCha12Rng,
    shape: (usize, usize, usize, usize, usize),
    fan_in: usize,
) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Array5::from_shape_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// A convolution layer's parameter indices and geometry.
#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Conv {
        let fan_in = cin * kernel.0 * kernel.1 * kernel.2;
        let w = store.add(
            format!("{name}.weight"),
            kaiming_uniform(rng, (cout, cin, kernel.0, kernel.1, kernel.2), fan_in),
        );
        let b = store.add(format!("{name}.bias"), Array5::zeros((1, cout, 1, 1, 1)));
        Conv { w, b, spec: ConvSpec::new(kernel, stride, pad) }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Var {
        let w = store.bind(tape, self.w, trainable);
        let b = store.bind(tape, self.b, trainable);
        tape.conv3d(x, w, Some(b), self.spec)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvT {
    w: usize,
    b: usize,
    spec: ConvSpec,
}

impl ConvT {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> ConvT {
        let fan_in = cin * kernel.0 * kernel.1 * kernel.2;
        let w = store.add(
            format!("{name}.weight"),
            kaiming_uniform(rng, (cin, cout, kernel.0, kernel.1, kernel.2), fan_in),
        );
        let b = store.add(format!("{name}.bias"), Array5::zeros((1, cout, 1, 1, 1)));
        ConvT { w, b, spec: ConvSpec::new(kernel, stride, pad) }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Var {
        let w = store.bind(tape, self.w, trainable);
        let b = store.bind(tape, self.b, trainable);
        tape.conv3d_transposed(x, w, Some(b), self.spec)
    }
}

fn component_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Six convolution layers, each followed by leaky rectification. The
/// extractor variant strides down to the LR grid; the LR encoder keeps
/// resolution.
pub struct EncoderNet<T: Scalar> {
    pub store: ParamStore<T>,
    layers: Vec<Conv>,
    /// Scale the input must be divisible by ((1,1,1) for the LR encoder).
    input_scale: (usize, usize, usize),
}

impl<T: Scalar> EncoderNet<T> {
    pub fn new_extractor(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut store = ParamStore::new("extractor");
        let mut rng = component_rng(seed, 1);
        let f = cfg.feat_channels;
        let (sx, sy, sz) = cfg.scale.tuple();
        let mut layers = Vec::with_capacity(6);
        for i in 0..6 {
            let cin = if i == 0 { 1 } else { f };
            // In-plane reduction on layer 2, through-slice on layer 4.
            let stride = match i {
                1 => (sx, sy, 1),
                3 => (1, 1, sz),
                _ => (1, 1, 1),
            };
            layers.push(Conv::init(
                &mut store,
                &mut rng,
                &format!("conv{}", i + 1),
                cin,
                f,
                (3, 3, 3),
                stride,
                (1, 1, 1),
            ));
        }
        EncoderNet { store, layers, input_scale: (sx, sy, sz) }
    }

    pub fn new_lr_encoder(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut store = ParamStore::new("lr_encoder");
        let mut rng = component_rng(seed, 2);
        let f = cfg.feat_channels;
        let layers = (0..6)
            .map(|i| {
                let cin = if i == 0 { 1 } else { f };
                Conv::init(
                    &mut store,
                    &mut rng,
                    &format!("conv{}", i + 1),
                    cin,
                    f,
                    (3, 3, 3),
                    (1, 1, 1),
                    (1, 1, 1),
                )
            })
            .collect();
        EncoderNet { store, layers, input_scale: (1, 1, 1) }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        let (_, c, nx, ny, nz) = tape.dim(x);
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} expects single-channel input, got {c} channels",
                self.store.component
            )));
        }
        let (sx, sy, sz) = self.input_scale;
        if nx % sx != 0 || ny % sy != 0 || nz % sz != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} input {nx}x{ny}x{nz} not divisible by scale {sx}x{sy}x{sz}",
                self.store.component
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.apply(tape, &self.store, h, trainable);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Decoders
// ---------------------------------------------------------------------------

struct Rcab {
    conv1: Conv,
    conv2: Conv,
    squeeze: Conv,
    excite: Conv,
}

struct ResidualGroup {
    blocks: Vec<Rcab>,
    tail: Conv,
}

struct UpsampleHead {
    subpixel: Conv,
    through_slice: Option<ConvT>,
}

/// Residual channel-attention trunk with long skips per group and over
/// the stack, an optional upsampling head, and a 1-channel projection.
pub struct DecoderNet<T: Scalar> {
    pub store: ParamStore<T>,
    groups: Vec<ResidualGroup>,
    body: Conv,
    upsample: Option<UpsampleHead>,
    proj: Conv,
    feat_channels: usize,
}

impl<T: Scalar> DecoderNet<T> {
    fn build(cfg: &NetworkConfig, name: &str, upsampling: bool, stream: u64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(name);
        let mut rng = component_rng(seed, stream);
        let f = cfg.feat_channels;
        let squeeze_ch = f / cfg.reduction;
        let groups = (0..cfg.n_groups)
            .map(|g| {
                let blocks = (0..cfg.n_blocks)
                    .map(|b| {
                        let prefix = format!("group{g}.block{b}");
                        Rcab {
                            conv1: Conv::init(&mut store, &mut rng, &format!("{prefix}.conv1"), f, f, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
                            conv2: Conv::init(&mut store, &mut rng, &format!("{prefix}.conv2"), f, f, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
                            squeeze: Conv::init(&mut store, &mut rng, &format!("{prefix}.att_squeeze"), f, squeeze_ch, (1, 1, 1), (1, 1, 1), (0, 0, 0)),
                            excite: Conv::init(&mut store, &mut rng, &format!("{prefix}.att_excite"), squeeze_ch, f, (1, 1, 1), (1, 1, 1), (0, 0, 0)),
                        }
                    })
                    .collect();
                let tail = Conv::init(&mut store, &mut rng, &format!("group{g}.tail"), f, f, (3, 3, 3), (1, 1, 1), (1, 1, 1));
                ResidualGroup { blocks, tail }
            })
            .collect();
        let body = Conv::init(&mut store, &mut rng, "body", f, f, (3, 3, 3), (1, 1, 1), (1, 1, 1));

        let upsample = if upsampling {
            let (sx, sy, sz) = cfg.scale.tuple();
            if sx != 2 || sy != 2 || !(sz == 1 || sz == 2) {
                return Err(Error::Config(format!(
                    "SR decoder supports in-plane x2 with through-slice x1 or x2, got {}",
                    cfg.scale
                )));
            }
            let subpixel = Conv::init(&mut store, &mut rng, "up.subpixel", f, 4 * f, (3, 3, 3), (1, 1, 1), (1, 1, 1));
            let through_slice = (sz == 2).then(|| {
                ConvT::init(&mut store, &mut rng, "up.through_slice", f, f, (3, 3, 4), (1, 1, 2), (1, 1, 1))
            });
            Some(UpsampleHead { subpixel, through_slice })
        } else {
            None
        };
        let proj = Conv::init(&mut store, &mut rng, "proj", f, 1, (3, 3, 3), (1, 1, 1), (1, 1, 1));
        Ok(DecoderNet { store, groups, body, upsample, proj, feat_channels: f })
    }

    pub fn new_lr_decoder(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, "lr_decoder", false, 3, seed)
    }

    pub fn new_sr_decoder(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, "sr_decoder", true, 4, seed)
    }

    fn rcab(&self, tape: &mut Tape<T>, x: Var, block: &Rcab, trainable: bool, force_gate_open: bool) -> Var {
        let store = &self.store;
        let mut r = block.conv1.apply(tape, store, x, trainable);
        r = tape.leaky_relu(r, LEAKY_SLOPE);
        r = block.conv2.apply(tape, store, r, trainable);
        let gated = if force_gate_open {
            r
        } else {
            let pooled = tape.global_avg_pool(r);
            let mut a = block.squeeze.apply(tape, store, pooled, trainable);
            a = tape.leaky_relu(a, LEAKY_SLOPE);
            a = block.excite.apply(tape, store, a, trainable);
            let gate = tape.sigmoid(a);
            tape.channel_gate(r, gate)
        };
        tape.add(x, gated)
    }

    pub fn forward(&self, tape: &mut Tape<T>, f: Var, trainable: bool) -> Result<Var> {
        self.forward_opts(tape, f, trainable, false)
    }

    /// `force_gate_open` bypasses the channel-attention sigmoid (gate = 1),
    /// reducing each block to a plain residual convolution block.
    pub fn forward_opts(
        &self,
        tape: &mut Tape<T>,
        f: Var,
        trainable: bool,
        force_gate_open: bool,
    ) -> Result<Var> {
        let (_, c, ..) = tape.dim(f);
        if c != self.feat_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} feature channels, got {c}",
                self.store.component, self.feat_channels
            )));
        }
        let mut h = f;
        for group in &self.groups {
            let skip = h;
            for block in &group.blocks {
                h = self.rcab(tape, h, block, trainable, force_gate_open);
            }
            h = group.tail.apply(tape, &self.store, h, trainable);
            h = tape.add(skip, h);
        }
        let body = self.body.apply(tape, &self.store, h, trainable);
        h = tape.add(f, body);

        if let Some(up) = &self.upsample {
            h = up.subpixel.apply(tape, &self.store, h, trainable);
            h = tape.pixel_shuffle_xy(h, 2);
            if let Some(ts) = &up.through_slice {
                h = ts.apply(tape, &self.store, h, trainable);
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(self.proj.apply(tape, &self.store, h, trainable))
    }
}

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

/// Four (conv, leaky) stages with channel doubling and in-plane stride-2
/// halving, ending in a raw 1-channel realness map (least-squares GAN).
pub struct DiscriminatorNet<T: Scalar> {
    pub store: ParamStore<T>,
    stages: Vec<Conv>,
    head: Conv,
    in_channels: usize,
}

impl<T: Scalar> DiscriminatorNet<T> {
    pub fn new(cfg: &NetworkConfig, name: &str, in_channels: usize, stream: u64, seed: u64) -> Self {
        let mut store = ParamStore::new(name);
        let mut rng = component_rng(seed, stream);
        let mut cin = in_channels;
        let mut cout = cfg.disc_base_channels;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            stages.push(Conv::init(
                &mut store,
                &mut rng,
                &format!("stage{}", i + 1),
                cin,
                cout,
                (3, 3, 3),
                (2, 2, 1),
                (1, 1, 1),
            ));
            cin = cout;
            cout *= 2;
        }
        let head = Conv::init(&mut store, &mut rng, "head", cin, 1, (3, 3, 3), (1, 1, 1), (1, 1, 1));
        DiscriminatorNet { store, stages, head, in_channels }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        let (_, c, ..) = tape.dim(x);
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} channels, got {c}",
                self.store.component, self.in_channels
            )));
        }
        let mut h = x;
        for stage in &self.stages {
            h = stage.apply(tape, &self.store, h, trainable);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(self.head.apply(tape, &self.store, h, trainable))
    }
}

// ---------------------------------------------------------------------------
// Component set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSubset {
    /// Only what inference touches: LR encoder + SR decoder.
    Inference,
    All,
}

/// Roles of the six components, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Extractor,
    LrEncoder,
    LrDecoder,
    SrDecoder,
    LrDiscriminator,
    FeatureDiscriminator,
}

pub const COMPONENT_KINDS: [ComponentKind; 6] = [
    ComponentKind::Extractor,
    ComponentKind::LrEncoder,
    ComponentKind::LrDecoder,
    ComponentKind::SrDecoder,
    ComponentKind::LrDiscriminator,
    ComponentKind::FeatureDiscriminator,
];

impl ComponentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ComponentKind::Extractor => "extractor",
            ComponentKind::LrEncoder => "lr_encoder",
            ComponentKind::LrDecoder => "lr_decoder",
            ComponentKind::SrDecoder => "sr_decoder",
            ComponentKind::LrDiscriminator => "lr_discriminator",
            ComponentKind::FeatureDiscriminator => "feature_discriminator",
        }
    }
}

pub struct ComponentSet<T: Scalar> {
    pub config: NetworkConfig,
    pub extractor: EncoderNet<T>,
    pub lr_encoder: EncoderNet<T>,
    pub lr_decoder: DecoderNet<T>,
    pub sr_decoder: DecoderNet<T>,
    pub lr_discriminator: DiscriminatorNet<T>,
    pub feature_discriminator: DiscriminatorNet<T>,
}

impl<T: Scalar> ComponentSet<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(ComponentSet {
            extractor: EncoderNet::new_extractor(&config, seed),
            lr_encoder: EncoderNet::new_lr_encoder(&config, seed),
            lr_decoder: DecoderNet::new_lr_decoder(&config, seed)?,
            sr_decoder: DecoderNet::new_sr_decoder(&config, seed)?,
            lr_discriminator: DiscriminatorNet::new(&config, "lr_discriminator", 1, 5, seed),
            feature_discriminator: DiscriminatorNet::new(
                &config,
                "feature_discriminator",
                config.feat_channels,
                6,
                seed,
            ),
            config,
        })
    }

    pub fn store(&self, kind: ComponentKind) -> &ParamStore<T> {
        match kind {
            ComponentKind::Extractor => &self.extractor.store,
            ComponentKind::LrEncoder => &self.lr_encoder.store,
            ComponentKind::LrDecoder => &self.lr_decoder.store,
            ComponentKind::SrDecoder => &self.sr_decoder.store,
            ComponentKind::LrDiscriminator => &self.lr_discriminator.store,
            ComponentKind::FeatureDiscriminator => &self.feature_discriminator.store,
        }
    }

    pub fn store_mut(&mut self, kind: ComponentKind) -> &mut ParamStore<T> {
        match kind {
            ComponentKind::Extractor => &mut self.extractor.store,
            ComponentKind::LrEncoder => &mut self.lr_encoder.store,
            ComponentKind::LrDecoder => &mut self.lr_decoder.store,
            ComponentKind::SrDecoder => &mut self.sr_decoder.store,
            ComponentKind::LrDiscriminator => &mut self.lr_discriminator.store,
            ComponentKind::FeatureDiscriminator => &mut self.feature_discriminator.store,
        }
    }

    /// Exact learnable-scalar count over the subset.
    pub fn count_parameters(&self, subset: ParamSubset) -> usize {
        let kinds: &[ComponentKind] = match subset {
            ParamSubset::Inference => &[ComponentKind::LrEncoder, ComponentKind::SrDecoder],
            ParamSubset::All => &COMPONENT_KINDS,
        };
        kinds.iter().map(|&k| self.store(k).param_count()).sum()
    }

    pub fn reset_touches(&self) {
        for kind in COMPONENT_KINDS {
            self.store(kind).reset_touches();
        }
    }

    pub fn touches(&self) -> [(ComponentKind, u64); 6] {
        COMPONENT_KINDS.map(|k| (k, self.store(k).touches()))
    }
}
