//! PSF-aware generators mapping (lensless image, PSF) to a lensed estimate.
//!
//! Two variants share the same encoder/decoder vocabulary:
//!
//! * **Y**: one stage; the CNN encoder and decoder are skip-connected and the
//!   auxiliary PSF encoder merges at the bottleneck, giving the network its
//!   Y shape.
//! * **TU**: two stages trained end to end; stage one is a skipless
//!   encoder/decoder with the PSF encoder joining at the stem (the T), whose
//!   output — an inspectable intermediate lensed image — feeds a stage-two
//!   U-shaped network with skips that restores remaining degradation.
//!
//! The PSF enters through one of two auxiliary forms: a sparse
//! coordinate/value list densified by scatter-add and run through a small
//! convolution stack, or a stack of contiguous tiles treated as channels.

use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::conv::upsample2x;
use crate::autodiff::{ops, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvBlock};
use crate::nn::{Ctx, NetModule, Param};
use crate::psf::{self, Psf};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorVariant {
    Y,
    Tu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsfBranchKind {
    Sparse,
    Unfold,
}

/// Auxiliary encoder over the densified sparse PSF.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseEncoderSpec {
    /// Total convolution layers; the first `depth` of them stride down to the
    /// fusion resolution.
    pub layers: usize,
    pub kernel: usize,
}

impl Default for SparseEncoderSpec {
    fn default() -> Self {
        SparseEncoderSpec { layers: 5, kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub variant: GeneratorVariant,
    pub psf_branch: PsfBranchKind,
    pub base_channels: usize,
    /// Downsampling stages; the bottleneck sits at `resolution / 2^depth`.
    pub depth: usize,
    pub input_resolution: usize,
    pub in_channels: usize,
    /// Decoder skip toggles, outermost stage first. Defaults to all-on for
    /// the skip-bearing decoders (Y, TU stage two).
    pub skip_connections: Option<Vec<bool>>,
    /// Channel width of the PSF features at the fusion point.
    pub psf_feature_channels: usize,
    pub sparse_encoder: SparseEncoderSpec,
    pub leaky_slope: f64,
    /// Instance normalization inside the blocks. On by default (adversarial
    /// training stability); supervised-heavy runs often do better without.
    pub norm: bool,
    /// Learnable 1x1 shortcut from each stage's input image into its output
    /// logits, initialized near identity. The decoder then learns a
    /// correction on top of the measurement instead of an image from scratch.
    pub input_skip: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            variant: GeneratorVariant::Y,
            psf_branch: PsfBranchKind::Sparse,
            base_channels: 32,
            depth: 4,
            input_resolution: 128,
            in_channels: 3,
            skip_connections: None,
            psf_feature_channels: 64,
            sparse_encoder: SparseEncoderSpec::default(),
            leaky_slope: 0.2,
            norm: true,
            input_skip: false,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| {
            Err(Error::Config {
                path: "generator".into(),
                message: m,
            })
        };
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.base_channels == 0 || self.psf_feature_channels == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return fail(format!("in_channels {} not in {{1, 3}}", self.in_channels));
        }
        let div = 1usize << self.depth;
        if self.input_resolution == 0 || self.input_resolution % div != 0 {
            return fail(format!(
                "input_resolution {} must be a positive multiple of 2^depth = {div}",
                self.input_resolution
            ));
        }
        if self.sparse_encoder.layers < self.depth {
            return fail(format!(
                "sparse encoder needs at least depth = {} layers to reach the fusion resolution, got {}",
                self.depth, self.sparse_encoder.layers
            ));
        }
        if let Some(skips) = &self.skip_connections {
            if skips.len() != self.depth {
                return fail(format!(
                    "skip_connections holds {} flags but depth is {}",
                    skips.len(),
                    self.depth
                ));
            }
        }
        Ok(())
    }

    pub fn bottleneck_resolution(&self) -> usize {
        self.input_resolution >> self.depth
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    /// Tile side for the unfold branch: tiles land exactly on the fusion
    /// resolution, so the channel count is 4^depth.
    pub fn unfold_tile_size(&self) -> usize {
        self.bottleneck_resolution()
    }

    pub fn unfold_tile_count(&self) -> usize {
        let per_axis = self.input_resolution / self.unfold_tile_size();
        per_axis * per_axis
    }

    fn skips(&self) -> Vec<bool> {
        self.skip_connections
            .clone()
            .unwrap_or_else(|| vec![true; self.depth])
    }

    /// Channels the aux branch receives: 1 densified plane (sparse) or the
    /// tile stack (unfold).
    pub fn aux_channels(&self) -> usize {
        match self.psf_branch {
            PsfBranchKind::Sparse => 1,
            PsfBranchKind::Unfold => self.unfold_tile_count(),
        }
    }
}

struct EncoderStage<T: Scalar> {
    a: ConvBlock<T>,
    b: ConvBlock<T>,
    down: ConvBlock<T>,
}

struct Encoder<T: Scalar> {
    stem: ConvBlock<T>,
    stages: Vec<EncoderStage<T>>,
    bottleneck: ConvBlock<T>,
}

impl<T: Scalar> Encoder<T> {
    fn new(rng: &mut StdRng, name: &str, spec: &GeneratorSpec, in_ch: usize) -> Self {
        let slope = spec.leaky_slope;
        let base = spec.base_channels;
        let stem = ConvBlock::new(rng, &format!("{name}.stem"), in_ch, base, 3, 1, false, slope);
        let mut stages = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let c = base << i;
            stages.push(EncoderStage {
                a: ConvBlock::new(rng, &format!("{name}.enc{i}.a"), c, c, 3, 1, spec.norm, slope),
                b: ConvBlock::new(rng, &format!("{name}.enc{i}.b"), c, c, 3, 1, spec.norm, slope),
                down: ConvBlock::new(rng, &format!("{name}.enc{i}.down"), c, c * 2, 3, 2, spec.norm, slope),
            });
        }
        let cb = spec.bottleneck_channels();
        let bottleneck = ConvBlock::new(rng, &format!("{name}.bottleneck"), cb, cb, 3, 1, spec.norm, slope);
        Encoder { stem, stages, bottleneck }
    }

    /// Returns the bottleneck features and per-stage skip tensors.
    fn forward(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> (Var<T>, Vec<Var<T>>) {
        let mut cur = self.stem.forward(ctx, x);
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            cur = stage.a.forward(ctx, &cur);
            cur = stage.b.forward(ctx, &cur);
            skips.push(cur.clone());
            cur = stage.down.forward(ctx, &cur);
        }
        (self.bottleneck.forward(ctx, &cur), skips)
    }
}

impl<T: Scalar> NetModule<T> for Encoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit_params(f);
        for s in &self.stages {
            s.a.visit_params(f);
            s.b.visit_params(f);
            s.down.visit_params(f);
        }
        self.bottleneck.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params_mut(f);
        for s in &mut self.stages {
            s.a.visit_params_mut(f);
            s.b.visit_params_mut(f);
            s.down.visit_params_mut(f);
        }
        self.bottleneck.visit_params_mut(f);
    }
}

struct DecoderStage<T: Scalar> {
    a: ConvBlock<T>,
    b: ConvBlock<T>,
    skip: bool,
}

/// Upsampling decoder: each stage is a 2x bilinear upsample followed by two
/// convolution blocks, optionally concatenating the encoder skip first.
struct Decoder<T: Scalar> {
    stages: Vec<DecoderStage<T>>,
    out: Conv2d<T>,
}

impl<T: Scalar> Decoder<T> {
    fn new(rng: &mut StdRng, name: &str, spec: &GeneratorSpec, skips: &[bool], out_ch: usize) -> Self {
        let slope = spec.leaky_slope;
        let base = spec.base_channels;
        let mut stages = Vec::with_capacity(spec.depth);
        let mut cur = spec.bottleneck_channels();
        for i in (0..spec.depth).rev() {
            let target = base << i;
            let with_skip = skips[i];
            let in_a = cur + if with_skip { target } else { 0 };
            stages.push(DecoderStage {
                a: ConvBlock::new(rng, &format!("{name}.dec{i}.a"), in_a, target, 3, 1, spec.norm, slope),
                b: ConvBlock::new(rng, &format!("{name}.dec{i}.b"), target, target, 3, 1, spec.norm, slope),
                skip: with_skip,
            });
            cur = target;
        }
        let out = Conv2d::new(rng, &format!("{name}.out"), base, out_ch, 3, 1, 1, 1.0);
        Decoder { stages, out }
    }

    /// Produces output logits; the caller applies the final activation.
    fn forward(&self, ctx: &mut Ctx<T>, bottleneck: &Var<T>, skips: &[Var<T>]) -> Var<T> {
        let mut cur = bottleneck.clone();
        let depth = self.stages.len();
        for (si, stage) in self.stages.iter().enumerate() {
            let level = depth - 1 - si;
            cur = upsample2x(&cur);
            if stage.skip {
                cur = ops::concat(&[skips[level].clone(), cur], 1);
            }
            cur = stage.a.forward(ctx, &cur);
            cur = stage.b.forward(ctx, &cur);
        }
        self.out.forward(ctx, &cur)
    }
}

impl<T: Scalar> NetModule<T> for Decoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for s in &self.stages {
            s.a.visit_params(f);
            s.b.visit_params(f);
        }
        self.out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in &mut self.stages {
            s.a.visit_params_mut(f);
            s.b.visit_params_mut(f);
        }
        self.out.visit_params_mut(f);
    }
}

/// Convolution stack over the auxiliary PSF representation; strides down to
/// the fusion resolution within its first `depth` layers.
pub struct PsfEncoder<T: Scalar> {
    blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> PsfEncoder<T> {
    fn new(rng: &mut StdRng, name: &str, spec: &GeneratorSpec) -> Self {
        let slope = spec.leaky_slope;
        let pf = spec.psf_feature_channels;
        let (layers, kernel, strided) = match spec.psf_branch {
            PsfBranchKind::Sparse => (
                spec.sparse_encoder.layers,
                spec.sparse_encoder.kernel,
                spec.depth,
            ),
            // Tiles already sit at the fusion resolution.
            PsfBranchKind::Unfold => (2, 3, 0),
        };
        let mut blocks = Vec::with_capacity(layers);
        let mut cur = spec.aux_channels();
        for l in 0..layers {
            let target = if l + 1 == layers {
                pf
            } else {
                pf.min(8usize << l)
            };
            let stride = if l < strided { 2 } else { 1 };
            blocks.push(ConvBlock::new(
                rng,
                &format!("{name}.psf{l}"),
                cur,
                target,
                kernel,
                stride,
                spec.norm && l > 0,
                slope,
            ));
            cur = target;
        }
        PsfEncoder { blocks }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, aux: &Var<T>) -> Var<T> {
        let mut cur = aux.clone();
        for b in &self.blocks {
            cur = b.forward(ctx, &cur);
        }
        cur
    }
}

impl<T: Scalar> NetModule<T> for PsfEncoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for b in &self.blocks {
            b.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
    }
}

/// Channel concat with the PSF features followed by a 1x1 mixing convolution.
struct Fusion<T: Scalar> {
    mix: Conv2d<T>,
    slope: f64,
}

impl<T: Scalar> Fusion<T> {
    fn new(rng: &mut StdRng, name: &str, spec: &GeneratorSpec) -> Self {
        let cb = spec.bottleneck_channels();
        let mix = Conv2d::new(
            rng,
            &format!("{name}.fuse"),
            cb + spec.psf_feature_channels,
            cb,
            1,
            1,
            0,
            spec.leaky_slope,
        );
        Fusion {
            mix,
            slope: spec.leaky_slope,
        }
    }

    fn forward(&self, ctx: &mut Ctx<T>, bottleneck: &Var<T>, psf_feat: &Var<T>) -> Var<T> {
        let joined = ops::concat(&[bottleneck.clone(), psf_feat.clone()], 1);
        ops::leaky_relu(&self.mix.forward(ctx, &joined), T::cast(self.slope))
    }
}

impl<T: Scalar> NetModule<T> for Fusion<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.mix.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mix.visit_params_mut(f);
    }
}

/// Near-identity 1x1 shortcut feeding the output logits: weight 4 on the
/// matching channel, bias -2, so sigmoid(shortcut(y)) is approximately y.
fn identity_shortcut<T: Scalar>(name: &str, channels: usize) -> Conv2d<T> {
    let mut weight = ArrayD::zeros(IxDyn(&[channels, channels, 1, 1]));
    for c in 0..channels {
        weight[[c, c, 0, 0]] = T::cast(4.0);
    }
    Conv2d {
        weight: crate::nn::Param::new(format!("{name}.skipw"), weight),
        bias: crate::nn::Param::new(
            format!("{name}.skipb"),
            ArrayD::from_elem(IxDyn(&[channels]), T::cast(-2.0)),
        ),
        stride: 1,
        pad: 0,
    }
}

/// One decoding head: decoder logits, optional input shortcut, sigmoid.
struct Head<T: Scalar> {
    decoder: Decoder<T>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> Head<T> {
    fn new(rng: &mut StdRng, name: &str, spec: &GeneratorSpec, skips: &[bool]) -> Self {
        let mut decoder = Decoder::new(rng, name, spec, skips, spec.in_channels);
        let shortcut = spec.input_skip.then(|| {
            // Damp the decoder head so the start sits near the shortcut while
            // gradients still reach the stack underneath.
            let tenth = T::cast(0.1);
            decoder.out.weight.value.mapv_inplace(|v| v * tenth);
            decoder.out.bias.value.fill(T::zero());
            identity_shortcut(name, spec.in_channels)
        });
        Head { decoder, shortcut }
    }

    fn forward(
        &self,
        ctx: &mut Ctx<T>,
        input_image: &Var<T>,
        bottleneck: &Var<T>,
        skips: &[Var<T>],
    ) -> Var<T> {
        let mut logits = self.decoder.forward(ctx, bottleneck, skips);
        if let Some(shortcut) = &self.shortcut {
            logits = ops::add(&logits, &shortcut.forward(ctx, input_image));
        }
        ops::sigmoid(&logits)
    }
}

impl<T: Scalar> NetModule<T> for Head<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.decoder.visit_params(f);
        if let Some(s) = &self.shortcut {
            s.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.decoder.visit_params_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params_mut(f);
        }
    }
}

pub struct YNet<T: Scalar> {
    encoder: Encoder<T>,
    psf_encoder: PsfEncoder<T>,
    fusion: Fusion<T>,
    head: Head<T>,
}

pub struct TuNet<T: Scalar> {
    stage1_encoder: Encoder<T>,
    psf_encoder: PsfEncoder<T>,
    fusion: Fusion<T>,
    stage1_head: Head<T>,
    stage2_encoder: Encoder<T>,
    stage2_head: Head<T>,
}

/// A built generator plus the spec it was built from (spec and weights always
/// travel together).
pub struct Generator<T: Scalar> {
    pub spec: GeneratorSpec,
    net: GeneratorNet<T>,
}

enum GeneratorNet<T: Scalar> {
    Y(YNet<T>),
    Tu(TuNet<T>),
}

/// Forward result: the reconstruction, and for the two-stage variant the
/// inspectable stage-one output.
pub struct GeneratorOutput<T: Scalar> {
    pub image: Var<T>,
    pub intermediate: Option<Var<T>>,
}

/// Construct a generator with seeded random weights.
pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<Generator<T>> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let skips = spec.skips();
    let net = match spec.variant {
        GeneratorVariant::Y => GeneratorNet::Y(YNet {
            encoder: Encoder::new(&mut rng, "y", spec, spec.in_channels),
            psf_encoder: PsfEncoder::new(&mut rng, "y", spec),
            fusion: Fusion::new(&mut rng, "y", spec),
            head: Head::new(&mut rng, "y", spec, &skips),
        }),
        GeneratorVariant::Tu => GeneratorNet::Tu(TuNet {
            stage1_encoder: Encoder::new(&mut rng, "t1", spec, spec.in_channels),
            psf_encoder: PsfEncoder::new(&mut rng, "t1", spec),
            fusion: Fusion::new(&mut rng, "t1", spec),
            stage1_head: Head::new(&mut rng, "t1", spec, &vec![false; spec.depth]),
            stage2_encoder: Encoder::new(&mut rng, "u2", spec, spec.in_channels),
            stage2_head: Head::new(&mut rng, "u2", spec, &skips),
        }),
    };
    Ok(Generator {
        spec: spec.clone(),
        net,
    })
}

impl<T: Scalar> Generator<T> {
    /// Map a lensless batch plus its PSF representation to the lensed
    /// estimate. Aborts with a diagnostic if the output goes non-finite
    /// (training-instability guard).
    pub fn forward(
        &self,
        ctx: &mut Ctx<T>,
        lensless: &Var<T>,
        psf_aux: &Var<T>,
    ) -> Result<GeneratorOutput<T>> {
        let res = self.spec.input_resolution;
        let s = lensless.shape();
        if s.len() != 4 || s[2] != res || s[3] != res || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "generator expects [N, {}, {res}, {res}] input, got {s:?}",
                self.spec.in_channels
            )));
        }
        let out = match &self.net {
            GeneratorNet::Y(y) => {
                let (bottleneck, skips) = y.encoder.forward(ctx, lensless);
                let pf = y.psf_encoder.forward(ctx, psf_aux);
                let fused = y.fusion.forward(ctx, &bottleneck, &pf);
                GeneratorOutput {
                    image: y.head.forward(ctx, lensless, &fused, &skips),
                    intermediate: None,
                }
            }
            GeneratorNet::Tu(tu) => {
                let (bottleneck, _) = tu.stage1_encoder.forward(ctx, lensless);
                let pf = tu.psf_encoder.forward(ctx, psf_aux);
                let fused = tu.fusion.forward(ctx, &bottleneck, &pf);
                let intermediate = tu.stage1_head.forward(ctx, lensless, &fused, &[]);
                let (b2, skips2) = tu.stage2_encoder.forward(ctx, &intermediate);
                GeneratorOutput {
                    image: tu.stage2_head.forward(ctx, &intermediate, &b2, &skips2),
                    intermediate: Some(intermediate),
                }
            }
        };
        if !out.image.all_finite() {
            return Err(Error::Numeric(
                "generator produced non-finite values".into(),
            ));
        }
        Ok(out)
    }

    pub fn psf_encoder(&self) -> &PsfEncoder<T> {
        match &self.net {
            GeneratorNet::Y(y) => &y.psf_encoder,
            GeneratorNet::Tu(tu) => &tu.psf_encoder,
        }
    }

    /// Stage-one parameter count (TU) or full count (Y); used to compare
    /// architecture weights.
    pub fn stage1_param_count(&self) -> usize {
        match &self.net {
            GeneratorNet::Y(_) => crate::nn::param_count(self),
            GeneratorNet::Tu(tu) => {
                let mut n = 0;
                let mut add = |p: &Param<T>| n += p.len();
                tu.stage1_encoder.visit_params(&mut add);
                tu.psf_encoder.visit_params(&mut add);
                tu.fusion.visit_params(&mut add);
                tu.stage1_head.visit_params(&mut add);
                n
            }
        }
    }
}

impl<T: Scalar> NetModule<T> for Generator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match &self.net {
            GeneratorNet::Y(y) => {
                y.encoder.visit_params(f);
                y.psf_encoder.visit_params(f);
                y.fusion.visit_params(f);
                y.head.visit_params(f);
            }
            GeneratorNet::Tu(tu) => {
                tu.stage1_encoder.visit_params(f);
                tu.psf_encoder.visit_params(f);
                tu.fusion.visit_params(f);
                tu.stage1_head.visit_params(f);
                tu.stage2_encoder.visit_params(f);
                tu.stage2_head.visit_params(f);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.net {
            GeneratorNet::Y(y) => {
                y.encoder.visit_params_mut(f);
                y.psf_encoder.visit_params_mut(f);
                y.fusion.visit_params_mut(f);
                y.head.visit_params_mut(f);
            }
            GeneratorNet::Tu(tu) => {
                tu.stage1_encoder.visit_params_mut(f);
                tu.psf_encoder.visit_params_mut(f);
                tu.fusion.visit_params_mut(f);
                tu.stage1_head.visit_params_mut(f);
                tu.stage2_encoder.visit_params_mut(f);
                tu.stage2_head.visit_params_mut(f);
            }
        }
    }
}

/// Build the `[N, C_aux, ...]` auxiliary tensor for a batch of PSFs under the
/// generator's branch choice. Each PSF is brought to the input resolution the
/// same way the forward model does (centered embedding for small kernels,
/// area downsampling for large ones) and peak-normalized before
/// sparsify/unfold (the forward model keeps its own sum-normalized copies).
pub fn prepare_psf_aux<T: Scalar>(spec: &GeneratorSpec, psfs: &[Psf]) -> Result<ArrayD<T>> {
    if psfs.is_empty() {
        return Err(Error::InvalidArgument("empty PSF batch".into()));
    }
    let res = spec.input_resolution;
    let mut planes: Vec<ArrayD<T>> = Vec::with_capacity(psfs.len());
    for k in psfs {
        let fitted = crate::physics::fit_kernel(k, res, res)?;
        let mut canvas = ndarray::Array2::<f32>::zeros((res, res));
        let (off_r, off_c) = ((res - fitted.height()) / 2, (res - fitted.width()) / 2);
        for ((i, j), &v) in fitted.data().indexed_iter() {
            canvas[[off_r + i, off_c + j]] = v;
        }
        let max = canvas
            .iter()
            .cloned()
            .fold(0.0f32, f32::max)
            .max(f32::MIN_POSITIVE);
        let peaked = Psf::new(canvas.mapv(|v| v / max))?;
        match spec.psf_branch {
            PsfBranchKind::Sparse => {
                let threshold = psf::default_threshold(&peaked);
                // Area resizing smears the caustic, so the default quarter
                // capacity can overflow here; full capacity always fits.
                let pad = res * res;
                let sparse = psf::sparsify(&peaked, threshold, pad)?;
                let dense = psf::densify(&sparse)?;
                planes.push(ArrayD::from_shape_fn(IxDyn(&[1, res, res]), |ix| {
                    T::cast(dense.data()[[ix[1], ix[2]]] as f64)
                }));
            }
            PsfBranchKind::Unfold => {
                let tiled = psf::unfold_psf(&peaked, spec.unfold_tile_size())?;
                let stack = tiled.to_channel_stack();
                let (tc, th, tw) = stack.dim();
                planes.push(ArrayD::from_shape_fn(IxDyn(&[tc, th, tw]), |ix| {
                    T::cast(stack[[ix[0], ix[1], ix[2]]] as f64)
                }));
            }
        }
    }
    let mut shape = vec![psfs.len()];
    shape.extend_from_slice(planes[0].shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (i, plane) in planes.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(plane);
    }
    Ok(out)
}

/// Standalone sparse-branch feature extraction; exposed so the sparse path
/// can be checked against running the same stack on a densified grid.
pub fn sparse_encoder_forward<T: Scalar>(
    encoder: &PsfEncoder<T>,
    ctx: &mut Ctx<T>,
    sparse: &crate::psf::SparsePsf,
) -> Result<Var<T>> {
    let dense = psf::densify(sparse)?;
    let (h, w) = (dense.height(), dense.width());
    let arr = ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| {
        T::cast(dense.data()[[ix[2], ix[3]]] as f64)
    });
    Ok(encoder.forward(ctx, &Var::constant(arr)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_count;
    use crate::psf::synthetic_caustic;

    fn toy_spec(variant: GeneratorVariant, branch: PsfBranchKind) -> GeneratorSpec {
        GeneratorSpec {
            variant,
            psf_branch: branch,
            base_channels: 4,
            depth: 2,
            input_resolution: 16,
            psf_feature_channels: 8,
            ..GeneratorSpec::default()
        }
    }

    fn batch(n: usize, res: usize) -> Var<f32> {
        Var::constant(ArrayD::from_shape_fn(IxDyn(&[n, 3, res, res]), |ix| {
            ((ix[1] + ix[2] + ix[3]) % 7) as f32 / 7.0
        }))
    }

    #[test]
    fn y_output_shape_matches_input() {
        let spec = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        let g = build_generator::<f32>(&spec, 1).unwrap();
        let psfs = vec![synthetic_caustic(16, 0), synthetic_caustic(16, 1)];
        let aux = Var::constant(prepare_psf_aux::<f32>(&spec, &psfs).unwrap());
        let mut ctx = Ctx::inference();
        let out = g.forward(&mut ctx, &batch(2, 16), &aux).unwrap();
        assert_eq!(out.image.shape(), &[2, 3, 16, 16]);
        assert!(out.intermediate.is_none());
        assert!(out.image.all_finite());
    }

    #[test]
    fn tu_exposes_intermediate_stage() {
        let spec = toy_spec(GeneratorVariant::Tu, PsfBranchKind::Unfold);
        let g = build_generator::<f32>(&spec, 2).unwrap();
        let psfs = vec![synthetic_caustic(16, 3)];
        let aux = Var::constant(prepare_psf_aux::<f32>(&spec, &psfs).unwrap());
        let mut ctx = Ctx::inference();
        let out = g.forward(&mut ctx, &batch(1, 16), &aux).unwrap();
        assert_eq!(out.image.shape(), &[1, 3, 16, 16]);
        let inter = out.intermediate.expect("stage-1 output exposed");
        assert_eq!(inter.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn y_heavier_than_tu_stage1() {
        let y = build_generator::<f32>(&toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse), 3)
            .unwrap();
        let tu = build_generator::<f32>(&toy_spec(GeneratorVariant::Tu, PsfBranchKind::Sparse), 3)
            .unwrap();
        assert!(
            param_count(&y) > tu.stage1_param_count(),
            "y {} vs tu stage1 {}",
            param_count(&y),
            tu.stage1_param_count()
        );
    }

    #[test]
    fn deterministic_inference() {
        let spec = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        let g = build_generator::<f32>(&spec, 4).unwrap();
        let psfs = vec![synthetic_caustic(16, 5)];
        let aux = Var::constant(prepare_psf_aux::<f32>(&spec, &psfs).unwrap());
        let x = batch(1, 16);
        let a = g.forward(&mut Ctx::inference(), &x, &aux).unwrap();
        let b = g.forward(&mut Ctx::inference(), &x, &aux).unwrap();
        assert_eq!(a.image.value(), b.image.value());
    }

    #[test]
    fn psf_awareness_changes_output() {
        let spec = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        let g = build_generator::<f32>(&spec, 5).unwrap();
        let a1 = Var::constant(
            prepare_psf_aux::<f32>(&spec, &[synthetic_caustic(16, 10)]).unwrap(),
        );
        let a2 = Var::constant(
            prepare_psf_aux::<f32>(&spec, &[synthetic_caustic(16, 11)]).unwrap(),
        );
        let x = batch(1, 16);
        let o1 = g.forward(&mut Ctx::inference(), &x, &a1).unwrap();
        let o2 = g.forward(&mut Ctx::inference(), &x, &a2).unwrap();
        let max_delta = o1
            .image
            .value()
            .iter()
            .zip(o2.image.value().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_delta > 0.0, "output insensitive to the PSF input");
    }

    #[test]
    fn tile_order_sensitivity() {
        // Permuting the tile stack changes the unfold features: the encoder
        // contract is contiguous row-major tiles.
        let spec = toy_spec(GeneratorVariant::Y, PsfBranchKind::Unfold);
        let g = build_generator::<f32>(&spec, 6).unwrap();
        let aux = prepare_psf_aux::<f32>(&spec, &[synthetic_caustic(16, 12)]).unwrap();
        let mut swapped = aux.clone();
        let t0 = aux.index_axis(ndarray::Axis(1), 0).to_owned();
        let t1 = aux.index_axis(ndarray::Axis(1), 1).to_owned();
        swapped.index_axis_mut(ndarray::Axis(1), 0).assign(&t1);
        swapped.index_axis_mut(ndarray::Axis(1), 1).assign(&t0);
        let f1 = g
            .psf_encoder()
            .forward(&mut Ctx::inference(), &Var::constant(aux));
        let f2 = g
            .psf_encoder()
            .forward(&mut Ctx::inference(), &Var::constant(swapped));
        assert_ne!(f1.value(), f2.value());
    }

    #[test]
    fn sparse_path_matches_dense_oracle() {
        let spec = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        let g = build_generator::<f32>(&spec, 7).unwrap();
        let k = synthetic_caustic(16, 13);
        let sparse = psf::sparsify(&k, psf::default_threshold(&k), 16 * 16).unwrap();

        let mut ctx = Ctx::inference();
        let via_sparse = sparse_encoder_forward(g.psf_encoder(), &mut ctx, &sparse).unwrap();

        let dense = psf::densify(&sparse).unwrap();
        let arr = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16]), |ix| {
            dense.data()[[ix[2], ix[3]]]
        });
        let via_dense = g
            .psf_encoder()
            .forward(&mut Ctx::inference(), &Var::constant(arr));
        assert_eq!(via_sparse.value(), via_dense.value());
        // Spatial dims must match the fusion point.
        let b = spec.bottleneck_resolution();
        assert_eq!(&via_sparse.shape()[2..], &[b, b]);
    }

    #[test]
    fn zero_sparse_input_matches_zero_grid_response() {
        let spec = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        let g = build_generator::<f32>(&spec, 8).unwrap();
        let zero_sparse =
            crate::psf::SparsePsf::from_parts(vec![], vec![], (16, 16), 8).unwrap();
        let mut ctx = Ctx::inference();
        let out = sparse_encoder_forward(g.psf_encoder(), &mut ctx, &zero_sparse).unwrap();
        let zeros = Var::constant(ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
        let want = g.psf_encoder().forward(&mut Ctx::inference(), &zeros);
        assert_eq!(out.value(), want.value());
    }

    #[test]
    fn rejects_wrong_resolution() {
        let spec = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        let g = build_generator::<f32>(&spec, 9).unwrap();
        let aux = Var::constant(
            prepare_psf_aux::<f32>(&spec, &[synthetic_caustic(16, 1)]).unwrap(),
        );
        let bad = batch(1, 32);
        assert!(g.forward(&mut Ctx::inference(), &bad, &aux).is_err());
    }

    #[test]
    fn spec_validation_catches_bad_configs() {
        let mut s = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        s.input_resolution = 18; // not divisible by 2^depth
        assert!(s.validate().is_err());
        let mut s2 = toy_spec(GeneratorVariant::Y, PsfBranchKind::Sparse);
        s2.sparse_encoder.layers = 1;
        assert!(s2.validate().is_err());
    }
}
