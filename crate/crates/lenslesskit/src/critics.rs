//! The two Wasserstein critics.
//!
//! * A patch critic for the lensless domain: stride-2 convolution pyramid
//!   emitting a spatial score map, each cell judging one receptive field.
//! * A global backbone critic for the lensed domain: a VGG-style
//!   fully-convolutional trunk (optionally initialized from pretrained
//!   weights, with its trailing layers removable) pooled to one score per
//!   image.
//!
//! Scores are unbounded reals, consistent with the Wasserstein objective.
//! [`CriticSpec::bounded_output`] adds a sigmoid head for ablations.

use std::path::PathBuf;

use ndarray::ArrayD;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvBlock, Linear};
use crate::nn::{tensor_io, Ctx, NetModule, Param};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticKind {
    Patch,
    GlobalBackbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSpec {
    pub kind: CriticKind,
    pub base_channels: usize,
    /// Patch: number of stride-2 pyramid levels (a stride-1 level and the
    /// 1-channel head follow).
    pub layers: usize,
    /// Global: number of two-conv trunk blocks (each followed by a strided
    /// downsample).
    pub blocks: usize,
    /// Global: trailing trunk convolutions dropped after (or instead of)
    /// loading pretrained weights.
    pub truncation: usize,
    pub bounded_output: bool,
    /// Optional pretrained trunk weights (tensor archive). Fine-tuned, not
    /// frozen.
    pub backbone_weights: Option<PathBuf>,
    /// Required to build a global critic without pretrained weights.
    pub allow_random_init: bool,
    pub in_channels: usize,
    pub leaky_slope: f64,
    /// Instance normalization inside the stacks. Note the normalization pools
    /// whole-plane statistics, so disabling it is what makes patch scores
    /// strictly local.
    pub norm: bool,
}

impl Default for CriticSpec {
    fn default() -> Self {
        CriticSpec {
            kind: CriticKind::Patch,
            base_channels: 32,
            layers: 3,
            blocks: 3,
            truncation: 3,
            bounded_output: false,
            backbone_weights: None,
            allow_random_init: false,
            in_channels: 3,
            leaky_slope: 0.2,
            norm: true,
        }
    }
}

impl CriticSpec {
    pub fn patch() -> Self {
        CriticSpec::default()
    }

    pub fn global() -> Self {
        CriticSpec {
            kind: CriticKind::GlobalBackbone,
            base_channels: 16,
            ..CriticSpec::default()
        }
    }

    pub fn validate(&self, input_resolution: usize) -> Result<()> {
        let fail = |m: String| {
            Err(Error::Config {
                path: "critic".into(),
                message: m,
            })
        };
        if self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        match self.kind {
            CriticKind::Patch => {
                if self.layers == 0 {
                    return fail("patch critic needs at least one pyramid level".into());
                }
                // Two k4/p1 stride-1 convolutions follow the pyramid; each
                // costs one pixel.
                let after = input_resolution >> self.layers;
                if after < 3 {
                    return fail(format!(
                        "patch critic with {} levels collapses a {input_resolution} input",
                        self.layers
                    ));
                }
            }
            CriticKind::GlobalBackbone => {
                if self.blocks == 0 {
                    return fail("global critic needs at least one trunk block".into());
                }
                if input_resolution >> self.blocks == 0 {
                    return fail(format!(
                        "global critic with {} blocks collapses a {input_resolution} input",
                        self.blocks
                    ));
                }
                let total = 3 * self.blocks;
                if self.truncation >= total {
                    return fail(format!(
                        "truncation {} removes the whole {total}-layer trunk",
                        self.truncation
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Anything that scores a batch of images: `[N,C,H,W] -> [N]`.
pub trait ScoreModel<T: Scalar> {
    fn score(&self, ctx: &mut Ctx<T>, images: &Var<T>) -> Var<T>;
}

pub struct PatchCritic<T: Scalar> {
    pyramid: Vec<ConvBlock<T>>,
    penultimate: ConvBlock<T>,
    head: Conv2d<T>,
    bounded: bool,
}

impl<T: Scalar> PatchCritic<T> {
    fn new(rng: &mut StdRng, spec: &CriticSpec) -> Self {
        let slope = spec.leaky_slope;
        let mut pyramid = Vec::with_capacity(spec.layers);
        let mut cur = spec.in_channels;
        for l in 0..spec.layers {
            let target = spec.base_channels << l;
            // First level skips normalization, standard for critics.
            pyramid.push(ConvBlock::new(
                rng,
                &format!("dp.l{l}"),
                cur,
                target,
                4,
                2,
                spec.norm && l > 0,
                slope,
            ));
            cur = target;
        }
        let penultimate = ConvBlock::new(rng, "dp.pen", cur, cur * 2, 4, 1, spec.norm, slope);
        let head = Conv2d::new(rng, "dp.head", cur * 2, 1, 4, 1, 1, 1.0);
        PatchCritic {
            pyramid,
            penultimate,
            head,
            bounded: spec.bounded_output,
        }
    }

    /// The spatial score map `[N, 1, h, w]`.
    pub fn score_map(&self, ctx: &mut Ctx<T>, images: &Var<T>) -> Var<T> {
        let mut cur = images.clone();
        for b in &self.pyramid {
            cur = b.forward(ctx, &cur);
        }
        cur = self.penultimate.forward(ctx, &cur);
        let mut map = self.head.forward(ctx, &cur);
        if self.bounded {
            map = ops::sigmoid(&map);
        }
        map
    }
}

impl<T: Scalar> ScoreModel<T> for PatchCritic<T> {
    fn score(&self, ctx: &mut Ctx<T>, images: &Var<T>) -> Var<T> {
        let map = self.score_map(ctx, images);
        let n = map.shape()[0];
        ops::reshape(&ops::mean_axes(&map, &[1, 2, 3]), &[n])
    }
}

impl<T: Scalar> NetModule<T> for PatchCritic<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for b in &self.pyramid {
            b.visit_params(f);
        }
        self.penultimate.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.pyramid {
            b.visit_params_mut(f);
        }
        self.penultimate.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

pub struct GlobalCritic<T: Scalar> {
    trunk: Vec<ConvBlock<T>>,
    head: Linear<T>,
    bounded: bool,
    /// True when the trunk was randomly initialized instead of loaded.
    pub random_init: bool,
}

impl<T: Scalar> GlobalCritic<T> {
    fn new(rng: &mut StdRng, spec: &CriticSpec) -> Result<Self> {
        let slope = spec.leaky_slope;
        // VGG-style: per block, two 3x3 convs then a strided downsample.
        let mut convs: Vec<(usize, usize, usize)> = Vec::new(); // (in, out, stride)
        let mut cur = spec.in_channels;
        for b in 0..spec.blocks {
            let width = spec.base_channels << b;
            convs.push((cur, width, 1));
            convs.push((width, width, 1));
            convs.push((width, width, 2));
            cur = width;
        }
        convs.truncate(convs.len() - spec.truncation);
        let trunk: Vec<ConvBlock<T>> = convs
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, stride))| {
                ConvBlock::new(rng, &format!("dvgg.t{i}"), ci, co, 3, stride, spec.norm && i > 0, slope)
            })
            .collect();
        let final_width = convs.last().expect("non-empty trunk").1;
        let mut critic = GlobalCritic {
            trunk,
            head: Linear::new(rng, "dvgg.head", final_width, 1),
            bounded: spec.bounded_output,
            random_init: true,
        };
        match &spec.backbone_weights {
            Some(path) if path.exists() => {
                critic.load_trunk(path)?;
                critic.random_init = false;
            }
            _ if spec.allow_random_init => {}
            _ => {
                return Err(Error::MissingBackbone {
                    path: spec.backbone_weights.clone(),
                })
            }
        }
        Ok(critic)
    }

    fn load_trunk(&mut self, path: &std::path::Path) -> Result<()> {
        let tensors = tensor_io::read_tensors::<T>(path)?;
        let mut by_name: std::collections::HashMap<String, ArrayD<T>> =
            tensors.into_iter().collect();
        let mut err = None;
        for block in &mut self.trunk {
            block.visit_params_mut(&mut |p| {
                if err.is_some() {
                    return;
                }
                match by_name.remove(&p.name) {
                    Some(v) if v.shape() == p.value.shape() => p.value = v,
                    Some(v) => {
                        err = Some(format!(
                            "backbone tensor `{}` has shape {:?}, trunk expects {:?}",
                            p.name,
                            v.shape(),
                            p.value.shape()
                        ))
                    }
                    None => err = Some(format!("backbone archive missing `{}`", p.name)),
                }
            });
        }
        match err {
            Some(e) => Err(Error::Checkpoint(e)),
            None => Ok(()),
        }
    }

    /// Write the trunk tensors; lets one run's critic seed another.
    pub fn save_trunk(&self, path: &std::path::Path) -> Result<()> {
        let mut tensors = Vec::new();
        for block in &self.trunk {
            block.visit_params(&mut |p| tensors.push((p.name.clone(), p.value.clone())));
        }
        tensor_io::write_tensors(path, &tensors)
    }
}

impl<T: Scalar> ScoreModel<T> for GlobalCritic<T> {
    fn score(&self, ctx: &mut Ctx<T>, images: &Var<T>) -> Var<T> {
        let mut cur = images.clone();
        for b in &self.trunk {
            cur = b.forward(ctx, &cur);
        }
        // Global average pool to [N, C], then the scalar head.
        let n = cur.shape()[0];
        let c = cur.shape()[1];
        let pooled = ops::reshape(&ops::mean_axes(&cur, &[2, 3]), &[n, c]);
        let mut out = ops::reshape(&self.head.forward(ctx, &pooled), &[n]);
        if self.bounded {
            out = ops::sigmoid(&out);
        }
        out
    }
}

impl<T: Scalar> NetModule<T> for GlobalCritic<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for b in &self.trunk {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.trunk {
            b.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

/// A built critic with its spec.
pub struct Critic<T: Scalar> {
    pub spec: CriticSpec,
    net: CriticNet<T>,
}

enum CriticNet<T: Scalar> {
    Patch(PatchCritic<T>),
    Global(GlobalCritic<T>),
}

pub fn build_critic<T: Scalar>(
    spec: &CriticSpec,
    input_resolution: usize,
    seed: u64,
) -> Result<Critic<T>> {
    spec.validate(input_resolution)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let net = match spec.kind {
        CriticKind::Patch => CriticNet::Patch(PatchCritic::new(&mut rng, spec)),
        CriticKind::GlobalBackbone => CriticNet::Global(GlobalCritic::new(&mut rng, spec)?),
    };
    Ok(Critic {
        spec: spec.clone(),
        net,
    })
}

impl<T: Scalar> Critic<T> {
    pub fn as_patch(&self) -> Option<&PatchCritic<T>> {
        match &self.net {
            CriticNet::Patch(p) => Some(p),
            CriticNet::Global(_) => None,
        }
    }

    pub fn as_global(&self) -> Option<&GlobalCritic<T>> {
        match &self.net {
            CriticNet::Global(g) => Some(g),
            CriticNet::Patch(_) => None,
        }
    }
}

impl<T: Scalar> ScoreModel<T> for Critic<T> {
    fn score(&self, ctx: &mut Ctx<T>, images: &Var<T>) -> Var<T> {
        match &self.net {
            CriticNet::Patch(p) => p.score(ctx, images),
            CriticNet::Global(g) => g.score(ctx, images),
        }
    }
}

impl<T: Scalar> NetModule<T> for Critic<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match &self.net {
            CriticNet::Patch(p) => p.visit_params(f),
            CriticNet::Global(g) => g.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.net {
            CriticNet::Patch(p) => p.visit_params_mut(f),
            CriticNet::Global(g) => g.visit_params_mut(f),
        }
    }
}

/// Score with the instability guard: rejects non-finite critic output.
pub fn critic_forward<T: Scalar>(
    critic: &dyn ScoreModel<T>,
    ctx: &mut Ctx<T>,
    images: &Var<T>,
) -> Result<Var<T>> {
    let scores = critic.score(ctx, images);
    if !scores.all_finite() {
        return Err(Error::Numeric("critic produced non-finite scores".into()));
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn global_spec() -> CriticSpec {
        CriticSpec {
            allow_random_init: true,
            blocks: 2,
            truncation: 1,
            ..CriticSpec::global()
        }
    }

    fn images(n: usize, res: usize) -> Var<f32> {
        Var::constant(ArrayD::from_shape_fn(IxDyn(&[n, 3, res, res]), |ix| {
            ((ix[0] + ix[2] * 3 + ix[3]) % 11) as f32 / 11.0
        }))
    }

    #[test]
    fn patch_map_has_spatial_extent() {
        let spec = CriticSpec::patch();
        let c = build_critic::<f32>(&spec, 128, 0).unwrap();
        let map = c
            .as_patch()
            .unwrap()
            .score_map(&mut Ctx::inference(), &images(2, 128));
        assert_eq!(map.shape()[0], 2);
        assert_eq!(map.shape()[1], 1);
        assert!(map.shape()[2] > 1 && map.shape()[3] > 1, "{:?}", map.shape());
    }

    #[test]
    fn global_scores_one_scalar_per_image() {
        let c = build_critic::<f32>(&global_spec(), 32, 1).unwrap();
        let s = c.score(&mut Ctx::inference(), &images(3, 32));
        assert_eq!(s.shape(), &[3]);
        assert!(s.all_finite());
        assert!(c.as_global().unwrap().random_init);
    }

    #[test]
    fn missing_backbone_without_opt_in_errors() {
        let spec = CriticSpec {
            allow_random_init: false,
            ..global_spec()
        };
        assert!(matches!(
            build_critic::<f32>(&spec, 32, 0),
            Err(Error::MissingBackbone { .. })
        ));
    }

    #[test]
    fn backbone_roundtrip_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunk.bin");
        let donor = build_critic::<f32>(&global_spec(), 32, 7).unwrap();
        donor.as_global().unwrap().save_trunk(&path).unwrap();

        let spec = CriticSpec {
            backbone_weights: Some(path),
            allow_random_init: false,
            ..global_spec()
        };
        let loaded = build_critic::<f32>(&spec, 32, 8).unwrap();
        assert!(!loaded.as_global().unwrap().random_init);
        // Same trunk weights means same scores.
        let x = images(2, 32);
        let a = donor.score(&mut Ctx::inference(), &x);
        // Heads differ (head is not part of the trunk archive): compare the
        // trunk parameters directly instead of scores.
        let mut donor_trunk = Vec::new();
        donor.visit_params(&mut |p| donor_trunk.push((p.name.clone(), p.value.clone())));
        let mut loaded_trunk = Vec::new();
        loaded.visit_params(&mut |p| loaded_trunk.push((p.name.clone(), p.value.clone())));
        for ((n1, v1), (_n2, v2)) in donor_trunk.iter().zip(&loaded_trunk) {
            if n1.starts_with("dvgg.t") {
                assert_eq!(v1, v2, "trunk tensor {n1} differs after load");
            }
        }
        let _ = a;
    }

    #[test]
    fn input_gradient_of_linear_probe_is_ones() {
        // For D(x) = sum(x), the input gradient is all ones and its norm is
        // sqrt(H*W*C) exactly.
        struct SumProbe;
        impl ScoreModel<f64> for SumProbe {
            fn score(&self, _ctx: &mut Ctx<f64>, images: &Var<f64>) -> Var<f64> {
                let n = images.shape()[0];
                ops::reshape(&ops::sum_axes(images, &[1, 2, 3]), &[n])
            }
        }
        let x = Var::leaf(ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 0.5f64));
        let scores = SumProbe.score(&mut Ctx::inference(), &x);
        let total = ops::sum_all(&scores);
        let g = total.backward().wrt(&x).unwrap().clone();
        assert!(g.value().iter().all(|&v| v == 1.0));
        let norm = g.value().iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect = (2.0 * 3.0 * 16.0f64).sqrt(); // all-ones over both samples
        assert!((norm - expect).abs() < 1e-10);
    }

    #[test]
    fn critic_input_gradient_finite() {
        let spec = CriticSpec {
            layers: 2,
            ..CriticSpec::patch()
        };
        let c = build_critic::<f64>(&spec, 16, 3).unwrap();
        let x = Var::leaf(ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |ix| {
            (ix[2] * 16 + ix[3]) as f64 / 256.0
        }));
        let s = critic_forward(&c, &mut Ctx::inference(), &x).unwrap();
        let g = ops::sum_all(&s).backward().wrt(&x).unwrap().clone();
        assert!(g.all_finite());
        assert!(g.value().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bounded_head_stays_in_unit_interval() {
        let spec = CriticSpec {
            bounded_output: true,
            layers: 2,
            ..CriticSpec::patch()
        };
        let c = build_critic::<f32>(&spec, 32, 5).unwrap();
        let s = c.score(&mut Ctx::inference(), &images(4, 32));
        for &v in s.value().iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn patch_locality() {
        // Zeroing pixels outside a patch's receptive field leaves its score
        // unchanged (shallow pyramid keeps fields small).
        let spec = CriticSpec {
            layers: 2,
            norm: false,
            ..CriticSpec::patch()
        };
        let c = build_critic::<f32>(&spec, 64, 6).unwrap();
        let base = images(1, 64);
        let map1 = c.as_patch().unwrap().score_map(&mut Ctx::inference(), &base);
        // Receptive field of map cell (0,0): levels are k4s2, k4s2, k4s1,
        // k4s1 -> field size 4+(4-1)*2+(3+3)*4 = 34 starting near the origin.
        let mut zeroed = base.value().clone();
        for i in 0..64 {
            for j in 0..64 {
                if i >= 40 && j >= 40 {
                    for ch in 0..3 {
                        zeroed[[0, ch, i, j]] = 0.0;
                    }
                }
            }
        }
        let map2 = c
            .as_patch()
            .unwrap()
            .score_map(&mut Ctx::inference(), &Var::constant(zeroed));
        let d1 = map1.value()[[0, 0, 0, 0]];
        let d2 = map2.value()[[0, 0, 0, 0]];
        assert_eq!(d1, d2, "far-away pixels leaked into a local patch score");
        // And the overall score does change.
        assert_ne!(map1.value(), map2.value());
    }
}
