//! Layers used by the generators and critics.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::{Ctx, NetModule, Param};
use crate::autodiff::{conv, ops, Var};
use crate::scalar::Scalar;

/// Kaiming-style normal init for leaky-relu stacks.
pub fn he_normal<T: Scalar, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    neg_slope: f64,
) -> ArrayD<T> {
    let gain = (2.0 / (1.0 + neg_slope * neg_slope)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        T::cast(T::standard_normal(rng).as_f64() * std)
    })
}

pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        neg_slope: f64,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in, neg_slope),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let w = ctx.bind(&self.weight);
        let b = ctx.bind(&self.bias);
        conv::conv2d(x, &w, Some(&b), self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<T: Scalar> NetModule<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-sample, per-channel normalization with affine parameters.
pub struct InstanceNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Scalar> InstanceNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        InstanceNorm2d {
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            ),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let shape = x.shape().to_vec();
        let mean = ops::mean_axes(x, &[2, 3]);
        let centered = ops::sub(x, &ops::broadcast_to(&mean, &shape));
        let variance = ops::mean_axes(&ops::square(&centered), &[2, 3]);
        let inv_std = ops::recip(&ops::sqrt(&ops::add_scalar(&variance, T::cast(self.eps))));
        let normed = ops::mul(&centered, &ops::broadcast_to(&inv_std, &shape));
        let g = ops::broadcast_channel(&ctx.bind(&self.gamma), &shape);
        let b = ops::broadcast_channel(&ctx.bind(&self.beta), &shape);
        ops::add(&ops::mul(&normed, &g), &b)
    }
}

impl<T: Scalar> NetModule<T> for InstanceNorm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, name: &str, in_f: usize, out_f: usize) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(rng, &[out_f, in_f], in_f, 1.0),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_f]))),
        }
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let w = ctx.bind(&self.weight);
        let b = ctx.bind(&self.bias);
        let out = ops::matmul(x, &ops::transpose2(&w));
        let n = out.shape()[0];
        let o = out.shape()[1];
        let b2 = ops::reshape(&b, &[1, o]);
        ops::add(&out, &ops::broadcast_to(&b2, &[n, o]))
    }
}

impl<T: Scalar> NetModule<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// conv -> instance norm (optional) -> leaky relu, the standard block here.
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2d<T>,
    pub norm: Option<InstanceNorm2d<T>>,
    pub slope: f64,
}

impl<T: Scalar> ConvBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        normed: bool,
        slope: f64,
    ) -> Self {
        let pad = kernel / 2;
        ConvBlock {
            conv: Conv2d::new(rng, name, in_ch, out_ch, kernel, stride, pad, slope),
            norm: normed.then(|| InstanceNorm2d::new(&format!("{name}.norm"), out_ch)),
            slope,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut out = self.conv.forward(ctx, x);
        if let Some(norm) = &self.norm {
            out = norm.forward(ctx, &out);
        }
        ops::leaky_relu(&out, T::cast(self.slope))
    }
}

impl<T: Scalar> NetModule<T> for ConvBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit_params(f);
        if let Some(n) = &self.norm {
            n.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params_mut(f);
        if let Some(n) = &mut self.norm {
            n.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let mut rng = StdRng::seed_from_u64(0);
        let layer = InstanceNorm2d::<f64>::new("in", 2);
        let x = Var::constant(ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 4, 4]), || {
            rng.random_range(-3.0..3.0)
        }));
        let mut ctx = Ctx::inference();
        let y = layer.forward(&mut ctx, &x);
        for c in 0..2 {
            let plane: Vec<f64> = (0..16)
                .map(|i| y.value()[[0, c, i / 4, i % 4]])
                .collect();
            let mean: f64 = plane.iter().sum::<f64>() / 16.0;
            let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut layer = Linear::<f64>::new(&mut rng, "fc", 3, 2);
        layer.bias.value = ArrayD::from_shape_vec(IxDyn(&[2]), vec![10.0, 20.0]).unwrap();
        layer.weight.value = ArrayD::zeros(IxDyn(&[2, 3]));
        let x = Var::constant(ArrayD::from_elem(IxDyn(&[4, 3]), 1.0));
        let mut ctx = Ctx::inference();
        let y = layer.forward(&mut ctx, &x);
        assert_eq!(y.shape(), &[4, 2]);
        assert_eq!(y.value()[[0, 0]], 10.0);
        assert_eq!(y.value()[[3, 1]], 20.0);
    }

    #[test]
    fn ctx_binds_each_param_once() {
        let mut rng = StdRng::seed_from_u64(2);
        let layer = Conv2d::<f64>::new(&mut rng, "c", 1, 1, 3, 1, 1, 0.2);
        let mut ctx = Ctx::train();
        let a = ctx.bind(&layer.weight);
        let b = ctx.bind(&layer.weight);
        assert_eq!(a.id(), b.id());
    }
}
