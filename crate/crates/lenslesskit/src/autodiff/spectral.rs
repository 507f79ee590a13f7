//! Differentiable circular convolution against fixed per-sample kernels.
//!
//! The kernel spectra are constants (the blur kernels are data, not
//! parameters), so the op is linear in its input: backward is correlation
//! (conjugate spectrum), and backward of backward is the forward again.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex;
use rayon::prelude::*;

use super::Var;
use crate::fft::{spectrum_multiply, Plans2d};
use crate::scalar::Scalar;

/// Precomputed transfer functions for one batch of kernels.
pub struct KernelSpectra<T: Scalar> {
    pub height: usize,
    pub width: usize,
    /// One spectrum per batch sample, each `height * width` long.
    pub spectra: Vec<Vec<Complex<T>>>,
    pub plans: Plans2d<T>,
}

impl<T: Scalar> KernelSpectra<T> {
    /// Build from centered kernel canvases (see [`crate::fft::embed_kernel`]).
    pub fn from_canvases(canvases: Vec<Vec<T>>, height: usize, width: usize) -> Self {
        let plans = Plans2d::new(height, width);
        let spectra = canvases
            .into_iter()
            .map(|c| {
                debug_assert_eq!(c.len(), height * width);
                plans.fft2_real(&c)
            })
            .collect();
        KernelSpectra {
            height,
            width,
            spectra,
            plans,
        }
    }
}

fn apply<T: Scalar>(x: &ArrayD<T>, k: &KernelSpectra<T>, conjugate: bool) -> ArrayD<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(
        (h, w),
        (k.height, k.width),
        "kernel spectra sized {}x{} applied to {h}x{w} input",
        k.height,
        k.width
    );
    assert_eq!(
        n,
        k.spectra.len(),
        "batch size {n} != kernel count {}",
        k.spectra.len()
    );
    let x_std = x.as_standard_layout();
    let x_buf = x_std.as_slice().expect("spectral conv input layout");
    let mut out = vec![T::zero(); n * c * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(plane, ob)| {
        let sample = plane / c;
        let ib = &x_buf[plane * h * w..][..h * w];
        let mut freq = k.plans.fft2_real(ib);
        spectrum_multiply(&mut freq, &k.spectra[sample], conjugate);
        let real = k.plans.ifft2_real(freq);
        ob.copy_from_slice(&real);
    });
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).expect("spectral conv shape")
}

/// Circular convolution of each sample with its own kernel, identical across
/// channels.
pub fn circular_conv<T: Scalar>(x: &Var<T>, kernels: &Rc<KernelSpectra<T>>) -> Var<T> {
    let value = apply(x.value(), kernels, false);
    let k = Rc::clone(kernels);
    Var::from_op(value, vec![x.clone()], Box::new(move |g| {
        vec![Some(circular_corr(g, &k))]
    }))
}

/// Circular correlation (the adjoint of [`circular_conv`]).
pub fn circular_corr<T: Scalar>(x: &Var<T>, kernels: &Rc<KernelSpectra<T>>) -> Var<T> {
    let value = apply(x.value(), kernels, true);
    let k = Rc::clone(kernels);
    Var::from_op(value, vec![x.clone()], Box::new(move |g| {
        vec![Some(circular_conv(g, &k))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::{mul, sum_all};
    use crate::fft::embed_kernel;
    use ndarray::{ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn conv_and_corr_are_adjoint() {
        let mut rng = StdRng::seed_from_u64(5);
        let (h, w) = (8, 6);
        let mut kernel = vec![0.0f64; 9];
        for v in kernel.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let canvases: Vec<Vec<f64>> = (0..2)
            .map(|_| embed_kernel(&kernel, 3, 3, h, w))
            .collect();
        let spectra = Rc::new(KernelSpectra::from_canvases(canvases, h, w));

        let x = Var::leaf(ArrayD::from_shape_fn(IxDyn(&[2, 3, h, w]), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let y = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, h, w]), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let lhs = sum_all(&mul(&circular_conv(&x, &spectra), &y)).scalar();
        let rhs = sum_all(&mul(&x, &circular_corr(&y, &spectra))).scalar();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn gradient_is_correlation() {
        let mut rng = StdRng::seed_from_u64(6);
        let (h, w) = (5, 5);
        let kernel: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let spectra = Rc::new(KernelSpectra::from_canvases(
            vec![embed_kernel(&kernel, 3, 3, h, w)],
            h,
            w,
        ));
        let x = Var::leaf(ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let weight = ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |_| rng.random_range(-1.0..1.0));
        let loss = sum_all(&mul(&circular_conv(&x, &spectra), &Var::constant(weight.clone())));
        let g = loss.backward().wrt(&x).unwrap().clone();
        let want = apply(&weight, &spectra, true);
        for (a, b) in g.value().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
