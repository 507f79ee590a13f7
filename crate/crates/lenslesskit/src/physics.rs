//! The lensless image-formation model `y = k * x + noise` and its fast FFT
//! implementation.
//!
//! The FFT product form is a circular convolution, so circular boundaries are
//! the default policy; a linear zero-padded variant exists for fidelity
//! experiments. Kernels are treated as centered: convolving with a centered
//! delta is the identity. A brute-force spatial-domain path serves as the
//! oracle for the FFT path and as the slow side of the runtime benchmark.

use std::rc::Rc;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::spectral::{circular_conv, KernelSpectra};
use crate::autodiff::{ops, Var};
use crate::error::{Error, Result};
use crate::fft::{embed_kernel, kernel_center, Plans2d};
use crate::image::ImageTensor;
use crate::psf::Psf;
use crate::scalar::Scalar;

/// Boundary handling for the convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Wrap-around, exactly the FFT product formula.
    #[default]
    Circular,
    /// Zero-padded linear convolution.
    LinearZeroPadded,
}

/// Which region of the convolution to return.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputCrop {
    /// Same size as the input, centered on it.
    #[default]
    SameCenter,
    /// Everything: `H + H_k - 1` per axis (linear boundary only).
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConvPolicy {
    pub boundary: Boundary,
    pub output_crop: OutputCrop,
}

impl ConvPolicy {
    pub fn circular() -> Self {
        ConvPolicy::default()
    }

    pub fn linear_same() -> Self {
        ConvPolicy {
            boundary: Boundary::LinearZeroPadded,
            output_crop: OutputCrop::SameCenter,
        }
    }

    pub fn linear_full() -> Self {
        ConvPolicy {
            boundary: Boundary::LinearZeroPadded,
            output_crop: OutputCrop::Full,
        }
    }
}

/// Additive Gaussian sensor noise, reproducible per seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be nonnegative, got {sigma}"
            )));
        }
        Ok(NoiseSpec { sigma, seed })
    }

    pub fn none() -> Self {
        NoiseSpec { sigma: 0.0, seed: 0 }
    }
}

fn require_normalized(k: &Psf) -> Result<()> {
    if !k.is_normalized() {
        return Err(Error::InvalidArgument(
            "kernel must be normalized (call Psf::normalize first)".into(),
        ));
    }
    Ok(())
}

fn output_dims(h: usize, w: usize, kh: usize, kw: usize, policy: ConvPolicy) -> Result<(usize, usize)> {
    match (policy.boundary, policy.output_crop) {
        (_, OutputCrop::SameCenter) => Ok((h, w)),
        (Boundary::LinearZeroPadded, OutputCrop::Full) => Ok((h + kh - 1, w + kw - 1)),
        (Boundary::Circular, OutputCrop::Full) => Err(Error::InvalidArgument(
            "full output is only defined for the linear boundary".into(),
        )),
    }
}

/// FFT convolution of each channel with the same kernel.
pub fn fft_convolve<T: Scalar>(
    x: &ArrayD<T>,
    k: &Psf,
    policy: ConvPolicy,
) -> Result<ArrayD<T>> {
    require_normalized(k)?;
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected CHW input, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (kh, kw) = (k.height(), k.width());
    let kernel: Vec<T> = k.data().iter().map(|&v| T::cast(v as f64)).collect();

    let (ph, pw) = match policy.boundary {
        Boundary::Circular => (h, w),
        Boundary::LinearZeroPadded => (h + kh - 1, w + kw - 1),
    };
    let plans = Plans2d::<T>::new(ph, pw);
    let canvas = embed_kernel(&kernel, kh, kw, ph, pw);
    let spectrum = plans.fft2_real(&canvas);

    let (oh, ow) = output_dims(h, w, kh, kw, policy)?;
    let x_std = x.as_standard_layout();
    let x_buf = x_std.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(ci, ob)| {
            // Embed the channel at the padded size.
            let mut plane = vec![T::zero(); ph * pw];
            let src = &x_buf[ci * h * w..][..h * w];
            for r in 0..h {
                plane[r * pw..r * pw + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            let mut freq = plans.fft2_real(&plane);
            crate::fft::spectrum_multiply(&mut freq, &spectrum, false);
            let res = plans.ifft2_real(freq);
            match policy.output_crop {
                OutputCrop::SameCenter => {
                    for r in 0..h {
                        ob[r * w..(r + 1) * w].copy_from_slice(&res[r * pw..r * pw + w]);
                    }
                }
                OutputCrop::Full => {
                    let (ch_c, cw_c) = (kernel_center(kh), kernel_center(kw));
                    for r in 0..oh {
                        let sr = (r + ph - (ch_c % ph)) % ph;
                        for cidx in 0..ow {
                            let sc = (cidx + pw - (cw_c % pw)) % pw;
                            ob[r * ow + cidx] = res[sr * pw + sc];
                        }
                    }
                }
            }
        });
    Ok(ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).expect("fft conv shape"))
}

/// Brute-force spatial-domain convolution under the same alignment and
/// policy; quadratic cost, meant for verification and benchmarking.
pub fn direct_convolve<T: Scalar>(
    x: &ArrayD<T>,
    k: &Psf,
    policy: ConvPolicy,
) -> Result<ArrayD<T>> {
    require_normalized(k)?;
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected CHW input, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (kh, kw) = (k.height(), k.width());
    let (ch_c, cw_c) = (kernel_center(kh), kernel_center(kw));
    let kernel: Vec<T> = k.data().iter().map(|&v| T::cast(v as f64)).collect();
    let (oh, ow) = output_dims(h, w, kh, kw, policy)?;
    let x_std = x.as_standard_layout();
    let x_buf = x_std.as_slice().expect("standard layout");

    let mut out = vec![T::zero(); c * oh * ow];
    let circular_same =
        policy.boundary == Boundary::Circular && policy.output_crop == OutputCrop::SameCenter;
    out.par_chunks_mut(ow).enumerate().for_each(|(row_idx, ob)| {
        let ci = row_idx / oh;
        let r = row_idx % oh;
        let src = &x_buf[ci * h * w..][..h * w];
        if circular_same {
            // out[oc] = sum_{ki,kj} k[ki,kj] * src[(r-(ki-ch)) mod h, (oc-(kj-cw)) mod w].
            // For fixed (ki,kj) the column access is a cyclic shift, so the
            // row splits into two contiguous axpy segments.
            for ki in 0..kh {
                let ir = (r as isize - (ki as isize - ch_c as isize)).rem_euclid(h as isize)
                    as usize;
                let src_row = &src[ir * w..(ir + 1) * w];
                let k_row = &kernel[ki * kw..(ki + 1) * kw];
                for (kj, &kv) in k_row.iter().enumerate() {
                    if kv == T::zero() {
                        continue;
                    }
                    // src index = (oc + off) mod w.
                    let off = (cw_c as isize - kj as isize).rem_euclid(w as isize) as usize;
                    let head = w - off;
                    for (o, &s) in ob[..head].iter_mut().zip(&src_row[off..]) {
                        *o += kv * s;
                    }
                    for (o, &s) in ob[head..].iter_mut().zip(&src_row[..off]) {
                        *o += kv * s;
                    }
                }
            }
            return;
        }
        // General path: zero-padded boundaries and/or full output.
        let (roff, coff) = match policy.output_crop {
            OutputCrop::SameCenter => (0isize, 0isize),
            OutputCrop::Full => (-(ch_c as isize), -(cw_c as isize)),
        };
        for oc in 0..ow {
            let mut acc = T::zero();
            for ki in 0..kh {
                let ir = r as isize + roff - (ki as isize - ch_c as isize);
                let ir = match policy.boundary {
                    Boundary::Circular => Some(ir.rem_euclid(h as isize) as usize),
                    Boundary::LinearZeroPadded => {
                        if ir >= 0 && ir < h as isize {
                            Some(ir as usize)
                        } else {
                            None
                        }
                    }
                };
                let Some(ir) = ir else { continue };
                let src_row = &src[ir * w..(ir + 1) * w];
                let k_row = &kernel[ki * kw..(ki + 1) * kw];
                for (kj, &kv) in k_row.iter().enumerate() {
                    let icix = oc as isize + coff - (kj as isize - cw_c as isize);
                    let iv = match policy.boundary {
                        Boundary::Circular => src_row[icix.rem_euclid(w as isize) as usize],
                        Boundary::LinearZeroPadded => {
                            if icix >= 0 && icix < w as isize {
                                src_row[icix as usize]
                            } else {
                                continue;
                            }
                        }
                    };
                    acc += kv * iv;
                }
            }
            ob[oc] = acc;
        }
    });
    Ok(ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).expect("direct conv shape"))
}

/// Gaussian noise field, deterministic per spec.
pub fn noise_field<T: Scalar>(shape: &[usize], noise: &NoiseSpec) -> ArrayD<T> {
    if noise.sigma == 0.0 {
        return ArrayD::zeros(IxDyn(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let sigma = T::cast(noise.sigma);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::standard_normal(&mut rng) * sigma)
}

/// Full forward model on one CHW tensor: FFT convolution plus additive
/// Gaussian noise. No clipping (training keeps gradients clean); clip on
/// export instead.
pub fn apply_forward<T: Scalar>(
    x: &ArrayD<T>,
    k: &Psf,
    noise: &NoiseSpec,
    policy: ConvPolicy,
) -> Result<ArrayD<T>> {
    let mut y = fft_convolve(x, k, policy)?;
    if noise.sigma > 0.0 {
        y += &noise_field::<T>(y.shape(), noise);
    }
    Ok(y)
}

/// Convenience wrapper over [`apply_forward`] for image values.
pub fn forward_image(
    x: &ImageTensor,
    k: &Psf,
    noise: &NoiseSpec,
    policy: ConvPolicy,
) -> Result<ImageTensor> {
    let chw = x.to_chw::<f32>();
    let y = apply_forward(&chw, k, noise, policy)?;
    let s = y.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let data = Array3::from_shape_fn((h, w, c), |(i, j, kx)| y[[kx, i, j]]);
    Ok(ImageTensor::from_valid(data))
}

/// Fit a kernel to an `h x w` working canvas: kernels that already fit are
/// kept at their native support (embedding preserves the physical blur
/// extent); larger ones are area-downsampled. Returns a normalized kernel.
pub fn fit_kernel(k: &Psf, h: usize, w: usize) -> Result<Psf> {
    if k.height() <= h && k.width() <= w {
        k.normalize()
    } else {
        k.resize_area(k.height().min(h), k.width().min(w)).normalize()
    }
}

/// Per-sample kernel spectra for the in-graph circular forward model. Kernels
/// pass through [`fit_kernel`] and are embedded centered on the canvas.
pub fn batch_spectra<T: Scalar>(
    psfs: &[Psf],
    height: usize,
    width: usize,
) -> Result<Rc<KernelSpectra<T>>> {
    let mut canvases = Vec::with_capacity(psfs.len());
    for k in psfs {
        let fitted = fit_kernel(k, height, width)?;
        let kernel: Vec<T> = fitted
            .data()
            .iter()
            .map(|&v| T::cast(v as f64))
            .collect();
        canvases.push(embed_kernel(
            &kernel,
            fitted.height(),
            fitted.width(),
            height,
            width,
        ));
    }
    Ok(Rc::new(KernelSpectra::from_canvases(canvases, height, width)))
}

/// Differentiable forward model over a `[N, C, H, W]` batch: circular FFT
/// convolution with each sample's kernel plus a constant noise field.
/// Gradients flow through the convolution into `x`.
pub fn forward_op<T: Scalar>(
    x: &Var<T>,
    kernels: &Rc<KernelSpectra<T>>,
    noise: Option<&ArrayD<T>>,
) -> Var<T> {
    let y = circular_conv(x, kernels);
    match noise {
        Some(n) => ops::add(&y, &Var::constant(n.clone())),
        None => y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn delta_psf(n: usize) -> Psf {
        let mut d = Array2::<f32>::zeros((n, n));
        d[[kernel_center(n), kernel_center(n)]] = 1.0;
        Psf::new(d).unwrap().normalize().unwrap()
    }

    fn rand_chw(c: usize, h: usize, w: usize, rng: &mut StdRng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.random_range(0.0..1.0))
    }

    fn rand_psf(h: usize, w: usize, rng: &mut StdRng) -> Psf {
        let data = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0f32));
        Psf::new(data).unwrap().normalize().unwrap()
    }

    #[test]
    fn centered_delta_is_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        for n in [3usize, 4, 5] {
            let x = rand_chw(3, 8, 8, &mut rng);
            let y = fft_convolve(&x, &delta_psf(n), ConvPolicy::circular()).unwrap();
            for (a, b) in x.iter().zip(y.iter()) {
                assert!((a - b).abs() < 1e-10, "delta {n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_image_is_preserved() {
        let x = ArrayD::from_elem(IxDyn(&[1, 6, 6]), 0.37f64);
        let mut rng = StdRng::seed_from_u64(2);
        let k = rand_psf(3, 3, &mut rng);
        let y = fft_convolve(&x, &k, ConvPolicy::circular()).unwrap();
        // The kernel is normalized in f32, so DC gain is 1 +- f32 epsilon.
        for &v in y.iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_direct_oracle_circular_and_linear() {
        let mut rng = StdRng::seed_from_u64(3);
        for policy in [
            ConvPolicy::circular(),
            ConvPolicy::linear_same(),
            ConvPolicy::linear_full(),
        ] {
            for _ in 0..20 {
                let (h, w) = (rng.random_range(3..12), rng.random_range(3..12));
                let (kh, kw) = (rng.random_range(1..=h), rng.random_range(1..=w));
                let x = rand_chw(1, h, w, &mut rng);
                let k = rand_psf(kh, kw, &mut rng);
                let a = fft_convolve(&x, &k, policy).unwrap();
                let b = direct_convolve(&x, &k, policy).unwrap();
                assert_eq!(a.shape(), b.shape());
                for (u, v) in a.iter().zip(b.iter()) {
                    assert!(
                        (u - v).abs() < 1e-9,
                        "{policy:?} {h}x{w} k {kh}x{kw}: {u} vs {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn hand_computed_1x4_case() {
        // [1,0,0,0] conv [0.5,0.5] circular: taps at offsets 0 and +1 from
        // the left-of-center convention, so out = [0.5, 0.5, 0, 0].
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 4]), vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let k = Psf::new(Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap())
            .unwrap()
            .normalize()
            .unwrap();
        let y = direct_convolve(&x, &k, ConvPolicy::circular()).unwrap();
        let got: Vec<f64> = y.iter().cloned().collect();
        assert_eq!(got, vec![0.5, 0.5, 0.0, 0.0]);
        let yf = fft_convolve(&x, &k, ConvPolicy::circular()).unwrap();
        for (a, b) in y.iter().zip(yf.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_by_one_kernel() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1]), vec![0.42f64]).unwrap();
        let k = Psf::new(Array2::from_elem((1, 1), 1.0)).unwrap().normalize().unwrap();
        let y = direct_convolve(&x, &k, ConvPolicy::circular()).unwrap();
        assert!((y[[0, 0, 0]] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn linearity() {
        let mut rng = StdRng::seed_from_u64(4);
        let k = rand_psf(5, 5, &mut rng);
        let x1 = rand_chw(1, 10, 10, &mut rng);
        let x2 = rand_chw(1, 10, 10, &mut rng);
        let (a, b) = (1.7f64, -0.6f64);
        let lhs = fft_convolve(
            &(&x1 * a + &x2 * b),
            &k,
            ConvPolicy::circular(),
        )
        .unwrap();
        let rhs = fft_convolve(&x1, &k, ConvPolicy::circular()).unwrap() * a
            + fft_convolve(&x2, &k, ConvPolicy::circular()).unwrap() * b;
        for (u, v) in lhs.iter().zip(rhs.iter()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn circular_preserves_energy() {
        let mut rng = StdRng::seed_from_u64(5);
        let k = rand_psf(7, 7, &mut rng);
        let x = rand_chw(3, 12, 12, &mut rng);
        let y = fft_convolve(&x, &k, ConvPolicy::circular()).unwrap();
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        assert!((sx - sy).abs() < 1e-4, "{sx} vs {sy}");
    }

    #[test]
    fn zero_noise_matches_convolution_and_seeds_reproduce() {
        let mut rng = StdRng::seed_from_u64(6);
        let k = rand_psf(5, 5, &mut rng);
        let x = rand_chw(3, 8, 8, &mut rng);
        let y0 = apply_forward(&x, &k, &NoiseSpec::none(), ConvPolicy::circular()).unwrap();
        let yc = fft_convolve(&x, &k, ConvPolicy::circular()).unwrap();
        assert_eq!(y0, yc);
        let n = NoiseSpec::new(0.01, 1234).unwrap();
        let y1 = apply_forward(&x, &k, &n, ConvPolicy::circular()).unwrap();
        let y2 = apply_forward(&x, &k, &n, ConvPolicy::circular()).unwrap();
        assert_eq!(y1, y2);
        assert_ne!(y1, y0);
    }

    #[test]
    fn noise_magnitude_matches_half_normal_mean() {
        // mean |N(0, sigma)| = sigma * sqrt(2/pi), checked within 5%.
        let mut rng = StdRng::seed_from_u64(7);
        let k = rand_psf(5, 5, &mut rng);
        let x = rand_chw(3, 128, 128, &mut rng);
        let sigma = 0.05;
        let n = NoiseSpec::new(sigma, 77).unwrap();
        let clean = fft_convolve(&x, &k, ConvPolicy::circular()).unwrap();
        let noisy = apply_forward(&x, &k, &n, ConvPolicy::circular()).unwrap();
        let mad: f64 = (&noisy - &clean).iter().map(|v| v.abs()).sum::<f64>()
            / clean.len() as f64;
        let expect = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mad - expect).abs() / expect < 0.05,
            "observed {mad}, expected {expect}"
        );
    }

    #[test]
    fn in_graph_forward_matches_array_forward() {
        let mut rng = StdRng::seed_from_u64(8);
        let k = rand_psf(16, 16, &mut rng);
        let x = rand_chw(3, 16, 16, &mut rng);
        let want = fft_convolve(&x, &k, ConvPolicy::circular()).unwrap();

        let batched = x
            .clone()
            .into_shape_with_order(IxDyn(&[1, 3, 16, 16]))
            .unwrap();
        let spectra = batch_spectra::<f64>(std::slice::from_ref(&k), 16, 16).unwrap();
        let y = forward_op(&Var::leaf(batched), &spectra, None);
        for (a, b) in want.iter().zip(y.value().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
