//! Convolution and resampling ops.
//!
//! `im2col`/`col2im` and the two bilinear resampling kernels form adjoint
//! pairs, so each one's backward is simply the other — which keeps the whole
//! convolution stack twice-differentiable for free.

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

use super::{ops, Var};
use crate::scalar::Scalar;

pub(crate) fn dims4<T: Scalar>(v: &Var<T>) -> (usize, usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn im2col_kernel<T: Scalar>(
    x: &ArrayD<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (n, c, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let ho = conv_output_len(h, kh, stride, pad);
    let wo = conv_output_len(w, kw, stride, pad);
    let ncol = n * ho * wo;
    let x_std = x.as_standard_layout();
    let x_buf = x_std.as_slice().expect("im2col input layout");
    let mut cols = vec![T::zero(); c * kh * kw * ncol];

    // Rows for one input channel form a contiguous block: safe to parallelize.
    cols.par_chunks_mut(kh * kw * ncol)
        .enumerate()
        .for_each(|(ci, block)| {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ki * kw + kj;
                    let row_buf = &mut block[row * ncol..(row + 1) * ncol];
                    for ni in 0..n {
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &x_buf[((ni * c + ci) * h + ih as usize) * w..][..w];
                            let dst = &mut row_buf[(ni * ho + oh) * wo..][..wo];
                            if stride == 1 {
                                let off = kj as isize - pad as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                                if lo < hi {
                                    let s0 = (lo as isize + off) as usize;
                                    dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                                }
                            } else {
                                for (ow, d) in dst.iter_mut().enumerate() {
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if iw >= 0 && iw < w as isize {
                                        *d = src[iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    ArrayD::from_shape_vec(IxDyn(&[c * kh * kw, ncol]), cols).expect("im2col shape")
}

#[allow(clippy::too_many_arguments)]
fn col2im_kernel<T: Scalar>(
    cols: &ArrayD<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let ho = conv_output_len(h, kh, stride, pad);
    let wo = conv_output_len(w, kw, stride, pad);
    let ncol = n * ho * wo;
    let cols_std = cols.as_standard_layout();
    let cols_buf = cols_std.as_slice().expect("col2im input layout");
    let mut x = vec![T::zero(); n * c * h * w];

    // One batch element per task: every write lands in that element's block.
    x.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, xb)| {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let row_buf = &cols_buf[row * ncol..(row + 1) * ncol];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut xb[(ci * h + ih as usize) * w..][..w];
                        let src = &row_buf[(ni * ho + oh) * wo..][..wo];
                        for (ow, s) in src.iter().enumerate() {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    });

    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), x).expect("col2im shape")
}

/// Patch-extraction op `[N,C,H,W] -> [C*kh*kw, N*Ho*Wo]`.
pub fn im2col<T: Scalar>(x: &Var<T>, kh: usize, kw: usize, stride: usize, pad: usize) -> Var<T> {
    let (n, c, h, w) = dims4(x);
    let value = im2col_kernel(x.value(), kh, kw, stride, pad);
    Var::from_op(value, vec![x.clone()], Box::new(move |g| {
        vec![Some(col2im(g, n, c, h, w, kh, kw, stride, pad))]
    }))
}

/// Adjoint of [`im2col`]: scatter-add patches back onto the image grid.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &Var<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Var<T> {
    let value = col2im_kernel(cols.value(), n, c, h, w, kh, kw, stride, pad);
    Var::from_op(value, vec![cols.clone()], Box::new(move |g| {
        vec![Some(im2col(g, kh, kw, stride, pad))]
    }))
}

/// 2-d convolution with per-output-channel bias.
///
/// Built from im2col + matmul + reshape so gradients (of any order) come from
/// the primitives.
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Var<T> {
    let (n, cin, h, w) = dims4(x);
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,kh,kw]");
    let (cout, cin_w, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, cin_w, "conv2d: input channels {cin} != weight channels {cin_w}");
    let ho = conv_output_len(h, kh, stride, pad);
    let wo = conv_output_len(w, kw, stride, pad);

    let cols = im2col(x, kh, kw, stride, pad);
    let w2 = ops::reshape(weight, &[cout, cin * kh * kw]);
    let out2 = ops::matmul(&w2, &cols);
    let out4 = ops::reshape(&out2, &[cout, n, ho, wo]);
    let mut out = ops::permute(&out4, &[1, 0, 2, 3]);
    if let Some(b) = bias {
        out = ops::add(&out, &ops::broadcast_channel(b, &[n, cout, ho, wo]));
    }
    out
}

fn up2_kernel<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let (n, c, h, w) = { let s = x.shape(); (s[0], s[1], s[2], s[3]) };
    let (oh, ow) = (h * 2, w * 2);
    let x_std = x.as_standard_layout();
    let x_buf = x_std.as_slice().expect("up2 input layout");
    let mut out = vec![T::zero(); n * c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, ob)| {
        let ib = &x_buf[plane * h * w..][..h * w];
        for o_i in 0..oh {
            let src_i = (o_i as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src_i.floor();
            let fi = src_i - i0;
            let i_lo = (i0.max(0.0) as usize).min(h - 1);
            let i_hi = ((i0 + 1.0).max(0.0) as usize).min(h - 1);
            for o_j in 0..ow {
                let src_j = (o_j as f64 + 0.5) / 2.0 - 0.5;
                let j0 = src_j.floor();
                let fj = src_j - j0;
                let j_lo = (j0.max(0.0) as usize).min(w - 1);
                let j_hi = ((j0 + 1.0).max(0.0) as usize).min(w - 1);
                let (wfi, wfj) = (T::cast(fi), T::cast(fj));
                let one = T::one();
                let v = ib[i_lo * w + j_lo] * (one - wfi) * (one - wfj)
                    + ib[i_lo * w + j_hi] * (one - wfi) * wfj
                    + ib[i_hi * w + j_lo] * wfi * (one - wfj)
                    + ib[i_hi * w + j_hi] * wfi * wfj;
                ob[o_i * ow + o_j] = v;
            }
        }
    });
    ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).expect("up2 shape")
}

fn up2_adjoint_kernel<T: Scalar>(g: &ArrayD<T>) -> ArrayD<T> {
    let (n, c, oh, ow) = { let s = g.shape(); (s[0], s[1], s[2], s[3]) };
    let (h, w) = (oh / 2, ow / 2);
    let g_std = g.as_standard_layout();
    let g_buf = g_std.as_slice().expect("up2 adjoint input layout");
    let mut out = vec![T::zero(); n * c * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(plane, ob)| {
        let gb = &g_buf[plane * oh * ow..][..oh * ow];
        for o_i in 0..oh {
            let src_i = (o_i as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src_i.floor();
            let fi = src_i - i0;
            let i_lo = (i0.max(0.0) as usize).min(h - 1);
            let i_hi = ((i0 + 1.0).max(0.0) as usize).min(h - 1);
            for o_j in 0..ow {
                let src_j = (o_j as f64 + 0.5) / 2.0 - 0.5;
                let j0 = src_j.floor();
                let fj = src_j - j0;
                let j_lo = (j0.max(0.0) as usize).min(w - 1);
                let j_hi = ((j0 + 1.0).max(0.0) as usize).min(w - 1);
                let (wfi, wfj) = (T::cast(fi), T::cast(fj));
                let one = T::one();
                let gv = gb[o_i * ow + o_j];
                ob[i_lo * w + j_lo] += gv * (one - wfi) * (one - wfj);
                ob[i_lo * w + j_hi] += gv * (one - wfi) * wfj;
                ob[i_hi * w + j_lo] += gv * wfi * (one - wfj);
                ob[i_hi * w + j_hi] += gv * wfi * wfj;
            }
        }
    });
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).expect("up2 adjoint shape")
}

/// Bilinear 2x upsampling.
pub fn upsample2x<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = up2_kernel(x.value());
    Var::from_op(value, vec![x.clone()], Box::new(|g| vec![Some(upsample2x_adjoint(g))]))
}

/// Adjoint of [`upsample2x`] (energy-scattering downsample).
pub fn upsample2x_adjoint<T: Scalar>(g: &Var<T>) -> Var<T> {
    let value = up2_adjoint_kernel(g.value());
    Var::from_op(value, vec![g.clone()], Box::new(|gg| vec![Some(upsample2x(gg))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::{mean_all, sum_all};
    use ndarray::{ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_arr(shape: &[usize], rng: &mut StdRng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct convolution oracle for the zero-padded strided case.
    fn conv_oracle(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (n, cin, h, wd) = { let s = x.shape(); (s[0], s[1], s[2], s[3]) };
        let (cout, _, kh, kw) = { let s = w.shape(); (s[0], s[1], s[2], s[3]) };
        let ho = conv_output_len(h, kh, stride, pad);
        let wo = conv_output_len(wd, kw, stride, pad);
        let mut out = ArrayD::zeros(IxDyn(&[n, cout, ho, wo]));
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd
                                    {
                                        acc += x[[ni, ci, ih as usize, iw as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, oh, ow]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let x = Var::leaf(rand_arr(&[2, 3, 9, 8], &mut rng));
            let w = Var::leaf(rand_arr(&[4, 3, 3, 3], &mut rng));
            let got = conv2d(&x, &w, None, stride, pad);
            let want = conv_oracle(x.value(), w.value(), stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.value().iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10, "stride={stride} pad={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let x0 = rand_arr(&[1, 2, 6, 6], &mut rng);
        let w0 = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b0 = rand_arr(&[3], &mut rng);

        let loss_of = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let xv = Var::constant(x.clone());
            let wv = Var::constant(w.clone());
            let bv = Var::constant(b.clone());
            let out = conv2d(&xv, &wv, Some(&bv), 2, 1);
            mean_all(&ops::square(&out)).scalar()
        };

        let x = Var::leaf(x0.clone());
        let w = Var::leaf(w0.clone());
        let b = Var::leaf(b0.clone());
        let out = conv2d(&x, &w, Some(&b), 2, 1);
        let loss = mean_all(&ops::square(&out));
        let grads = loss.backward();

        let eps = 1e-6;
        for (var, base) in [(&x, &x0), (&w, &w0), (&b, &b0)] {
            let g = grads.wrt(var).unwrap().value().clone();
            for idx in 0..base.len().min(20) {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.as_slice_mut().unwrap()[idx] += eps;
                minus.as_slice_mut().unwrap()[idx] -= eps;
                let (fp, fm) = if std::ptr::eq(base, &x0) {
                    (loss_of(&plus, &w0, &b0), loss_of(&minus, &w0, &b0))
                } else if std::ptr::eq(base, &w0) {
                    (loss_of(&x0, &plus, &b0), loss_of(&x0, &minus, &b0))
                } else {
                    (loss_of(&x0, &w0, &plus), loss_of(&x0, &w0, &minus))
                };
                let fd = (fp - fm) / (2.0 * eps);
                let ad = g.as_slice().unwrap()[idx];
                assert!(
                    (fd - ad).abs() <= 1e-6 * fd.abs().max(ad.abs()).max(1.0),
                    "fd {fd} vs ad {ad}"
                );
            }
        }
    }

    #[test]
    fn upsample_adjoint_identity() {
        // <U x, y> == <x, U^T y> for random x, y.
        let mut rng = StdRng::seed_from_u64(3);
        let x = Var::leaf(rand_arr(&[2, 3, 5, 7], &mut rng));
        let y = Var::constant(rand_arr(&[2, 3, 10, 14], &mut rng));
        let ux = upsample2x(&x);
        let lhs = sum_all(&ops::mul(&ux, &y)).scalar();
        let uty = upsample2x_adjoint(&y);
        let rhs = sum_all(&ops::mul(&x, &uty)).scalar();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
