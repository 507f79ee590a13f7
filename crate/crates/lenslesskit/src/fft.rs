//! 2-d FFT helpers shared by the forward model and its in-graph op.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::scalar::Scalar;

/// Cached row/column transforms for one plane size.
pub struct Plans2d<T: Scalar> {
    pub height: usize,
    pub width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Plans2d<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Plans2d {
            height,
            width,
            row_fwd: planner.plan_fft(width, FftDirection::Forward),
            row_inv: planner.plan_fft(width, FftDirection::Inverse),
            col_fwd: planner.plan_fft(height, FftDirection::Forward),
            col_inv: planner.plan_fft(height, FftDirection::Inverse),
        }
    }

    fn pass(&self, data: &mut [Complex<T>], forward: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        for r in data.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); h * w];
        transpose(data, &mut scratch, h, w);
        for c in scratch.chunks_exact_mut(h) {
            col.process(c);
        }
        transpose(&scratch, data, w, h);
    }

    /// Unnormalized forward transform of a real plane.
    pub fn fft2_real(&self, input: &[T]) -> Vec<Complex<T>> {
        debug_assert_eq!(input.len(), self.height * self.width);
        let mut data: Vec<Complex<T>> =
            input.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.pass(&mut data, true);
        data
    }

    /// Inverse transform with 1/(H*W) normalization; returns the real part.
    pub fn ifft2_real(&self, mut freq: Vec<Complex<T>>) -> Vec<T> {
        self.pass(&mut freq, false);
        let scale = T::one() / T::from_usize(self.height * self.width).expect("plane size");
        freq.into_iter().map(|c| c.re * scale).collect()
    }
}

fn transpose<T: Copy>(src: &[Complex<T>], dst: &mut [Complex<T>], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Kernel tap alignment: the tap at `(i, j)` sits at spatial offset
/// `(i - center_h, j - center_w)`. The center is `(len - 1) / 2`, i.e. the
/// upper-left of the middle 2x2 for even sizes, so a centered delta kernel is
/// the identity.
pub fn kernel_center(len: usize) -> usize {
    (len - 1) / 2
}

/// Embed kernel taps on a (possibly larger) canvas at their offsets from the
/// kernel center, wrapped circularly. The FFT of this canvas is the transfer
/// function of the aligned circular convolution.
pub fn embed_kernel<T: Scalar>(
    kernel: &[T],
    kh: usize,
    kw: usize,
    canvas_h: usize,
    canvas_w: usize,
) -> Vec<T> {
    let (ch, cw) = (kernel_center(kh), kernel_center(kw));
    let mut canvas = vec![T::zero(); canvas_h * canvas_w];
    for i in 0..kh {
        for j in 0..kw {
            let r = (i + canvas_h - (ch % canvas_h)) % canvas_h;
            let c = (j + canvas_w - (cw % canvas_w)) % canvas_w;
            canvas[r * canvas_w + c] += kernel[i * kw + j];
        }
    }
    canvas
}

/// Pointwise product in the frequency domain, optionally conjugating the
/// kernel spectrum (the adjoint/correlation direction).
pub fn spectrum_multiply<T: Scalar>(
    freq: &mut [Complex<T>],
    spectrum: &[Complex<T>],
    conjugate: bool,
) {
    debug_assert_eq!(freq.len(), spectrum.len());
    if conjugate {
        for (f, s) in freq.iter_mut().zip(spectrum) {
            *f *= s.conj();
        }
    } else {
        for (f, s) in freq.iter_mut().zip(spectrum) {
            *f *= *s;
        }
    }
}
