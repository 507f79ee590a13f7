//! Differentiable primitive operations.
//!
//! Every backward closure is written in terms of other primitives, which is
//! what makes second derivatives available throughout the crate. Non-smooth
//! activations (abs, leaky-relu) treat their masks as constants, i.e. the
//! almost-everywhere derivative.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use super::Var;
use crate::scalar::Scalar;

pub fn zeros<T: Scalar>(shape: &[usize]) -> Var<T> {
    Var::constant(ArrayD::zeros(IxDyn(shape)))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Var<T> {
    Var::constant(ArrayD::from_elem(IxDyn(shape), T::one()))
}

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    same_shape(a, b, "add");
    let value = a.value() + b.value();
    Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g| {
        vec![Some(g.clone()), Some(g.clone())]
    }))
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    same_shape(a, b, "sub");
    let value = a.value() - b.value();
    Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g| {
        vec![Some(g.clone()), Some(neg(g))]
    }))
}

pub fn neg<T: Scalar>(a: &Var<T>) -> Var<T> {
    scale(a, -T::one())
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    same_shape(a, b, "mul");
    let value = a.value() * b.value();
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g| {
        vec![Some(mul(g, &bc)), Some(mul(g, &ac))]
    }))
}

pub fn scale<T: Scalar>(a: &Var<T>, c: T) -> Var<T> {
    let value = a.value().mapv(|v| v * c);
    Var::from_op(value, vec![a.clone()], Box::new(move |g| vec![Some(scale(g, c))]))
}

pub fn add_scalar<T: Scalar>(a: &Var<T>, c: T) -> Var<T> {
    let value = a.value().mapv(|v| v + c);
    Var::from_op(value, vec![a.clone()], Box::new(|g| vec![Some(g.clone())]))
}

pub fn recip<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.value().mapv(|v| T::one() / v);
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        let r = recip(&ac);
        vec![Some(neg(&mul(g, &mul(&r, &r))))]
    }))
}

pub fn sqrt<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.value().mapv(|v| v.sqrt());
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        let half = T::cast(0.5);
        vec![Some(scale(&mul(g, &recip(&sqrt(&ac))), half))]
    }))
}

pub fn square<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.value().mapv(|v| v * v);
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(scale(&mul(g, &ac), T::cast(2.0)))]
    }))
}

pub fn abs<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.value().mapv(|v| v.abs());
    let sign = Var::constant(a.value().mapv(|v| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }));
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(mul(g, &sign))]
    }))
}

pub fn leaky_relu<T: Scalar>(a: &Var<T>, slope: T) -> Var<T> {
    let value = a.value().mapv(|v| if v >= T::zero() { v } else { v * slope });
    let mask = Var::constant(
        a.value()
            .mapv(|v| if v >= T::zero() { T::one() } else { slope }),
    );
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(mul(g, &mask))]
    }))
}

pub fn sigmoid<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.value().mapv(|v| T::one() / (T::one() + (-v).exp()));
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        // Recomputed rather than captured: capturing the output would cycle.
        let s = sigmoid(&ac);
        let one_minus = add_scalar(&neg(&s), T::one());
        vec![Some(mul(g, &mul(&s, &one_minus)))]
    }))
}

/// Sum of all elements, producing a 0-d var.
pub fn sum_all<T: Scalar>(a: &Var<T>) -> Var<T> {
    let total: T = a.value().iter().copied().sum();
    let value = ArrayD::from_elem(IxDyn(&[]), total);
    let shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(broadcast_to(g, &shape))]
    }))
}

pub fn mean_all<T: Scalar>(a: &Var<T>) -> Var<T> {
    let n = T::from_usize(a.len()).expect("len fits scalar");
    scale(&sum_all(a), T::one() / n)
}

/// Broadcast a smaller (or 0-d) var to `shape`; adjoint of summation.
pub fn broadcast_to<T: Scalar>(a: &Var<T>, shape: &[usize]) -> Var<T> {
    let value = a
        .value()
        .broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned();
    let src_shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(sum_to_shape(g, &src_shape))]
    }))
}

/// Reduce `g` by summation until it matches `shape` (inverse of broadcast).
fn sum_to_shape<T: Scalar>(g: &Var<T>, shape: &[usize]) -> Var<T> {
    let extra = g.shape().len() - shape.len();
    let mut out = g.clone();
    // Sum away prepended axes.
    for _ in 0..extra {
        out = sum_axis_impl(&out, 0, false);
    }
    // Sum broadcast (size-1) axes back down, keeping dims.
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if want == 1 && have != 1 {
            out = sum_axis_impl(&out, ax, true);
        }
    }
    out
}

fn sum_axis_impl<T: Scalar>(a: &Var<T>, axis: usize, keepdim: bool) -> Var<T> {
    let mut value = a.value().sum_axis(Axis(axis));
    if keepdim {
        value = value.insert_axis(Axis(axis));
    }
    let src_shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        let gk = if keepdim {
            g.clone()
        } else {
            reshape_keep(g, axis)
        };
        vec![Some(broadcast_to(&gk, &src_shape))]
    }))
}

/// Re-insert a reduced axis as size 1 so broadcasting lines up.
fn reshape_keep<T: Scalar>(g: &Var<T>, axis: usize) -> Var<T> {
    let mut shape: Vec<usize> = g.shape().to_vec();
    shape.insert(axis, 1);
    reshape(g, &shape)
}

/// Sum over the given axes with kept dims (axes must be sorted ascending).
pub fn sum_axes<T: Scalar>(a: &Var<T>, axes: &[usize]) -> Var<T> {
    let mut out = a.clone();
    for &ax in axes {
        out = sum_axis_impl(&out, ax, true);
    }
    out
}

/// Mean over the given axes with kept dims.
pub fn mean_axes<T: Scalar>(a: &Var<T>, axes: &[usize]) -> Var<T> {
    let mut n = 1usize;
    for &ax in axes {
        n *= a.shape()[ax];
    }
    scale(&sum_axes(a, axes), T::one() / T::from_usize(n).expect("axis len"))
}

pub fn reshape<T: Scalar>(a: &Var<T>, shape: &[usize]) -> Var<T> {
    let value = a
        .value()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch");
    let src_shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(reshape(g, &src_shape))]
    }))
}

pub fn permute<T: Scalar>(a: &Var<T>, axes: &[usize]) -> Var<T> {
    let value = a
        .value()
        .view()
        .permuted_axes(IxDyn(axes))
        .as_standard_layout()
        .to_owned();
    let mut inverse = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(permute(g, &inverse))]
    }))
}

/// Dense matrix product over 2-d vars, column-chunked across threads.
pub fn matmul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let value = par_matmul(a.value(), b.value());
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g| {
        let ga = matmul(g, &transpose2(&bc));
        let gb = matmul(&transpose2(&ac), g);
        vec![Some(ga), Some(gb)]
    }))
}

pub fn transpose2<T: Scalar>(a: &Var<T>) -> Var<T> {
    assert_eq!(a.shape().len(), 2, "transpose2 expects rank 2");
    permute(a, &[1, 0])
}

/// Raw column-parallel GEMM on standard-layout dynamic arrays.
pub(crate) fn par_matmul<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    use rayon::prelude::*;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul: inner dimensions differ ({k} vs {k2})");
    let a_std = a.as_standard_layout();
    let b_std = b.as_standard_layout();
    let a_slice = a_std.as_slice().expect("matmul lhs layout");
    let b_slice = b_std.as_slice().expect("matmul rhs layout");
    let mut out = vec![T::zero(); m * n];

    // Fixed-width column blocks keep the result identical for any worker
    // count while letting rayon spread the work.
    const BLOCK: usize = 512;
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(BLOCK)
        .map(|j0| (j0, (j0 + BLOCK).min(n)))
        .collect();

    struct SendPtr<T>(*mut T);
    unsafe impl<T> Send for SendPtr<T> {}
    unsafe impl<T> Sync for SendPtr<T> {}
    let out_ptr = SendPtr(out.as_mut_ptr());

    blocks.par_iter().for_each(|&(j0, j1)| {
        let cols = j1 - j0;
        let base = &out_ptr;
        unsafe {
            T::gemm(
                m,
                k,
                cols,
                T::one(),
                a_slice.as_ptr(),
                k as isize,
                1,
                b_slice.as_ptr().add(j0),
                n as isize,
                1,
                T::zero(),
                base.0.add(j0),
                n as isize,
                1,
            );
        }
    });

    ArrayD::from_shape_vec(IxDyn(&[m, n]), out).expect("matmul output shape")
}

/// Concatenate along `axis`.
pub fn concat<T: Scalar>(parts: &[Var<T>], axis: usize) -> Var<T> {
    assert!(!parts.is_empty(), "concat of zero vars");
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = concatenate(Axis(axis), &views)
        .expect("concat: incompatible shapes")
        .as_standard_layout()
        .to_owned();
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let parents: Vec<Var<T>> = parts.to_vec();
    Var::from_op(value, parents, Box::new(move |g| {
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &len in &sizes {
            out.push(Some(slice_axis(g, axis, start, len)));
            start += len;
        }
        out
    }))
}

/// Take `len` entries starting at `start` along `axis`.
pub fn slice_axis<T: Scalar>(a: &Var<T>, axis: usize, start: usize, len: usize) -> Var<T> {
    let value = a
        .value()
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .to_owned();
    let full = a.shape()[axis];
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(embed_axis(g, axis, start, full))]
    }))
}

/// Place `a` into a zero tensor widened to `full` along `axis`; adjoint of
/// [`slice_axis`].
pub fn embed_axis<T: Scalar>(a: &Var<T>, axis: usize, start: usize, full: usize) -> Var<T> {
    let mut shape: Vec<usize> = a.shape().to_vec();
    let len = shape[axis];
    shape[axis] = full;
    let mut value = ArrayD::zeros(IxDyn(&shape));
    value
        .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
        .assign(a.value());
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(slice_axis(g, axis, start, len))]
    }))
}

/// Broadcast a per-channel parameter `[C]` over `[N, C, H, W]`.
pub fn broadcast_channel<T: Scalar>(p: &Var<T>, shape: &[usize]) -> Var<T> {
    assert_eq!(shape.len(), 4, "broadcast_channel expects NCHW target");
    assert_eq!(p.shape(), [shape[1]], "channel parameter length mismatch");
    let unsqueezed = reshape(p, &[1, shape[1], 1, 1]);
    broadcast_to(&unsqueezed, shape)
}
