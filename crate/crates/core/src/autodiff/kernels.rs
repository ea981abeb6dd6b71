//! Dense kernels shared by the forward and backward passes.

use crate::tensor::Scalar;

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim_at = |dims: &[usize], i: usize| {
        let off = rank - dims.len();
        if i >= off {
            dims[i - off]
        } else {
            1
        }
    };
    (0..rank)
        .map(|i| {
            let (da, db) = (dim_at(a, i), dim_at(b, i));
            if da == db || db == 1 {
                Some(da)
            } else if da == 1 {
                Some(db)
            } else {
                None
            }
        })
        .collect()
}

/// Strides of `dims` laid out against `out`, zero on broadcast axes.
pub(crate) fn aligned_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - dims.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..dims.len()).rev() {
        strides[i + off] = if dims[i] == 1 { 0 } else { s };
        s *= dims[i];
    }
    strides
}

/// Visits every output element in row-major order with the matching flat
/// offsets into both (broadcast) operands.
#[inline]
pub(crate) fn broadcast_for_each(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out.len();
    let (inner, ia, ib) = (out[r - 1], sa[r - 1], sb[r - 1]);
    let outer: usize = out[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let (mut base_a, mut base_b, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(o, base_a + j * ia, base_b + j * ib);
            o += 1;
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            base_a -= sa[ax] * out[ax];
            base_b -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Transposes the last two axes of a batch of `rows×cols` matrices.
pub(crate) fn transpose_batched<T: Scalar>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let block = rows * cols;
    for b in 0..batch {
        let s = &src[b * block..(b + 1) * block];
        let d = &mut out[b * block..(b + 1) * block];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
