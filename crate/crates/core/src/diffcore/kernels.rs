//! Index arithmetic and loop kernels shared by forward and backward passes.

use super::Real;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, right aligned.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank {
            a[k + a.len() - rank]
        } else {
            1
        };
        let db = if k + b.len() >= rank {
            b[k + b.len() - rank]
        } else {
            1
        };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it.
pub(crate) fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    if out_shape == in_shape {
        return (0..numel).collect();
    }
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0; rank];
    for k in 0..in_shape.len() {
        let ok = k + rank - in_shape.len();
        if in_shape[k] != 1 {
            eff[ok] = in_strides[k];
        }
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let mut map = Vec::with_capacity(numel);
    for _ in 0..numel {
        map.push(offset);
        for k in (0..rank).rev() {
            idx[k] += 1;
            offset += eff[k];
            if idx[k] < out_shape[k] {
                break;
            }
            offset -= eff[k] * idx[k];
            idx[k] = 0;
        }
    }
    map
}

/// Reorders axes so that output axis `k` is input axis `axes[k]`.
pub(crate) fn permute<T: Copy>(
    data: &[T],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(data[offset]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            offset += eff[k];
            if idx[k] < out_shape[k] {
                break;
            }
            offset -= eff[k] * idx[k];
            idx[k] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (k, &a) in axes.iter().enumerate() {
        inv[a] = k;
    }
    inv
}

/// `(outer, len, inner)` sizes around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s = s + gv * bv;
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + aip * gv;
            }
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU and its derivative.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> (T, T) {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
