//! Raw loops behind the tape ops. All summations run in a fixed order.

use super::{Result, TensorError};
use crate::exec;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let rows_per_chunk = 16usize;
    exec::for_each_chunk_mut(c, rows_per_chunk * n, m * k * n, |ci, chunk| {
        let r0 = ci * rows_per_chunk;
        for (ri, crow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k == 0 {
        return;
    }
    let rows_per_chunk = 16usize;
    exec::for_each_chunk_mut(c, rows_per_chunk * k, m * k * n, |ci, chunk| {
        let r0 = ci * rows_per_chunk;
        for (ri, crow) in chunk.chunks_mut(k).enumerate() {
            let grow = &g[(r0 + ri) * n..(r0 + ri + 1) * n];
            for (p, cv) in crow.iter_mut().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                let mut s = 0.0;
                for (x, y) in grow.iter().zip(brow) {
                    s += x * y;
                }
                *cv += s;
            }
        }
    });
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 0 {
        return;
    }
    // Partitioned over rows of `c` so each output row keeps one summation order.
    exec::for_each_chunk_mut(c, n, m * k * n, |p, crow| {
        for i in 0..m {
            let av = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    });
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `input` laid over `out`, zero on broadcast axes.
fn bcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[off + i] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    strides
}

fn is_suffix(input: &[usize], out: &[usize]) -> bool {
    input.len() <= out.len() && out[out.len() - input.len()..] == *input
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast of `a` and `b`
/// in row-major output order.
pub fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let la: usize = a.iter().product();
    let lb: usize = b.iter().product();
    if is_suffix(a, out) && is_suffix(b, out) {
        for i in 0..n {
            f(i, i % la.max(1), i % lb.max(1));
        }
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Permutes axes of a row-major buffer.
pub fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // Innermost output axis is iterated as a strided run.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let outer = if inner == 0 { 0 } else { n / inner };
    for _ in 0..outer {
        let mut p = base;
        for _ in 0..inner {
            out.push(data[p]);
            p += inner_stride;
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Row-wise softmax; `-inf` entries map to exactly zero.
pub fn softmax_rows(x: &[f64], width: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let max = xr
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            if xr.iter().any(|v| v.is_nan()) {
                or.iter_mut().for_each(|o| *o = f64::NAN);
                continue;
            }
            return Err(TensorError::DegenerateRow { row: r });
        }
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = if v == f64::NEG_INFINITY {
                0.0
            } else {
                (v - max).exp()
            };
            *o = e;
            sum += e;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}
