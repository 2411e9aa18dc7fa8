//! Raw row-major data movement: strides, broadcasting, region copies.
//! Everything here works on plain slices; graph bookkeeping lives one level up.

use crate::error::{Error, Result};
use super::scalar::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major contiguous strides for a shape.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Right-aligned broadcast of two shapes. Each trailing pair of extents must
/// be equal or one of them 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"
            )));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed at `out` rank, with 0 on broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = contiguous_strides(shape);
    let lead = out.len() - shape.len();
    let mut s = vec![0usize; out.len()];
    for i in 0..shape.len() {
        s[lead + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    s
}

/// Elementwise binary op with broadcasting. Returns (data, out_shape).
pub fn zip_broadcast<E: Scalar>(
    a: &[E],
    ashape: &[usize],
    b: &[E],
    bshape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Result<(Vec<E>, Vec<usize>)> {
    if ashape == bshape {
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out, ashape.to_vec()));
    }
    let oshape = broadcast_shapes(ashape, bshape)?;
    let n = numel(&oshape);
    // Suffix cycle: b repeats over leading axes only.
    if oshape == *ashape && ashape.ends_with(bshape) {
        let bn = b.len().max(1);
        let mut out = Vec::with_capacity(n);
        for (i, &x) in a.iter().enumerate() {
            out.push(f(x, b[i % bn]));
        }
        return Ok((out, oshape));
    }
    let sa = broadcast_strides(ashape, &oshape);
    let sb = broadcast_strides(bshape, &oshape);
    let mut out = Vec::with_capacity(n);
    let mut coord = vec![0usize; oshape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        for ax in (0..oshape.len()).rev() {
            coord[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coord[ax] < oshape[ax] {
                break;
            }
            coord[ax] = 0;
            ia -= sa[ax] * oshape[ax];
            ib -= sb[ax] * oshape[ax];
        }
    }
    Ok((out, oshape))
}

/// Backward pass of a broadcast binary op: walks the output shape once and
/// accumulates `fa`/`fb` of (grad, a, b) into the operand-shaped buffers.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_broadcast<E: Scalar>(
    grad: &[E],
    oshape: &[usize],
    a: &[E],
    ashape: &[usize],
    b: &[E],
    bshape: &[usize],
    mut into_a: Option<&mut [E]>,
    mut into_b: Option<&mut [E]>,
    fa: impl Fn(E, E, E) -> E,
    fb: impl Fn(E, E, E) -> E,
) {
    let sa = broadcast_strides(ashape, oshape);
    let sb = broadcast_strides(bshape, oshape);
    let n = numel(oshape);
    let mut coord = vec![0usize; oshape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for &g in grad.iter().take(n) {
        if let Some(ga) = into_a.as_deref_mut() {
            ga[ia] += fa(g, a[ia], b[ib]);
        }
        if let Some(gb) = into_b.as_deref_mut() {
            gb[ib] += fb(g, a[ia], b[ib]);
        }
        for ax in (0..oshape.len()).rev() {
            coord[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coord[ax] < oshape[ax] {
                break;
            }
            coord[ax] = 0;
            ia -= sa[ax] * oshape[ax];
            ib -= sb[ax] * oshape[ax];
        }
    }
}

/// Permutes axes into a fresh buffer. Returns (data, permuted_dims).
pub fn permute_copy<E: Scalar>(src: &[E], dims: &[usize], axes: &[usize]) -> (Vec<E>, Vec<usize>) {
    let ndim = dims.len();
    let in_strides = contiguous_strides(dims);
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let out_strides_in: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(dims);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_dims);
    }
    // Runs stay contiguous when the last axis keeps its place.
    if axes.last() == Some(&(ndim - 1)) {
        let run = out_dims[ndim - 1];
        let outer = n / run;
        let mut coord = vec![0usize; ndim - 1];
        let mut base = 0usize;
        for _ in 0..outer {
            out.extend_from_slice(&src[base..base + run]);
            for ax in (0..ndim - 1).rev() {
                coord[ax] += 1;
                base += out_strides_in[ax];
                if coord[ax] < out_dims[ax] {
                    break;
                }
                coord[ax] = 0;
                base -= out_strides_in[ax] * out_dims[ax];
            }
        }
    } else {
        let mut coord = vec![0usize; ndim];
        let mut off = 0usize;
        for _ in 0..n {
            out.push(src[off]);
            for ax in (0..ndim).rev() {
                coord[ax] += 1;
                off += out_strides_in[ax];
                if coord[ax] < out_dims[ax] {
                    break;
                }
                coord[ax] = 0;
                off -= out_strides_in[ax] * out_dims[ax];
            }
        }
    }
    (out, out_dims)
}

/// Inverse of a permutation.
pub fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Cyclic roll: element at index i on an axis of extent L moves to
/// (i + shift) mod L.
pub fn roll_copy<E: Scalar>(src: &[E], dims: &[usize], shifts: &[isize]) -> Vec<E> {
    let strides = contiguous_strides(dims);
    // Normalized shifts in [0, L).
    let norm: Vec<usize> = dims
        .iter()
        .zip(shifts)
        .map(|(&d, &s)| (s.rem_euclid(d as isize)) as usize)
        .collect();
    let n = numel(dims);
    let mut out = vec![E::ZERO; n];
    if n == 0 {
        return out;
    }
    // Axes after the last shifted one stay contiguous.
    let split = norm.iter().rposition(|&s| s != 0).map_or(0, |p| p + 1);
    let run: usize = dims[split..].iter().product();
    let outer = n / run.max(1);
    let mut coord = vec![0usize; split];
    for _ in 0..outer {
        let mut src_off = 0usize;
        let mut dst_off = 0usize;
        for ax in 0..split {
            let c = coord[ax];
            src_off += c * strides[ax];
            dst_off += ((c + norm[ax]) % dims[ax]) * strides[ax];
        }
        out[dst_off..dst_off + run].copy_from_slice(&src[src_off..src_off + run]);
        for ax in (0..split).rev() {
            coord[ax] += 1;
            if coord[ax] < dims[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    out
}

/// Copies (or accumulates) a rectangular region between two row-major
/// buffers of equal rank.
#[allow(clippy::too_many_arguments)]
pub fn region_copy<E: Scalar>(
    src: &[E],
    src_dims: &[usize],
    src_start: &[usize],
    dst: &mut [E],
    dst_dims: &[usize],
    dst_start: &[usize],
    region: &[usize],
    accumulate: bool,
) {
    let ndim = region.len();
    debug_assert_eq!(src_dims.len(), ndim);
    debug_assert_eq!(dst_dims.len(), ndim);
    let ss = contiguous_strides(src_dims);
    let ds = contiguous_strides(dst_dims);
    if numel(region) == 0 {
        return;
    }
    let run = region[ndim - 1];
    let outer: usize = region[..ndim - 1].iter().product();
    let mut coord = vec![0usize; ndim.saturating_sub(1)];
    for _ in 0..outer.max(1) {
        let mut so = src_start[ndim - 1];
        let mut dofs = dst_start[ndim - 1];
        for ax in 0..ndim - 1 {
            so += (src_start[ax] + coord[ax]) * ss[ax];
            dofs += (dst_start[ax] + coord[ax]) * ds[ax];
        }
        if accumulate {
            for i in 0..run {
                dst[dofs + i] += src[so + i];
            }
        } else {
            dst[dofs..dofs + run].copy_from_slice(&src[so..so + run]);
        }
        for ax in (0..ndim - 1).rev() {
            coord[ax] += 1;
            if coord[ax] < region[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
}
