//! Slow reference attention used to validate the production path.
//!
//! Works coordinate-wise: every window slot is mapped straight back to its
//! pre-shift grid position and token values are read from the original
//! tensor, so no roll, pad or untile buffer ever exists here. Disallowed
//! pairs are excluded from the softmax outright instead of being pushed down
//! with an additive sentinel. f64 throughout.

use super::layers::AttentionParams;
use super::window::WindowSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn affine(x: &[f64], w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for (c, &xc) in x.iter().enumerate().take(d_in) {
        for o in 0..d_out {
            y[o] += xc * w[c * d_out + o];
        }
    }
    y
}

struct Slot {
    /// Position inside the window, per axis.
    local: [usize; 3],
    /// Position in the padded, rolled grid.
    rolled: [usize; 3],
    /// Position in the caller's grid (None for padding).
    source: Option<[usize; 3]>,
}

/// Self-attention oracle; returns data in [B, T, H, W, C] order.
pub fn reference_wmsa<E: Scalar>(
    x: &Tensor<E>,
    params: &AttentionParams<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<Vec<f64>> {
    reference_attention(x, x, params, spec, shifted)
}

/// Cross-attention oracle: queries from `q_in`, keys and values from `kv_in`.
pub fn reference_wmca<E: Scalar>(
    q_in: &Tensor<E>,
    kv_in: &Tensor<E>,
    params: &AttentionParams<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<Vec<f64>> {
    if q_in.shape() != kv_in.shape() {
        return Err(Error::shape(format!(
            "reference cross attention operands must match: {:?} vs {:?}",
            q_in.shape(),
            kv_in.shape()
        )));
    }
    reference_attention(q_in, kv_in, params, spec, shifted)
}

fn reference_attention<E: Scalar>(
    q_in: &Tensor<E>,
    kv_in: &Tensor<E>,
    params: &AttentionParams<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<Vec<f64>> {
    let shape = q_in.shape().to_vec();
    if shape.len() != 5 {
        return Err(Error::shape(format!("token tensors are [B, T, H, W, C], got {shape:?}")));
    }
    let (batch, c) = (shape[0], shape[4]);
    let orig = [shape[1], shape[2], shape[3]];
    let d = params.dim;
    if c != d {
        return Err(Error::shape(format!("input carries {c} channels, attention expects {d}")));
    }
    let heads = params.heads;
    let dh = d / heads;
    let shift = if shifted { spec.shift } else { [0; 3] };
    let win = spec.window;
    let padded: [usize; 3] = std::array::from_fn(|ax| orig[ax].div_ceil(win[ax]) * win[ax]);
    let blocks: [usize; 3] = std::array::from_fn(|ax| padded[ax] / win[ax]);

    let qs = q_in.to_f64_vec();
    let kvs = kv_in.to_f64_vec();
    let bias_of = |l: &crate::nn::Linear<E>| match &l.b {
        Some(b) => b.to_f64_vec(),
        None => vec![0.0; l.d_out],
    };
    let wq = params.q.w.to_f64_vec();
    let bq = bias_of(&params.q);
    let wk = params.k.w.to_f64_vec();
    let bk = bias_of(&params.k);
    let wv = params.v.w.to_f64_vec();
    let bv = bias_of(&params.v);
    let wo = params.o.w.to_f64_vec();
    let bo = bias_of(&params.o);
    let table = params.bias_table.to_f64_vec();

    let tok_index = |coord: [usize; 3]| (coord[0] * orig[1] + coord[1]) * orig[2] + coord[2];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0f64; batch * orig[0] * orig[1] * orig[2] * d];

    for b in 0..batch {
        let base = b * orig[0] * orig[1] * orig[2] * d;
        for btb in 0..blocks[0] {
            for bhb in 0..blocks[1] {
                for bwb in 0..blocks[2] {
                    let corner = [btb * win[0], bhb * win[1], bwb * win[2]];
                    let mut slots = Vec::with_capacity(spec.tokens());
                    for it in 0..win[0] {
                        for ih in 0..win[1] {
                            for iw in 0..win[2] {
                                let local = [it, ih, iw];
                                let rolled: [usize; 3] =
                                    std::array::from_fn(|ax| corner[ax] + local[ax]);
                                let source = if (0..3).any(|ax| rolled[ax] >= orig[ax]) {
                                    None
                                } else {
                                    Some(std::array::from_fn(|ax| {
                                        (rolled[ax] + shift[ax]) % orig[ax]
                                    }))
                                };
                                slots.push(Slot { local, rolled, source });
                            }
                        }
                    }
                    let keys: Vec<Option<(Vec<f64>, Vec<f64>)>> = slots
                        .iter()
                        .map(|s| {
                            s.source.map(|sc| {
                                let t = &kvs[base + tok_index(sc) * d..][..d];
                                (affine(t, &wk, &bk, d, d), affine(t, &wv, &bv, d, d))
                            })
                        })
                        .collect();
                    for si in slots.iter() {
                        let Some(qc) = si.source else { continue };
                        let q = affine(&qs[base + tok_index(qc) * d..][..d], &wq, &bq, d, d);
                        let mut ctx = vec![0.0f64; d];
                        for h in 0..heads {
                            // Keep only pairs whose in-window offset equals
                            // their offset in the caller's grid; shift seams
                            // and padding fail that test.
                            let mut picked: Vec<(usize, f64)> = Vec::new();
                            for (j, sj) in slots.iter().enumerate() {
                                let Some(kc) = sj.source else { continue };
                                let neighbors = (0..3).all(|ax| {
                                    qc[ax] as isize - kc[ax] as isize
                                        == si.rolled[ax] as isize - sj.rolled[ax] as isize
                                });
                                if !neighbors {
                                    continue;
                                }
                                let (k, _) = keys[j].as_ref().unwrap();
                                let mut dot = 0.0;
                                for e in 0..dh {
                                    dot += q[h * dh + e] * k[h * dh + e];
                                }
                                let mut row = 0usize;
                                for ax in 0..3 {
                                    let off = sj.local[ax] + win[ax] - 1 - si.local[ax];
                                    row = row * (2 * win[ax] - 1) + off;
                                }
                                picked.push((j, dot * scale + table[row * heads + h]));
                            }
                            let m = picked.iter().fold(f64::NEG_INFINITY, |a, p| a.max(p.1));
                            let mut z = 0.0;
                            let weights: Vec<f64> =
                                picked.iter().map(|p| (p.1 - m).exp()).inspect(|w| z += w).collect();
                            for ((j, _), w) in picked.iter().zip(weights) {
                                let (_, v) = keys[*j].as_ref().unwrap();
                                for e in 0..dh {
                                    ctx[h * dh + e] += w / z * v[h * dh + e];
                                }
                            }
                        }
                        let y = affine(&ctx, &wo, &bo, d, d);
                        out[base + tok_index(qc) * d..][..d].copy_from_slice(&y);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::layers::{wmca, wmsa};
    use crate::rng::Stream;
    use crate::tensor::ParamStore;

    fn tokens<E: Scalar>(seed: u64, shape: &[usize]) -> Tensor<E> {
        let mut s = Stream::new(seed, "oracle");
        let data: Vec<E> =
            (0..shape.iter().product()).map(|_| E::from_f64(s.normal() * 0.5)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn randomize_bias<E: Scalar>(p: &AttentionParams<E>, seed: u64) {
        let mut s = Stream::new(seed, "bias");
        let n = p.bias_table.numel();
        let data: Vec<E> = (0..n).map(|_| E::from_f64(s.normal() * 0.1)).collect();
        p.bias_table.set_data(&data).unwrap();
    }

    fn max_abs_diff<E: Scalar>(got: &Tensor<E>, want: &[f64]) -> f64 {
        got.to_f64_vec()
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn shifted_self_attention_matches_oracle_f32() {
        let cases: [([usize; 4], WindowSpec); 3] = [
            ([1, 1, 14, 14], WindowSpec::default()),
            ([2, 2, 14, 14], WindowSpec::new([2, 7, 7], [1, 2, 2]).unwrap()),
            ([1, 1, 10, 9], WindowSpec::default()),
        ];
        for (i, ([b, t, h, w], spec)) in cases.into_iter().enumerate() {
            let mut store: ParamStore<f32> = ParamStore::new(40 + i as u64);
            let p = AttentionParams::build(&mut store, "a", 8, 2, &spec).unwrap();
            randomize_bias(&p, 41 + i as u64);
            let x = tokens::<f32>(42 + i as u64, &[b, t, h, w, 8]);
            let got = wmsa(&x, &p, &spec, true).unwrap();
            let want = reference_wmsa(&x, &p, &spec, true).unwrap();
            let diff = max_abs_diff(&got, &want);
            assert!(diff < 1e-5, "case {i}: max abs diff {diff}");
        }
    }

    #[test]
    fn unshifted_exact_grid_matches_oracle_f32() {
        let spec = WindowSpec::new([1, 7, 7], [0, 0, 0]).unwrap();
        let mut store: ParamStore<f32> = ParamStore::new(50);
        let p = AttentionParams::build(&mut store, "a", 16, 4, &spec).unwrap();
        randomize_bias(&p, 51);
        let x = tokens::<f32>(52, &[1, 1, 7, 7, 16]);
        let got = wmsa(&x, &p, &spec, false).unwrap();
        let want = reference_wmsa(&x, &p, &spec, false).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-5);
    }

    #[test]
    fn cross_attention_matches_oracle_f64() {
        let spec = WindowSpec::new([1, 3, 3], [0, 1, 1]).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new(60);
        let p = AttentionParams::build(&mut store, "a", 6, 3, &spec).unwrap();
        randomize_bias(&p, 61);
        let q = tokens::<f64>(62, &[2, 1, 5, 7, 6]);
        let kv = tokens::<f64>(63, &[2, 1, 5, 7, 6]);
        let got = wmca(&q, &kv, &p, &spec, true).unwrap();
        let want = reference_wmca(&q, &kv, &p, &spec, true).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-10);
    }

    #[test]
    fn oracle_rejects_mismatched_operands() {
        let spec = WindowSpec::default();
        let mut store: ParamStore<f64> = ParamStore::new(64);
        let p = AttentionParams::build(&mut store, "a", 4, 1, &spec).unwrap();
        let q = tokens::<f64>(65, &[1, 1, 4, 4, 4]);
        let kv = tokens::<f64>(66, &[1, 2, 4, 4, 4]);
        assert!(reference_wmca(&q, &kv, &p, &spec, false).is_err());
    }
}
