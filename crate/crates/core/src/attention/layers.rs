//! Windowed multi-head self- and cross-attention.

use super::bias::{bias_index, bias_rows};
use super::window::{partition_layout, window_partition, window_reverse, WindowSpec};
use crate::error::{Error, Result};
use crate::nn::Linear;
pub use crate::nn::Mlp;
use crate::tensor::{ParamStore, Scalar, Tensor};

/// Per-layer attention parameters: Q/K/V/output projections and the learned
/// relative-position-bias table (one scalar per head per distinct offset).
///
/// The key projection carries no bias: a constant added to every key shifts
/// each softmax row uniformly, so such a bias has identically zero gradient
/// and could never train.
pub struct AttentionParams<E: Scalar> {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear<E>,
    pub k: Linear<E>,
    pub v: Linear<E>,
    pub o: Linear<E>,
    /// [(2w_t-1)(2w_h-1)(2w_w-1), heads], zero-initialized.
    pub bias_table: Tensor<E>,
}

impl<E: Scalar> AttentionParams<E> {
    pub fn build(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        spec: &WindowSpec,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "channel dim {dim} must divide evenly into {heads} heads"
            )));
        }
        let q = Linear::build(store, &format!("{name}.q"), dim, dim)?;
        let k = Linear::build_unbiased(store, &format!("{name}.k"), dim, dim)?;
        let v = Linear::build(store, &format!("{name}.v"), dim, dim)?;
        let o = Linear::build(store, &format!("{name}.o"), dim, dim)?;
        let bias_table = store.new_const(&format!("{name}.bias"), &[bias_rows(spec), heads], 0.0)?;
        Ok(AttentionParams { dim, heads, q, k, v, o, bias_table })
    }

    pub const fn param_count(dim: usize, heads: usize, spec_rows: usize) -> usize {
        3 * Linear::<E>::param_count(dim, dim)
            + Linear::<E>::param_count_unbiased(dim, dim)
            + spec_rows * heads
    }

    fn validate(&self, spec: &WindowSpec) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "channel dim {} must divide evenly into {} heads",
                self.dim, self.heads
            )));
        }
        let rows = bias_rows(spec);
        if self.bias_table.shape() != [rows, self.heads] {
            return Err(Error::config(format!(
                "bias table {:?} does not match window {:?} ({} rows) x {} heads",
                self.bias_table.shape(),
                spec.window,
                rows,
                self.heads
            )));
        }
        Ok(())
    }
}

/// Windowed multi-head self-attention; cyclic shift + seam mask when
/// `shifted`.
pub fn wmsa<E: Scalar>(
    x: &Tensor<E>,
    params: &AttentionParams<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<Tensor<E>> {
    attend(x, None, params, spec, shifted)
}

/// Windowed multi-head cross-attention: queries from `q_in`, keys and values
/// from `kv_in` (the encoder skip). Both operands share one window layout.
pub fn wmca<E: Scalar>(
    q_in: &Tensor<E>,
    kv_in: &Tensor<E>,
    params: &AttentionParams<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<Tensor<E>> {
    if q_in.shape() != kv_in.shape() {
        return Err(Error::shape(format!(
            "cross attention operands must share the token grid: {:?} vs {:?}",
            q_in.shape(),
            kv_in.shape()
        )));
    }
    attend(q_in, Some(kv_in), params, spec, shifted)
}

fn attend<E: Scalar>(
    q_in: &Tensor<E>,
    kv_in: Option<&Tensor<E>>,
    params: &AttentionParams<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<Tensor<E>> {
    params.validate(spec)?;
    if q_in.ndim() != 5 || q_in.shape()[4] != params.dim {
        return Err(Error::shape(format!(
            "attention input {:?} does not carry channel dim {}",
            q_in.shape(),
            params.dim
        )));
    }
    let (q_win, mask, rec) = window_partition(q_in, spec, shifted)?;
    let kv_win = match kv_in {
        Some(kv) => partition_layout(kv, spec, shifted)?.0,
        None => q_win.clone(),
    };

    let (b, nw, n) = (rec.batch, rec.window_count(spec), spec.tokens());
    let (h, dh) = (params.heads, params.dim / params.heads);
    let split_heads = |t: &Tensor<E>| -> Result<Tensor<E>> {
        t.reshape(&[b, nw, n, h, dh])?.permute(&[0, 1, 3, 2, 4])
    };
    let q = split_heads(&params.q.forward(&q_win)?)?;
    let k = split_heads(&params.k.forward(&kv_win)?)?;
    let v = split_heads(&params.v.forward(&kv_win)?)?;

    // [b, nw, h, n, n]
    let mut logits = q.matmul_nt(&k)?.scale(1.0 / (dh as f64).sqrt());
    let bias = params
        .bias_table
        .gather_rows(&bias_index(spec))?
        .reshape(&[n, n, h])?
        .permute(&[2, 0, 1])?;
    logits = logits.add(&bias)?;
    if let Some(m) = mask.data() {
        logits = logits.add(m)?;
    }
    let attn = logits.softmax_lastdim();
    let ctx = attn.matmul(&v)?.permute(&[0, 1, 3, 2, 4])?.reshape(&[b, nw, n, params.dim])?;
    let out = params.o.forward(&ctx)?;
    window_reverse(&out, &rec, spec)
}
