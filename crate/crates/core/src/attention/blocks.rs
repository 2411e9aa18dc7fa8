//! Transformer blocks: pre-norm residual sublayers around windowed
//! attention. A "layer" is one attention(+cross)+MLP group; a block runs the
//! plain layer then its shifted twin, so windows communicate across seams.

use super::layers::{wmca, wmsa, AttentionParams};
use super::window::WindowSpec;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Norm};
use crate::tensor::{ParamStore, Scalar, Tensor};

pub struct EncoderLayer<E: Scalar> {
    pub norm1: Norm<E>,
    pub attn: AttentionParams<E>,
    pub norm2: Norm<E>,
    pub mlp: Mlp<E>,
}

impl<E: Scalar> EncoderLayer<E> {
    pub fn build(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        spec: &WindowSpec,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: Norm::build(store, &format!("{name}.n1"), dim)?,
            attn: AttentionParams::build(store, &format!("{name}.msa"), dim, heads, spec)?,
            norm2: Norm::build(store, &format!("{name}.n2"), dim)?,
            mlp: Mlp::build(store, &format!("{name}.mlp"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>, spec: &WindowSpec, shifted: bool) -> Result<Tensor<E>> {
        let x = x.add(&wmsa(&self.norm1.forward(x)?, &self.attn, spec, shifted)?)?;
        x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)
    }

    pub const fn param_count(dim: usize, heads: usize, bias_rows: usize) -> usize {
        2 * Norm::<E>::param_count(dim)
            + AttentionParams::<E>::param_count(dim, heads, bias_rows)
            + Mlp::<E>::param_count(dim)
    }
}

/// Plain+shifted layer pair: z = MLP_LN(W-MSA_LN(z)), then the SW-MSA twin,
/// every sublayer residual.
pub struct EncoderBlock<E: Scalar> {
    pub plain: EncoderLayer<E>,
    pub shifted: EncoderLayer<E>,
}

impl<E: Scalar> EncoderBlock<E> {
    pub fn build(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        spec: &WindowSpec,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            plain: EncoderLayer::build(store, &format!("{name}.a"), dim, heads, spec)?,
            shifted: EncoderLayer::build(store, &format!("{name}.b"), dim, heads, spec)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>, spec: &WindowSpec) -> Result<Tensor<E>> {
        let x = self.plain.forward(x, spec, false)?;
        self.shifted.forward(&x, spec, true)
    }

    pub const fn param_count(dim: usize, heads: usize, bias_rows: usize) -> usize {
        2 * EncoderLayer::<E>::param_count(dim, heads, bias_rows)
    }
}

pub struct DecoderLayer<E: Scalar> {
    pub norm1: Norm<E>,
    pub msa: AttentionParams<E>,
    pub norm2: Norm<E>,
    pub mca: AttentionParams<E>,
    pub norm3: Norm<E>,
    pub mlp: Mlp<E>,
}

impl<E: Scalar> DecoderLayer<E> {
    pub fn build(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        spec: &WindowSpec,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            norm1: Norm::build(store, &format!("{name}.n1"), dim)?,
            msa: AttentionParams::build(store, &format!("{name}.msa"), dim, heads, spec)?,
            norm2: Norm::build(store, &format!("{name}.n2"), dim)?,
            mca: AttentionParams::build(store, &format!("{name}.mca"), dim, heads, spec)?,
            norm3: Norm::build(store, &format!("{name}.n3"), dim)?,
            mlp: Mlp::build(store, &format!("{name}.mlp"), dim)?,
        })
    }

    /// Self-attention on the decoding path, cross-attention against the
    /// encoder skip (keys/values), MLP; each residual.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        skip: &Tensor<E>,
        spec: &WindowSpec,
        shifted: bool,
    ) -> Result<Tensor<E>> {
        let x = x.add(&wmsa(&self.norm1.forward(x)?, &self.msa, spec, shifted)?)?;
        let x = x.add(&wmca(&self.norm2.forward(&x)?, skip, &self.mca, spec, shifted)?)?;
        x.add(&self.mlp.forward(&self.norm3.forward(&x)?)?)
    }

    pub const fn param_count(dim: usize, heads: usize, bias_rows: usize) -> usize {
        3 * Norm::<E>::param_count(dim)
            + 2 * AttentionParams::<E>::param_count(dim, heads, bias_rows)
            + Mlp::<E>::param_count(dim)
    }
}

/// Plain+shifted decoder layer pair; the same skip feeds both.
pub struct DecoderBlock<E: Scalar> {
    pub plain: DecoderLayer<E>,
    pub shifted: DecoderLayer<E>,
}

impl<E: Scalar> DecoderBlock<E> {
    pub fn build(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        spec: &WindowSpec,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            plain: DecoderLayer::build(store, &format!("{name}.a"), dim, heads, spec)?,
            shifted: DecoderLayer::build(store, &format!("{name}.b"), dim, heads, spec)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>, skip: &Tensor<E>, spec: &WindowSpec) -> Result<Tensor<E>> {
        if x.shape() != skip.shape() {
            return Err(Error::shape(format!(
                "decoder input {:?} and skip {:?} must share the token grid",
                x.shape(),
                skip.shape()
            )));
        }
        let x = self.plain.forward(x, skip, spec, false)?;
        self.shifted.forward(&x, skip, spec, true)
    }

    pub const fn param_count(dim: usize, heads: usize, bias_rows: usize) -> usize {
        2 * DecoderLayer::<E>::param_count(dim, heads, bias_rows)
    }
}
