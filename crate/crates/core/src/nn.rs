//! Small building blocks shared by the attention, patch and model layers.
//! Constructors register their parameters in a [`ParamStore`] under dotted
//! names, so creation order fixes checkpoint and optimizer order.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub struct Linear<E: Scalar> {
    pub w: Tensor<E>,
    /// None for purely linear maps (key projection, merge/expand reductions).
    pub b: Option<Tensor<E>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<E: Scalar> Linear<E> {
    pub fn build(store: &mut ParamStore<E>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = store.new_weight(&format!("{name}.w"), &[d_in, d_out])?;
        let b = store.new_const(&format!("{name}.b"), &[d_out], 0.0)?;
        Ok(Linear { w, b: Some(b), d_in, d_out })
    }

    pub fn build_unbiased(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.new_weight(&format!("{name}.w"), &[d_in, d_out])?;
        Ok(Linear { w, b: None, d_in, d_out })
    }

    pub fn from_parts(w: Tensor<E>, b: Option<Tensor<E>>) -> Result<Self> {
        if w.ndim() != 2 {
            return Err(Error::shape(format!("linear weight must be 2-D, got {:?}", w.shape())));
        }
        if let Some(b) = &b {
            if b.shape() != [w.shape()[1]] {
                return Err(Error::shape(format!(
                    "linear parts mismatch: w {:?}, b {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub const fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub const fn param_count_unbiased(d_in: usize, d_out: usize) -> usize {
        d_in * d_out
    }
}

/// Layer normalization over the channel axis with learned affine.
pub struct Norm<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Scalar> Norm<E> {
    pub fn build(store: &mut ParamStore<E>, name: &str, d: usize) -> Result<Self> {
        let gamma = store.new_const(&format!("{name}.g"), &[d], 1.0)?;
        let beta = store.new_const(&format!("{name}.b"), &[d], 0.0)?;
        Ok(Norm { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }

    pub const fn param_count(d: usize) -> usize {
        2 * d
    }
}

/// Two-layer token MLP with a fixed 4x hidden widening and exact-erf GELU
/// between; the outer transfer is the identity.
pub struct Mlp<E: Scalar> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Scalar> Mlp<E> {
    pub fn build(store: &mut ParamStore<E>, name: &str, d: usize) -> Result<Self> {
        let fc1 = Linear::build(store, &format!("{name}.fc1"), d, 4 * d)?;
        let fc2 = Linear::build(store, &format!("{name}.fc2"), 4 * d, d)?;
        Ok(Mlp { fc1, fc2 })
    }

    pub fn from_parts(fc1: Linear<E>, fc2: Linear<E>) -> Result<Self> {
        if fc1.d_out != 4 * fc1.d_in {
            return Err(Error::config(format!(
                "mlp hidden dim must be exactly 4x input, got {} for input {}",
                fc1.d_out, fc1.d_in
            )));
        }
        if fc2.d_in != fc1.d_out || fc2.d_out != fc1.d_in {
            return Err(Error::config(format!(
                "mlp output layer {}x{} does not close the {}-dim token",
                fc2.d_in, fc2.d_out, fc1.d_in
            )));
        }
        Ok(Mlp { fc1, fc2 })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub const fn param_count(d: usize) -> usize {
        Linear::<E>::param_count(d, 4 * d) + Linear::<E>::param_count(4 * d, d)
    }
}
