//! Windowed multi-head attention with cyclic shift, seam masking and
//! relative position bias, plus the transformer sublayers built from it.

pub mod bias;
pub mod blocks;
pub mod layers;
pub mod reference;
pub mod window;

pub use blocks::{DecoderBlock, DecoderLayer, EncoderBlock, EncoderLayer};
pub use layers::{wmca, wmsa, AttentionParams, Mlp};
pub use window::{window_partition, window_reverse, AttentionMask, PadRecord, WindowSpec};

use crate::error::{Error, Result};

/// Additive logit sentinel standing in for -inf: suppresses a pair's weight
/// below 1e-8 without breeding NaNs.
pub const MASK_NEG: f64 = -1e9;

/// Token grid extents (time, height, width) of a [B, T, H, W, C] layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn of_tokens(shape: &[usize]) -> Result<Grid> {
        if shape.len() != 5 {
            return Err(Error::shape(format!(
                "token tensors are [B, T, H, W, C], got {shape:?}"
            )));
        }
        Ok(Grid { t: shape[1], h: shape[2], w: shape[3] })
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}
