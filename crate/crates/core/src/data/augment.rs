//! Geometric augmentation: independent coin-flip horizontal/vertical flips
//! and a uniformly drawn quarter-turn rotation, applied identically to every
//! field of a sample so inputs, targets, masks, and statics stay aligned.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    /// Counterclockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
}

impl Augment {
    pub fn identity() -> Self {
        Augment { hflip: false, vflip: false, quarter_turns: 0 }
    }

    pub fn is_identity(&self) -> bool {
        *self == Augment::identity()
    }
}

/// Each flip fires with probability 1/2; the turn count is uniform on
/// {0,1,2,3}.
pub fn draw_augment(seed: u64, tag: &str) -> Augment {
    let mut s = Stream::new(seed, tag);
    Augment {
        hflip: s.chance(0.5),
        vflip: s.chance(0.5),
        quarter_turns: s.below(4) as u8,
    }
}

/// Transforms the trailing [H, W] axes; any leading axes ride along.
fn transform_hw(data: &[f32], h: usize, w: usize, aug: Augment) -> (Vec<f32>, usize, usize) {
    let planes = data.len() / (h * w);
    let mut cur = data.to_vec();
    let (mut ch, mut cw) = (h, w);
    if aug.hflip {
        let mut out = vec![0.0f32; cur.len()];
        for p in 0..planes {
            for i in 0..ch {
                for j in 0..cw {
                    out[(p * ch + i) * cw + j] = cur[(p * ch + i) * cw + (cw - 1 - j)];
                }
            }
        }
        cur = out;
    }
    if aug.vflip {
        let mut out = vec![0.0f32; cur.len()];
        for p in 0..planes {
            for i in 0..ch {
                for j in 0..cw {
                    out[(p * ch + i) * cw + j] = cur[(p * ch + (ch - 1 - i)) * cw + j];
                }
            }
        }
        cur = out;
    }
    for _ in 0..aug.quarter_turns % 4 {
        // One counterclockwise turn: out[i][j] = in[j][W-1-i], out is [W, H].
        let (nh, nw) = (cw, ch);
        let mut out = vec![0.0f32; cur.len()];
        for p in 0..planes {
            for i in 0..nh {
                for j in 0..nw {
                    out[(p * nh + i) * nw + j] = cur[(p * ch + j) * cw + (cw - 1 - i)];
                }
            }
        }
        cur = out;
        ch = nh;
        cw = nw;
    }
    (cur, ch, cw)
}

fn apply(t: &Tensor<f32>, aug: Augment) -> Result<Tensor<f32>> {
    let s = t.shape().to_vec();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (data, nh, nw) = transform_hw(&t.to_vec(), h, w, aug);
    let mut ns = s.clone();
    ns[s.len() - 2] = nh;
    ns[s.len() - 1] = nw;
    Tensor::from_vec(&ns, data)
}

/// Applies the same transform to every field. A quarter turn on a
/// non-square grid would change the grid shape, so it is rejected.
pub fn augment(sample: &Sample, aug: Augment) -> Result<Sample> {
    let (h, w) = sample.grid();
    if aug.quarter_turns % 2 == 1 && h != w {
        return Err(Error::config(format!(
            "90-degree rotation needs a square grid, got {h}x{w}"
        )));
    }
    Ok(Sample {
        past: apply(&sample.past, aug)?,
        dynamic: apply(&sample.dynamic, aug)?,
        statics: apply(&sample.statics, aug)?,
        target: apply(&sample.target, aug)?,
        mask: apply(&sample.mask, aug)?,
    })
}
