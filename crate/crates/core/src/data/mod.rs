//! Synthetic data pipeline: sample generation, geometric augmentation,
//! the W4CT tensor file format, and batch assembly.

pub mod augment;
pub mod dataset;
pub mod format;
pub mod synth;

pub use augment::{augment, draw_augment, Augment};
pub use dataset::{load_split, make_batch, read_sample, write_sample, write_split};
pub use format::{read_tensor, read_targets, write_tensor};
pub use synth::{generate_sequence, SynthParams};

use crate::tensor::Tensor;

/// One training example. Dynamic surrogate channels and static channels are
/// kept apart from the target history so batches can pick any channel plan.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Past frames of the 4 target variables: [4, t_in, H, W].
    pub past: Tensor<f32>,
    /// Dynamic surrogate channels derived from the targets: [12, t_in, H, W].
    pub dynamic: Tensor<f32>,
    /// Elevation plus latitude/longitude ramps: [3, H, W].
    pub statics: Tensor<f32>,
    /// Future frames to predict: [4, t_out, H, W].
    pub target: Tensor<f32>,
    /// Validity of each target entry: [4, t_out, H, W] of {0, 1}.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.past.shape();
        (s[2], s[3])
    }
}
