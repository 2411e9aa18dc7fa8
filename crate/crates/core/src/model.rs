//! The full nowcasting network: patch embedding, a three-stage windowed
//! transformer encoder with 2x merges, a mirrored three-stage decoder whose
//! cross-attention consumes same-resolution encoder skips, and a projection
//! head that emits squashed future frames.

use crate::attention::bias::bias_rows;
use crate::attention::{DecoderBlock, EncoderBlock, WindowSpec};
use crate::error::{Error, Result};
use crate::patch::{PatchEmbed, PatchExpand, PatchMerge, PatchSpec, ProjectionHead};
use crate::tensor::{ParamStore, Scalar, Tensor};

pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input channels: the 4 target variables plus any static or dynamic
    /// extras stacked behind them.
    pub in_channels: usize,
    pub target_vars: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub embed_dim: usize,
    pub patch: [usize; 3],
    pub enc_depths: Vec<usize>,
    pub dec_depths: Vec<usize>,
    pub window: WindowSpec,
    pub heads: Vec<usize>,
    pub weight_decay: f64,
    pub seed: u64,
}

/// One attention head per 16 embedding channels at stage 1, doubling with
/// each merge so the per-head width stays constant across stages.
pub fn default_heads(embed_dim: usize) -> Vec<usize> {
    let h = (embed_dim / 16).max(1);
    vec![h, 2 * h, 4 * h]
}

impl ModelConfig {
    /// Targets-only config with the standard depths, window, and head rule;
    /// `patch_hw` is the spatial patch edge (temporal patch stays 1).
    pub fn new(in_channels: usize, embed_dim: usize, patch_hw: usize) -> Self {
        ModelConfig {
            in_channels,
            target_vars: 4,
            t_in: 4,
            t_out: 32,
            embed_dim,
            patch: [1, patch_hw, patch_hw],
            enc_depths: vec![4; STAGES],
            dec_depths: vec![4; STAGES],
            window: WindowSpec::default(),
            heads: default_heads(embed_dim),
            weight_decay: 0.0,
            seed: 0,
        }
    }

    /// Token channels per stage: C, 2C, 4C.
    pub fn stage_dims(&self) -> [usize; 3] {
        [self.embed_dim, 2 * self.embed_dim, 4 * self.embed_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_vars == 0 || self.in_channels < self.target_vars {
            return Err(Error::config(format!(
                "need at least the {} target channels, got in_channels {}",
                self.target_vars, self.in_channels
            )));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::config("t_in and t_out must be >= 1"));
        }
        if self.t_out % self.t_in != 0 {
            return Err(Error::config(format!(
                "t_out {} must be a multiple of t_in {} (the head emits a fixed \
                 number of future frames per input step)",
                self.t_out, self.t_in
            )));
        }
        PatchSpec::new(self.patch, self.embed_dim)?;
        for (side, depths) in [("encoder", &self.enc_depths), ("decoder", &self.dec_depths)] {
            if depths.len() != STAGES {
                return Err(Error::config(format!(
                    "{side} needs exactly {STAGES} stage depths, got {:?}",
                    depths
                )));
            }
            if depths.iter().any(|&d| d == 0 || d % 2 != 0) {
                return Err(Error::config(format!(
                    "{side} depths must be positive and even (layers pair plain+shifted), got {depths:?}"
                )));
            }
        }
        if self.heads.len() != STAGES {
            return Err(Error::config(format!(
                "need {STAGES} per-stage head counts, got {:?}",
                self.heads
            )));
        }
        for (k, (&d, &h)) in self.stage_dims().iter().zip(&self.heads).enumerate() {
            if h == 0 || d % h != 0 {
                return Err(Error::config(format!(
                    "stage {} has {d} channels, not divisible into {h} heads",
                    k + 1
                )));
            }
        }
        WindowSpec::new(self.window.window, self.window.shift)?;
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Fixed-order textual form; the checkpoint fingerprint hashes this, so
    /// any field change makes saved states incompatible.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "in_channels = {}\ntarget_vars = {}\nt_in = {}\nt_out = {}\nembed_dim = {}\n\
             patch = {}\nenc_depths = {}\ndec_depths = {}\nwindow = {}\nshift = {}\n\
             heads = {}\nweight_decay = {}\nseed = {}\n",
            self.in_channels,
            self.target_vars,
            self.t_in,
            self.t_out,
            self.embed_dim,
            list(&self.patch),
            list(&self.enc_depths),
            list(&self.dec_depths),
            list(&self.window.window),
            list(&self.window.shift),
            list(&self.heads),
            self.weight_decay,
            self.seed,
        )
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.canonical_text().as_bytes())
    }

    /// Token grid produced by the patch embedding for the given frame extents.
    pub fn token_grid(&self, t: usize, h: usize, w: usize) -> [usize; 3] {
        [
            t.div_ceil(self.patch[0]),
            h.div_ceil(self.patch[1]),
            w.div_ceil(self.patch[2]),
        ]
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Parameter total of `build(config)` without allocating anything.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let rows = bias_rows(&config.window);
    let dims = config.stage_dims();
    let c = config.embed_dim;
    let patch_len = config.patch.iter().product::<usize>();
    let per_step = config.t_out / config.t_in;
    let mut n = PatchEmbed::<f32>::param_count(config.in_channels, patch_len, c);
    for k in 0..STAGES {
        n += (config.enc_depths[k] / 2) * EncoderBlock::<f32>::param_count(dims[k], config.heads[k], rows);
        n += (config.dec_depths[k] / 2) * DecoderBlock::<f32>::param_count(dims[k], config.heads[k], rows);
    }
    n += PatchMerge::<f32>::param_count(dims[0]) + PatchMerge::<f32>::param_count(dims[1]);
    n += PatchExpand::<f32>::param_count(dims[2]) + PatchExpand::<f32>::param_count(dims[1]);
    n += ProjectionHead::<f32>::param_count(patch_len, c, config.target_vars, per_step);
    Ok(n)
}

pub struct Model<E: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    embed: PatchEmbed<E>,
    enc: Vec<Vec<EncoderBlock<E>>>,
    merges: Vec<PatchMerge<E>>,
    /// Decoder stages deepest first: dec[0] runs at 4C on the stage-3 grid.
    dec: Vec<Vec<DecoderBlock<E>>>,
    expands: Vec<PatchExpand<E>>,
    head: ProjectionHead<E>,
}

impl<E: Scalar> Model<E> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let dims = config.stage_dims();
        let spec = PatchSpec::new(config.patch, config.embed_dim)?;
        let embed = PatchEmbed::build(&mut store, "embed", config.in_channels, spec)?;
        let mut enc = Vec::new();
        for k in 0..STAGES {
            let mut stage = Vec::new();
            for b in 0..config.enc_depths[k] / 2 {
                stage.push(EncoderBlock::build(
                    &mut store,
                    &format!("enc{}.b{b}", k + 1),
                    dims[k],
                    config.heads[k],
                    &config.window,
                )?);
            }
            enc.push(stage);
        }
        let merges = vec![
            PatchMerge::build(&mut store, "merge1", dims[0])?,
            PatchMerge::build(&mut store, "merge2", dims[1])?,
        ];
        let mut dec = Vec::new();
        for k in (0..STAGES).rev() {
            let mut stage = Vec::new();
            for b in 0..config.dec_depths[k] / 2 {
                stage.push(DecoderBlock::build(
                    &mut store,
                    &format!("dec{}.b{b}", k + 1),
                    dims[k],
                    config.heads[k],
                    &config.window,
                )?);
            }
            dec.push(stage);
        }
        let expands = vec![
            PatchExpand::build(&mut store, "up3", dims[2])?,
            PatchExpand::build(&mut store, "up2", dims[1])?,
        ];
        let head = ProjectionHead::build(
            &mut store,
            "head",
            spec,
            config.target_vars,
            config.t_in,
            config.t_out,
        )?;
        let model = Model { config, store, embed, enc, merges, dec, expands, head };
        model.assert_skip_grids()?;
        Ok(model)
    }

    /// Every decoder stage must attend over a skip of its own grid; with the
    /// mirrored layout and post-expand crops this holds for any input size,
    /// checked here on the canonical 256x256 extents.
    fn assert_skip_grids(&self) -> Result<()> {
        let g1 = self.config.token_grid(self.config.t_in, 256, 256);
        let halve = |g: [usize; 3]| [g[0], g[1].div_ceil(2), g[2].div_ceil(2)];
        let (g2, g3) = (halve(g1), halve(halve(g1)));
        let enc_out = [g1, g2, g3];
        // Decoder stage-k input grid: stage 3 consumes the encoder output
        // directly; stages 2 and 1 receive an expanded grid cropped to the
        // matching skip.
        let dec_in = [g1, g2, g3];
        for k in 0..STAGES {
            if enc_out[k] != dec_in[k] {
                return Err(Error::config(format!(
                    "stage {} skip grid {:?} does not match decoder input {:?}",
                    k + 1,
                    enc_out[k],
                    dec_in[k]
                )));
            }
        }
        Ok(())
    }

    fn crop_to(&self, x: Tensor<E>, like: &[usize]) -> Result<Tensor<E>> {
        if x.shape() == like {
            return Ok(x);
        }
        let start = vec![0; x.ndim()];
        x.slice(&start, like)
    }

    /// [B, in_channels, t_in, H, W] frames to [B, target_vars, t_out, H, W]
    /// predictions in (0, 1).
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.ndim() != 5 {
            return Err(Error::shape(format!("input frames are [B, C, T, H, W], got {:?}", x.shape())));
        }
        if x.shape()[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                x.shape()[1]
            )));
        }
        if x.shape()[2] != self.config.t_in {
            return Err(Error::shape(format!(
                "model expects {} input frames, got {}",
                self.config.t_in,
                x.shape()[2]
            )));
        }
        let spec = &self.config.window;
        let frames = [self.config.t_in, x.shape()[3], x.shape()[4]];
        let mut z = self.embed.forward(x)?;
        let mut skips = Vec::with_capacity(STAGES);
        for (k, stage) in self.enc.iter().enumerate() {
            for block in stage {
                z = block.forward(&z, spec)?;
            }
            skips.push(z.clone());
            if k + 1 < STAGES {
                z = self.merges[k].forward(&z)?;
            }
        }
        for (i, stage) in self.dec.iter().enumerate() {
            let skip = &skips[STAGES - 1 - i];
            z = self.crop_to(z, skip.shape())?;
            for block in stage {
                z = block.forward(&z, skip, spec)?;
            }
            if i + 1 < STAGES {
                z = self.expands[i].forward(&z)?;
            }
        }
        self.head.forward(&z, frames)
    }
}
