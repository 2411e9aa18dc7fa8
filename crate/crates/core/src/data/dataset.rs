//! Dataset directory layout: one `sample_<split>_<index>.w4ct` file per
//! sample holding five concatenated W4CT records (past targets, dynamic
//! surrogates, statics, future targets, mask), plus a plain-text manifest
//! naming the files and the channel plan.

use std::path::{Path, PathBuf};

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

use super::format::{decode_from, encode_into};
use super::synth::{generate_sequence, SynthParams, DYNAMIC_CHANNELS, STATIC_CHANNELS};
use super::Sample;

pub const MANIFEST: &str = "manifest.txt";

pub fn sample_file(split: &str, index: usize) -> String {
    format!("sample_{split}_{index:05}.w4ct")
}

pub fn write_sample(path: &Path, s: &Sample) -> Result<()> {
    let mut buf = Vec::new();
    for t in [&s.past, &s.dynamic, &s.statics, &s.target, &s.mask] {
        encode_into(&mut buf, t);
    }
    Ok(std::fs::write(path, buf)?)
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    let buf = std::fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    let past = decode_from(&mut r)?;
    let dynamic = decode_from(&mut r)?;
    let statics = decode_from(&mut r)?;
    let target = decode_from(&mut r)?;
    let mask = decode_from(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format(format!(
            "sample file has {} trailing bytes after its five records",
            r.remaining()
        )));
    }
    for (what, t, dims) in [
        ("past", &past, 4),
        ("dynamic", &dynamic, 4),
        ("statics", &statics, 3),
        ("target", &target, 4),
        ("mask", &mask, 4),
    ] {
        if t.ndim() != dims {
            return Err(Error::format(format!(
                "{what} record has {} axes, expected {dims}",
                t.ndim()
            )));
        }
    }
    Ok(Sample { past, dynamic, statics, target, mask })
}

/// Generates `count` samples for `split` into `dir` and appends them to the
/// manifest. Returns the written paths.
pub fn write_split(
    dir: &Path,
    split: &str,
    count: usize,
    params: &SynthParams,
) -> Result<Vec<PathBuf>> {
    params.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    let mut lines = String::new();
    for i in 0..count {
        let s = generate_sequence(params, split, i as u64)?;
        let p = dir.join(sample_file(split, i));
        write_sample(&p, &s)?;
        lines.push_str(&format!("{}\n", sample_file(split, i)));
        paths.push(p);
    }
    let manifest = dir.join(MANIFEST);
    let mut text = if manifest.exists() {
        std::fs::read_to_string(&manifest)?
    } else {
        "# records per sample file: past[4,t_in,H,W] dynamic[12,t_in,H,W] \
         statics[3,H,W] target[4,t_out,H,W] mask[4,t_out,H,W]\n\
         # input channel order: targets, statics, dynamics\n"
            .to_string()
    };
    text.push_str(&lines);
    std::fs::write(&manifest, text)?;
    Ok(paths)
}

/// Reads every `sample_<split>_*.w4ct` in `dir`, ordered by index.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let prefix = format!("sample_{split}_");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".w4ct"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(format!(
            "no {split:?} samples found in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| read_sample(p)).collect()
}

/// Channel groups implied by a model's input width: the 4 targets always,
/// plus statics and/or dynamics when the count says they fit.
fn channel_plan(config: &ModelConfig) -> Result<(bool, bool)> {
    let t = config.target_vars;
    let (s, d) = (STATIC_CHANNELS, DYNAMIC_CHANNELS);
    match config.in_channels {
        c if c == t => Ok((false, false)),
        c if c == t + s => Ok((true, false)),
        c if c == t + d => Ok((false, true)),
        c if c == t + s + d => Ok((true, true)),
        c => Err(Error::config(format!(
            "in_channels {c} matches no channel plan; valid: {t} (targets), {} (+statics), \
             {} (+dynamics), {} (both)",
            t + s,
            t + d,
            t + s + d
        ))),
    }
}

/// Stacks samples into model-ready tensors: input [B, C_in, t_in, H, W]
/// (statics tiled over time), target and mask [B, 4, t_out, H, W].
pub fn make_batch(
    samples: &[&Sample],
    config: &ModelConfig,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    if samples.is_empty() {
        return Err(Error::contract("cannot batch an empty sample list"));
    }
    let (want_static, want_dynamic) = channel_plan(config)?;
    let shape = samples[0].past.shape().to_vec();
    let (t_in, h, w) = (shape[1], shape[2], shape[3]);
    if t_in != config.t_in {
        return Err(Error::shape(format!(
            "samples carry {t_in} past frames, model wants {}",
            config.t_in
        )));
    }
    let plane = h * w;
    let b = samples.len();
    let mut input = Vec::with_capacity(b * config.in_channels * t_in * plane);
    let mut target = Vec::new();
    let mut mask = Vec::new();
    for s in samples {
        if s.past.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "ragged batch: sample shapes {:?} vs {:?}",
                s.past.shape(),
                shape
            )));
        }
        input.extend_from_slice(&s.past.to_vec());
        if want_static {
            let st = s.statics.to_vec();
            for c in 0..STATIC_CHANNELS {
                for _ in 0..t_in {
                    input.extend_from_slice(&st[c * plane..(c + 1) * plane]);
                }
            }
        }
        if want_dynamic {
            input.extend_from_slice(&s.dynamic.to_vec());
        }
        target.extend_from_slice(&s.target.to_vec());
        mask.extend_from_slice(&s.mask.to_vec());
    }
    let t_out = samples[0].target.shape()[1];
    Ok((
        Tensor::from_vec(&[b, config.in_channels, t_in, h, w], input)?,
        Tensor::from_vec(&[b, config.target_vars, t_out, h, w], target)?,
        Tensor::from_vec(&[b, config.target_vars, t_out, h, w], mask)?,
    ))
}
