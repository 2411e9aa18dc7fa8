//! Deterministic moving-blob world. Every frame is a closed-form function of
//! (seed, split, sample index, time), so a zero-velocity zero-diffusion world
//! reproduces its last input frame bit-for-bit in every future frame.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

use super::Sample;

pub const STATIC_CHANNELS: usize = 3;
pub const DYNAMIC_CHANNELS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    /// Max per-axis drift speed in pixels per frame; each blob draws from
    /// [-velocity, velocity].
    pub velocity: f64,
    /// Relative growth of blob variance per frame; 0 freezes the shapes.
    pub diffusion: f64,
    pub missing_prob: f64,
    pub t_in: usize,
    pub t_out: usize,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        SynthParams {
            height,
            width,
            blobs: 3,
            velocity: 1.5,
            diffusion: 0.4,
            missing_prob: 0.05,
            t_in: 4,
            t_out: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!(
                "grid must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.missing_prob) {
            return Err(Error::config(format!(
                "missing_prob must lie in [0,1], got {}",
                self.missing_prob
            )));
        }
        if self.blobs == 0 {
            return Err(Error::config("need at least one blob"));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::config("t_in and t_out must be >= 1"));
        }
        for (name, v) in [("velocity", self.velocity), ("diffusion", self.diffusion)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    amp: f64,
    r2: f64,
}

fn wrapped(d: f64, extent: f64) -> f64 {
    let d = d.rem_euclid(extent);
    d.min(extent - d)
}

pub fn generate_sequence(params: &SynthParams, split: &str, index: u64) -> Result<Sample> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let (hf, wf) = (h as f64, w as f64);
    let frames = params.t_in + params.t_out;

    let mut bs = Stream::new(params.seed, &format!("sample.{split}.{index}.blobs"));
    let r_lo = (h.min(w) as f64) / 16.0;
    let r_hi = (h.min(w) as f64) / 7.0;
    let blobs: Vec<Blob> = (0..params.blobs)
        .map(|_| {
            let r = bs.uniform_in(r_lo, r_hi);
            Blob {
                cx: bs.uniform_in(0.0, wf),
                cy: bs.uniform_in(0.0, hf),
                vx: bs.uniform_in(-params.velocity, params.velocity),
                vy: bs.uniform_in(-params.velocity, params.velocity),
                amp: bs.uniform_in(0.7, 1.2),
                r2: r * r,
            }
        })
        .collect();

    let mut fs = Stream::new(params.seed, &format!("sample.{split}.{index}.front"));
    let front_c0 = fs.uniform_in(0.25 * hf, 0.75 * hf);
    let front_v = fs.uniform_in(-params.velocity, params.velocity);
    let front_w = fs.uniform_in(2.0, 6.0);

    let blob_sum = |x: f64, y: f64, t: f64| -> f64 {
        let mut s = 0.0;
        for b in &blobs {
            let var = b.r2 * (1.0 + params.diffusion * t);
            let dx = wrapped(x - (b.cx + b.vx * t), wf);
            let dy = wrapped(y - (b.cy + b.vy * t), hf);
            s += b.amp * (b.r2 / var) * (-(dx * dx + dy * dy) / (2.0 * var)).exp();
        }
        s
    };

    // All four variables for all t_in + t_out frames, [4, frames, H, W].
    let mut all = vec![0.0f32; 4 * frames * h * w];
    let plane = h * w;
    for t in 0..frames {
        let tf = t as f64;
        let front_p = front_c0 + front_v * tf;
        for i in 0..h {
            for j in 0..w {
                let s = blob_sum(j as f64, i as f64, tf);
                let temp = 0.15 + 0.7 * s / (1.0 + s);
                let crr = ((s - 0.8) * 1.25).clamp(0.0, 1.0);
                let asii = 1.0 / (1.0 + (-(i as f64 - front_p) / front_w).exp());
                let cma = 1.0 / (1.0 + (-(s - 0.55) / 0.06).exp());
                let px = i * w + j;
                all[t * plane + px] = temp as f32;
                all[(frames + t) * plane + px] = crr as f32;
                all[(2 * frames + t) * plane + px] = asii as f32;
                all[(3 * frames + t) * plane + px] = cma as f32;
            }
        }
    }

    let grab = |t0: usize, t1: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(4 * (t1 - t0) * plane);
        for v in 0..4 {
            out.extend_from_slice(&all[(v * frames + t0) * plane..(v * frames + t1) * plane]);
        }
        out
    };
    let past = Tensor::from_vec(&[4, params.t_in, h, w], grab(0, params.t_in))?;
    let target = Tensor::from_vec(&[4, params.t_out, h, w], grab(params.t_in, frames))?;

    let mut ms = Stream::new(params.seed, &format!("sample.{split}.{index}.mask"));
    let mask: Vec<f32> = (0..4 * params.t_out * plane)
        .map(|_| if ms.chance(params.missing_prob) { 0.0 } else { 1.0 })
        .collect();
    let mask = Tensor::from_vec(&[4, params.t_out, h, w], mask)?;

    let dynamic = derive_dynamic(&past)?;
    let statics = region_statics(params)?;
    Ok(Sample { past, dynamic, statics, target, mask })
}

/// Three surrogates per target variable: a toroidal spatial shift, a 3x3
/// toroidal box blur, and a one-frame lag. They are honest functions of the
/// target history, so the extra channels carry related information.
pub fn derive_dynamic(past: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = past.shape().to_vec();
    let (t_in, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let data = past.to_vec();
    let mut out = Vec::with_capacity(3 * data.len());
    for v in 0..s[0] {
        let var = &data[v * t_in * plane..(v + 1) * t_in * plane];
        for t in 0..t_in {
            let f = &var[t * plane..(t + 1) * plane];
            for i in 0..h {
                for j in 0..w {
                    out.push(f[i * w + (j + 3) % w]);
                }
            }
        }
        for t in 0..t_in {
            let f = &var[t * plane..(t + 1) * plane];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f32;
                    for di in [h - 1, 0, 1] {
                        for dj in [w - 1, 0, 1] {
                            acc += f[((i + di) % h) * w + (j + dj) % w];
                        }
                    }
                    out.push(acc / 9.0);
                }
            }
        }
        for t in 0..t_in {
            let f = &var[t.saturating_sub(1) * plane..(t.saturating_sub(1) + 1) * plane];
            out.extend_from_slice(f);
        }
    }
    Tensor::from_vec(&[DYNAMIC_CHANNELS, t_in, h, w], out)
}

/// Elevation bumps plus latitude/longitude ramps. Keyed by the world seed
/// alone: every sample of one synthetic region shares the same terrain.
pub fn region_statics(params: &SynthParams) -> Result<Tensor<f32>> {
    let (h, w) = (params.height, params.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rs = Stream::new(params.seed, "static");
    let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rs.uniform_in(0.0, wf),
                rs.uniform_in(0.0, hf),
                rs.uniform_in(0.5, 1.0),
                rs.uniform_in(hf.min(wf) / 10.0, hf.min(wf) / 4.0),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            let mut e = 0.0;
            for &(cx, cy, amp, r) in &bumps {
                let dx = wrapped(j as f64 - cx, wf);
                let dy = wrapped(i as f64 - cy, hf);
                e += amp * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
            }
            out.push((0.1 + 0.8 * e / (1.0 + e)) as f32);
        }
    }
    for i in 0..h {
        for _ in 0..w {
            out.push(i as f32 / (h - 1) as f32);
        }
    }
    for _ in 0..h {
        for j in 0..w {
            out.push(j as f32 / (w - 1) as f32);
        }
    }
    Tensor::from_vec(&[STATIC_CHANNELS, h, w], out)
}
