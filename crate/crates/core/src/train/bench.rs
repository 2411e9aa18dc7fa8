//! Attention scaling measurements.
//!
//! Two contenders over the same token budget: the windowed production path,
//! whose cost grows linearly in token count because every window is a fixed
//! 49-token problem, and a dense global-attention baseline whose score matrix
//! is N x N. Median wall times over log-spaced grids feed a log-log slope fit.

use std::time::Instant;

use crate::attention::{wmsa, AttentionParams, WindowSpec};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{no_grad, ParamStore, Tensor};

/// Dense multi-head self-attention over the flattened token list. No
/// windows, no relative-position bias, no mask; every token attends to all
/// others. This is the quadratic baseline the windowed path is measured
/// against.
pub fn global_attention(x: &Tensor<f32>, params: &AttentionParams<f32>) -> Result<Tensor<f32>> {
    let shape = x.shape().to_vec();
    if shape.len() != 5 || shape[4] != params.dim {
        return Err(Error::shape(format!(
            "global attention input {:?} does not carry channel dim {}",
            shape, params.dim
        )));
    }
    let (b, n) = (shape[0], shape[1] * shape[2] * shape[3]);
    let (h, dh) = (params.heads, params.dim / params.heads);
    let flat = x.reshape(&[b, n, params.dim])?;
    let split = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        t.reshape(&[b, n, h, dh])?.permute(&[0, 2, 1, 3])
    };
    let q = split(&params.q.forward(&flat)?)?;
    let k = split(&params.k.forward(&flat)?)?;
    let v = split(&params.v.forward(&flat)?)?;
    let attn = q.matmul_nt(&k)?.scale(1.0 / (dh as f64).sqrt()).softmax_lastdim();
    let ctx = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, params.dim])?;
    params.o.forward(&ctx)?.reshape(&shape)
}

#[derive(Debug, Clone)]
pub struct BenchPoint {
    pub grid: [usize; 3],
    pub tokens: usize,
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub windowed: Vec<BenchPoint>,
    pub global: Vec<BenchPoint>,
    pub windowed_slope: f64,
    pub global_slope: f64,
}

/// Least-squares slope of ln(millis) against ln(tokens).
pub fn loglog_slope(points: &[BenchPoint]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.tokens as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.millis.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..xs.len() {
        num += (xs[i] - xm) * (ys[i] - ym);
        den += (xs[i] - xm) * (xs[i] - xm);
    }
    num / den
}

fn random_tokens(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut s = Stream::new(seed, "bench");
    let data: Vec<f32> = (0..shape.iter().product()).map(|_| s.normal() as f32 * 0.5).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn median(mut times: Vec<f64>) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?; // warm-up, untimed
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Times both paths and fits slopes. `windowed_grids` should span a decade or
/// so of token counts; `global_grids` must stay small because the score
/// matrix alone is tokens^2 floats.
pub fn bench_attention(
    windowed_grids: &[[usize; 3]],
    global_grids: &[[usize; 3]],
    dim: usize,
    heads: usize,
    reps: usize,
) -> Result<BenchReport> {
    no_grad(|| {
        let spec = WindowSpec::default();
        let mut store: ParamStore<f32> = ParamStore::new(17);
        let params = AttentionParams::build(&mut store, "bench", dim, heads, &spec)?;

        let mut windowed = Vec::new();
        for (i, &g) in windowed_grids.iter().enumerate() {
            let x = random_tokens(100 + i as u64, &[1, g[0], g[1], g[2], dim]);
            let ms = time_median(reps, || wmsa(&x, &params, &spec, true).map(|_| ()))?;
            windowed.push(BenchPoint { grid: g, tokens: g[0] * g[1] * g[2], millis: ms });
        }

        let mut global = Vec::new();
        for (i, &g) in global_grids.iter().enumerate() {
            let x = random_tokens(200 + i as u64, &[1, g[0], g[1], g[2], dim]);
            let ms = time_median(reps, || global_attention(&x, &params).map(|_| ()))?;
            global.push(BenchPoint { grid: g, tokens: g[0] * g[1] * g[2], millis: ms });
        }

        let windowed_slope = loglog_slope(&windowed);
        let global_slope = loglog_slope(&global);
        Ok(BenchReport { windowed, global, windowed_slope, global_slope })
    })
}

/// Grids used by the CLI and the scaling acceptance check: window volume is
/// held at the default 49 while token count sweeps 4k to 64k; the global
/// baseline stops at 4k tokens.
pub fn standard_grids() -> (Vec<[usize; 3]>, Vec<[usize; 3]>) {
    let windowed =
        vec![[1, 64, 64], [1, 91, 91], [1, 128, 128], [1, 181, 181], [1, 256, 256]];
    let global = vec![[1, 16, 16], [1, 23, 23], [1, 32, 32], [1, 45, 45], [1, 64, 64]];
    (windowed, global)
}
