//! Window partitioning with cyclic shift, high-side padding and the additive
//! seam mask.
//!
//! Partition order: roll the token grid by -shift over its original extents,
//! zero-pad each spatial axis up to a window multiple, then tile. The mask
//! blocks token pairs whose relative offset inside a window differs from
//! their offset before the roll (seam crossings), and isolates padding.

use super::{Grid, MASK_NEG};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowSpec {
    pub fn new(window: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        for ax in 0..3 {
            if window[ax] == 0 {
                return Err(Error::config(format!("window extents must be >= 1, got {window:?}")));
            }
            if shift[ax] >= window[ax] {
                return Err(Error::config(format!(
                    "shift {shift:?} must be < window {window:?} on every axis"
                )));
            }
        }
        Ok(WindowSpec { window, shift })
    }

    /// Tokens per window.
    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { window: [1, 7, 7], shift: [0, 2, 2] }
    }
}

/// Everything window_reverse needs to invert a partition exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadRecord {
    pub batch: usize,
    pub channels: usize,
    pub grid: Grid,
    pub padded: [usize; 3],
    /// Effective shift that was applied (zeros when not shifted).
    pub shift: [usize; 3],
}

impl PadRecord {
    pub fn window_count(&self, spec: &WindowSpec) -> usize {
        (0..3).map(|ax| self.padded[ax] / spec.window[ax]).product()
    }
}

/// Additive attention mask, one [N, N] block per window. `None` data means
/// all-zero (every pair permitted).
pub struct AttentionMask<E: Scalar> {
    pub windows: usize,
    pub tokens: usize,
    data: Option<Tensor<E>>,
}

impl<E: Scalar> AttentionMask<E> {
    pub fn all_zero(windows: usize, tokens: usize) -> Self {
        AttentionMask { windows, tokens, data: None }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.is_none()
    }

    /// Mask tensor shaped [nW, 1, N, N] for broadcasting over batch and
    /// heads; materializes zeros for the all-zero case.
    pub fn tensor(&self) -> Result<Tensor<E>> {
        match &self.data {
            Some(t) => Ok(t.clone()),
            None => Tensor::zeros(&[self.windows, 1, self.tokens, self.tokens]),
        }
    }

    pub fn data(&self) -> Option<&Tensor<E>> {
        self.data.as_ref()
    }
}

fn effective_shift(spec: &WindowSpec, shifted: bool) -> [usize; 3] {
    if shifted {
        spec.shift
    } else {
        [0; 3]
    }
}

/// Wrap-group per rolled coordinate: tokens that wrapped around the axis end
/// under the roll land in group 1, the rest in group 0. Pads get u8::MAX.
fn axis_groups(orig: usize, padded: usize, shift: usize) -> Vec<u8> {
    (0..padded)
        .map(|c| {
            if c >= orig {
                u8::MAX
            } else if c + shift >= orig {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Builds the additive mask, or None when every pair is permitted.
fn build_mask<E: Scalar>(
    grid: &Grid,
    padded: [usize; 3],
    spec: &WindowSpec,
    shift: [usize; 3],
) -> Result<Option<Tensor<E>>> {
    let orig = grid.extents();
    let needs = (0..3).any(|ax| padded[ax] != orig[ax] || shift[ax] != 0);
    if !needs {
        return Ok(None);
    }
    let gt = axis_groups(orig[0], padded[0], shift[0]);
    let gh = axis_groups(orig[1], padded[1], shift[1]);
    let gw = axis_groups(orig[2], padded[2], shift[2]);
    // Region id per token: pad is its own region; otherwise the three wrap
    // groups combine. Pairs may attend iff ids match.
    let id = |t: usize, h: usize, w: usize| -> u16 {
        if gt[t] == u8::MAX || gh[h] == u8::MAX || gw[w] == u8::MAX {
            u16::MAX
        } else {
            (gt[t] as u16) * 4 + (gh[h] as u16) * 2 + gw[w] as u16
        }
    };
    let [wt, wh, ww] = spec.window;
    let (nt, nh, nw) = (padded[0] / wt, padded[1] / wh, padded[2] / ww);
    let n = spec.tokens();
    let wins = nt * nh * nw;
    let neg = E::from_f64(MASK_NEG);
    let mut data = vec![E::ZERO; wins * n * n];
    let mut ids = vec![0u16; n];
    let mut wi = 0usize;
    for bt in 0..nt {
        for bh in 0..nh {
            for bw in 0..nw {
                let mut s = 0usize;
                for it in 0..wt {
                    for ih in 0..wh {
                        for iw in 0..ww {
                            ids[s] = id(bt * wt + it, bh * wh + ih, bw * ww + iw);
                            s += 1;
                        }
                    }
                }
                let block = &mut data[wi * n * n..(wi + 1) * n * n];
                for i in 0..n {
                    for j in 0..n {
                        if ids[i] != ids[j] {
                            block[i * n + j] = neg;
                        }
                    }
                }
                wi += 1;
            }
        }
    }
    Ok(Some(Tensor::from_vec(&[wins, 1, n, n], data)?))
}

/// Splits [B, T, H, W, C] tokens into non-overlapping windows
/// [B, nW, N, C], rolling by -shift first when `shifted`. Returns the seam
/// mask and the record needed to invert the layout.
pub fn window_partition<E: Scalar>(
    x: &Tensor<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<(Tensor<E>, AttentionMask<E>, PadRecord)> {
    let (wins, rec) = partition_layout(x, spec, shifted)?;
    let mask = build_mask(&rec.grid, rec.padded, spec, rec.shift)?;
    let n = spec.tokens();
    let mask = match mask {
        Some(t) => AttentionMask { windows: rec.window_count(spec), tokens: n, data: Some(t) },
        None => AttentionMask::all_zero(rec.window_count(spec), n),
    };
    Ok((wins, mask, rec))
}

/// Partition without the mask (reused for the K/V operand, whose layout and
/// mask are identical to the query's).
pub fn partition_layout<E: Scalar>(
    x: &Tensor<E>,
    spec: &WindowSpec,
    shifted: bool,
) -> Result<(Tensor<E>, PadRecord)> {
    let grid = Grid::of_tokens(x.shape())?;
    let batch = x.shape()[0];
    let channels = x.shape()[4];
    let shift = effective_shift(spec, shifted);
    let orig = grid.extents();
    let padded: [usize; 3] =
        std::array::from_fn(|ax| orig[ax].div_ceil(spec.window[ax]) * spec.window[ax]);

    let mut y = if shift.iter().any(|&s| s != 0) {
        x.roll(&[0, -(shift[0] as isize), -(shift[1] as isize), -(shift[2] as isize), 0])?
    } else {
        x.clone()
    };
    if padded != orig {
        y = y.pad_end(&[0, padded[0] - orig[0], padded[1] - orig[1], padded[2] - orig[2], 0])?;
    }
    let [wt, wh, ww] = spec.window;
    let (nt, nh, nw) = (padded[0] / wt, padded[1] / wh, padded[2] / ww);
    let wins = y
        .reshape(&[batch, nt, wt, nh, wh, nw, ww, channels])?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[batch, nt * nh * nw, wt * wh * ww, channels])?;
    let rec = PadRecord { batch, channels, grid, padded, shift };
    Ok((wins, rec))
}

/// Exact inverse of `window_partition`: untile, crop padding, unroll.
pub fn window_reverse<E: Scalar>(
    windows: &Tensor<E>,
    rec: &PadRecord,
    spec: &WindowSpec,
) -> Result<Tensor<E>> {
    let [wt, wh, ww] = spec.window;
    let (nt, nh, nw) = (rec.padded[0] / wt, rec.padded[1] / wh, rec.padded[2] / ww);
    let expect = [rec.batch, nt * nh * nw, wt * wh * ww, rec.channels];
    if windows.shape() != expect {
        return Err(Error::contract(format!(
            "window_reverse: windows shape {:?} does not match pad record {expect:?}",
            windows.shape()
        )));
    }
    let y = windows
        .reshape(&[rec.batch, nt, nh, nw, wt, wh, ww, rec.channels])?
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape(&[rec.batch, rec.padded[0], rec.padded[1], rec.padded[2], rec.channels])?;
    let orig = rec.grid.extents();
    let y = if rec.padded != orig {
        y.slice(
            &[0; 5],
            &[rec.batch, orig[0], orig[1], orig[2], rec.channels],
        )?
    } else {
        y
    };
    if rec.shift.iter().any(|&s| s != 0) {
        y.roll(&[0, rec.shift[0] as isize, rec.shift[1] as isize, rec.shift[2] as isize, 0])
    } else {
        Ok(y)
    }
}
