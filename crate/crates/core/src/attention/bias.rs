//! Relative position bias indexing. The learned table has one row per
//! distinct 3-D offset between two tokens of a window; this module computes
//! the row index for every ordered token pair.

use super::window::WindowSpec;
use std::rc::Rc;

/// Number of distinct (dt, dh, dw) offsets = rows of the bias table.
pub fn bias_rows(spec: &WindowSpec) -> usize {
    spec.window.iter().map(|&w| 2 * w - 1).product()
}

/// Window-local coordinates in token order (t-major, then h, then w).
fn coords(spec: &WindowSpec) -> Vec<[usize; 3]> {
    let [wt, wh, ww] = spec.window;
    let mut out = Vec::with_capacity(wt * wh * ww);
    for t in 0..wt {
        for h in 0..wh {
            for w in 0..ww {
                out.push([t, h, w]);
            }
        }
    }
    out
}

/// Row index per ordered pair (i, j), flattened as i*N + j. The offset of
/// token j from token i is shifted per axis by w-1 to be nonnegative, then
/// mixed-radix flattened over radices (2w_t-1, 2w_h-1, 2w_w-1).
pub fn bias_index(spec: &WindowSpec) -> Rc<Vec<usize>> {
    let cs = coords(spec);
    let n = cs.len();
    let radices: Vec<usize> = spec.window.iter().map(|&w| 2 * w - 1).collect();
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut flat = 0usize;
            for ax in 0..3 {
                let off = cs[j][ax] + spec.window[ax] - 1 - cs[i][ax];
                flat = flat * radices[ax] + off;
            }
            idx.push(flat);
        }
    }
    Rc::new(idx)
}
