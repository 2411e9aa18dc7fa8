//! Persistence-weighted multitask MSE: the validation score, the training
//! loss (same arithmetic, tensor-valued), and the persistence baseline it is
//! normalized against.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Target variables with the MSE a frozen-last-frame predictor attains on
/// them. The scoring weight is the reciprocal, so persistence scores 1.0 on
/// every variable by construction.
pub const VARIABLES: [(&str, f64); 4] = [
    ("temperature", 0.03163512),
    ("crr_intensity", 0.00024158),
    ("asii_turb_trop_prob", 0.00703378),
    ("cma", 0.19160305),
];

pub fn variable_names() -> Vec<&'static str> {
    VARIABLES.iter().map(|(n, _)| *n).collect()
}

pub fn persistence_mse(name: &str) -> Result<f64> {
    VARIABLES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::UnknownVariable(name.to_string()))
}

/// w(v) = 1 / persistence MSE of v.
pub fn persistence_weight(name: &str) -> Result<f64> {
    Ok(1.0 / persistence_mse(name)?)
}

/// Per-(sample, variable) sums of masked squared error and of the mask,
/// accumulated at 64 bits. `vars` is the extent of the variable axis and
/// `rest` the number of scalars per (sample, variable) cell.
fn accumulate<E: Scalar>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    mask: &Tensor<E>,
    samples: usize,
    vars: usize,
    rest: usize,
) -> Result<Vec<(f64, f64)>> {
    let (p, t, m) = (pred.to_f64_vec(), target.to_f64_vec(), mask.to_f64_vec());
    let mut sums = vec![(0.0, 0.0); samples * vars];
    for (i, ((pv, tv), mv)) in p.iter().zip(&t).zip(&m).enumerate() {
        if *mv != 0.0 && *mv != 1.0 {
            return Err(Error::contract(format!(
                "validity masks are 0/1, found {mv} at flat index {i}"
            )));
        }
        let cell = &mut sums[i / rest];
        let d = pv - tv;
        cell.0 += mv * d * d;
        cell.1 += mv;
    }
    Ok(sums)
}

fn check_shapes<E: Scalar>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    mask: &Tensor<E>,
    ndim: usize,
    vars: usize,
) -> Result<()> {
    for (label, t) in [("prediction", pred), ("target", target), ("mask", mask)] {
        if t.shape() != pred.shape() || t.ndim() != ndim {
            return Err(Error::shape(format!(
                "{label} shape {:?} does not match prediction {:?} with {ndim} axes",
                t.shape(),
                pred.shape()
            )));
        }
    }
    let axis = ndim - 4;
    if pred.shape()[axis] != vars {
        return Err(Error::shape(format!(
            "expected {vars} variables on axis {axis}, got {:?}",
            pred.shape()
        )));
    }
    Ok(())
}

/// Squared error per variable, averaged over the valid pixels of one sample.
/// Inputs are [V, T, H, W]; the mask selects scored entries.
pub fn masked_mse<E: Scalar>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    mask: &Tensor<E>,
) -> Result<Vec<f64>> {
    let vars = pred.shape()[0];
    check_shapes(pred, target, mask, 4, vars)?;
    let rest: usize = pred.shape()[1..].iter().product();
    let sums = accumulate(pred, target, mask, 1, vars, rest)?;
    sums.iter()
        .enumerate()
        .map(|(v, (sq, cnt))| {
            if *cnt == 0.0 {
                Err(Error::numeric(format!("variable {v} has no valid pixels to score")))
            } else {
                Ok(sq / cnt)
            }
        })
        .collect()
}

/// Mean over samples of w(v) * masked MSE, one entry per variable in
/// `names`. Inputs are [B, V, T, H, W] with V == names.len().
pub fn per_variable_scores<E: Scalar>(
    names: &[&str],
    pred: &Tensor<E>,
    target: &Tensor<E>,
    mask: &Tensor<E>,
) -> Result<Vec<f64>> {
    check_shapes(pred, target, mask, 5, names.len())?;
    let (b, v) = (pred.shape()[0], pred.shape()[1]);
    let rest: usize = pred.shape()[2..].iter().product();
    let sums = accumulate(pred, target, mask, b, v, rest)?;
    let mut out = vec![0.0; v];
    for (i, (sq, cnt)) in sums.iter().enumerate() {
        if *cnt == 0.0 {
            return Err(Error::numeric(format!(
                "sample {} has no valid pixels for variable {}",
                i / v,
                names[i % v]
            )));
        }
        out[i % v] += persistence_weight(names[i % v])? * sq / cnt / b as f64;
    }
    Ok(out)
}

/// The competition-style score: mean over samples and variables of the
/// persistence-weighted masked MSE. 1.0 marks persistence-level error.
pub fn score<E: Scalar>(
    names: &[&str],
    pred: &Tensor<E>,
    target: &Tensor<E>,
    mask: &Tensor<E>,
) -> Result<f64> {
    let per = per_variable_scores(names, pred, target, mask)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Differentiable twin of [`score`]: folds the weighting and every
/// normalizer into one constant coefficient map, so the scalar it returns
/// equals the score of the same batch and backpropagates through `pred`.
pub fn training_loss<E: Scalar>(
    names: &[&str],
    pred: &Tensor<E>,
    target: &Tensor<E>,
    mask: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_shapes(pred, target, mask, 5, names.len())?;
    let (b, v) = (pred.shape()[0], pred.shape()[1]);
    let rest: usize = pred.shape()[2..].iter().product();
    let sums = accumulate(pred, target, mask, b, v, rest)?;
    let m = mask.to_f64_vec();
    let mut coeff = vec![E::ZERO; m.len()];
    for (i, mv) in m.iter().enumerate() {
        let cell = i / rest;
        let (_, cnt) = sums[cell];
        if cnt == 0.0 {
            return Err(Error::numeric(format!(
                "sample {} has no valid pixels for variable {}",
                cell / v,
                names[cell % v]
            )));
        }
        let w = persistence_weight(names[cell % v])?;
        coeff[i] = E::from_f64(mv * w / (cnt * (b * v) as f64));
    }
    let coeff = Tensor::from_vec(pred.shape(), coeff)?;
    let diff = pred.sub(target)?;
    Ok(diff.mul(&diff)?.mul(&coeff)?.sum_all())
}

/// Freezes the last observed frame of every variable across `t_out` future
/// steps. Input [B, V, T_in, H, W] (T_in >= 1) to [B, V, t_out, H, W].
pub fn persistence_baseline<E: Scalar>(input: &Tensor<E>, t_out: usize) -> Result<Tensor<E>> {
    if input.ndim() != 5 || input.shape()[2] == 0 {
        return Err(Error::shape(format!(
            "baseline expects [B, V, T>=1, H, W] frames, got {:?}",
            input.shape()
        )));
    }
    let s = input.shape().to_vec();
    let data = input.to_vec();
    let (frame, plane) = (s[3] * s[4], s[2] * s[3] * s[4]);
    let mut out = Vec::with_capacity(s[0] * s[1] * t_out * frame);
    for bv in 0..s[0] * s[1] {
        let last = &data[bv * plane + (s[2] - 1) * frame..bv * plane + s[2] * frame];
        for _ in 0..t_out {
            out.extend_from_slice(last);
        }
    }
    Tensor::from_vec(&[s[0], s[1], t_out, s[3], s[4]], out)
}
