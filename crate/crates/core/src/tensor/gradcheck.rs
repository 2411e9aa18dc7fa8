//! Finite-difference gradient verification. Central differences in f64 sit
//! well below the 1e-5 acceptance threshold, so disagreement means a wrong
//! backward rule rather than numerical noise.

use super::Tensor;
use crate::error::{Error, Result};

/// Relative error with an absolute floor, symmetric in both arguments.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

pub struct GradCheck {
    /// Central-difference step, scaled per element by max(1, |x|).
    pub eps: f64,
    /// Cap on probed elements per parameter; evenly strided when exceeded.
    pub max_probes: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-4, max_probes: 64 }
    }
}

pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradCheck {
    /// Compares analytic gradients of `f` (a scalar-producing forward pass
    /// over the given leaves) against central differences. Returns one report
    /// per parameter.
    pub fn run(
        &self,
        params: &[(String, Tensor<f64>)],
        mut f: impl FnMut() -> Result<Tensor<f64>>,
    ) -> Result<Vec<ParamReport>> {
        for (name, p) in params {
            if !p.requires_grad() {
                return Err(Error::contract(format!("gradcheck leaf {name} is untracked")));
            }
            p.zero_grad();
        }
        let loss = f()?;
        loss.backward()?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|(name, p)| {
                p.grad().ok_or_else(|| {
                    Error::contract(format!("no gradient reached parameter {name}"))
                })
            })
            .collect::<Result<_>>()?;

        let mut reports = Vec::with_capacity(params.len());
        for (pi, (name, p)) in params.iter().enumerate() {
            let n = p.numel();
            let stride = n.div_ceil(self.max_probes).max(1);
            let base = p.to_vec();
            let mut max_err = 0.0f64;
            let mut probes = 0usize;
            let mut work = base.clone();
            for i in (0..n).step_by(stride) {
                let h = self.eps * base[i].abs().max(1.0);
                work[i] = base[i] + h;
                p.set_data(&work)?;
                let up = f()?.item()?;
                work[i] = base[i] - h;
                p.set_data(&work)?;
                let down = f()?.item()?;
                work[i] = base[i];
                let numeric = (up - down) / (2.0 * h);
                max_err = max_err.max(rel_err(analytic[pi][i], numeric));
                probes += 1;
            }
            p.set_data(&base)?;
            reports.push(ParamReport { name: name.clone(), max_rel_err: max_err, probes });
        }
        Ok(reports)
    }
}
