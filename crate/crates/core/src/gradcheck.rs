//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward rules it checks.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Numeric gradient of a scalar function of several tensors.
pub fn central_difference<F>(inputs: &[Tensor], step: f64, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut point = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + step;
            let plus = f(&point)?;
            point[i].data_mut()[j] = orig - step;
            let minus = f(&point)?;
            point[i].data_mut()[j] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        out.push(g);
    }
    Ok(out)
}

/// Fourth-order central difference,
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, for objectives
/// whose curvature makes the plain O(h²) stencil too coarse.
pub fn central_difference_4<F>(inputs: &[Tensor], step: f64, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut point = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = point[i].data()[j];
            let mut at = |delta: f64, point: &mut Vec<Tensor>| -> Result<f64> {
                point[i].data_mut()[j] = orig + delta;
                f(point)
            };
            let (p1, m1) = (at(step, &mut point)?, at(-step, &mut point)?);
            let (p2, m2) = (at(2.0 * step, &mut point)?, at(-2.0 * step, &mut point)?);
            point[i].data_mut()[j] = orig;
            g.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let rel = relative_error(av, nv);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((av - nv).abs());
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    report
}

/// Checks `build` against finite differences with every input bound as a
/// differentiable leaf. `build` must be deterministic (reseed any RNG inside).
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.input(t.clone())).collect();
    let out = build(&mut graph, &vars)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let numeric = central_difference(inputs, step, |point| {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    })?;
    Ok(compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourth_order_stencil_is_exact_on_quartics() {
        let x = Tensor::from_rows(&[[0.7, -1.3]]).unwrap();
        let g = central_difference_4(&[x], 1e-2, |p| Ok(p[0].data().iter().map(|v| v.powi(4)).sum())).unwrap();
        for (num, v) in g[0].iter().zip([0.7f64, -1.3]) {
            assert!((num - 4.0 * v.powi(3)).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let report = check(&[x], DEFAULT_STEP, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence from the tape but not from the forward value
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let report = check(&[x], DEFAULT_STEP, |g, v| {
            let d = g.detach(v[0]);
            let p = g.mul(v[0], d)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err > 0.4);
    }
}
