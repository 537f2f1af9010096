//! Central finite-difference oracle for the reverse pass.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum over coordinates of `|analytic − numeric| / (|analytic| + 1e−8)`,
/// where `numeric = (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` and `analytic` comes
/// from the reverse pass. `f` builds a scalar from the leaf it is given.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    Ok(finite_diff_report(f, x, h, None)?.max_rel_error)
}

/// As [`finite_diff_check`], optionally restricted to `coords`.
pub fn finite_diff_report<F>(mut f: F, x: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    if !g.value(out).is_scalar() {
        return Err(Error::NotScalar(g.value(out).shape().to_vec()));
    }
    let analytic = match g.backward(out) {
        Ok(grads) => grads.get_or_zeros(leaf, x),
        Err(Error::Detached) => Tensor::zeros(x.shape()),
        Err(e) => return Err(e),
    };

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + 1e-8);
        if rel > report.max_rel_error || (coords.len() == 1) {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
