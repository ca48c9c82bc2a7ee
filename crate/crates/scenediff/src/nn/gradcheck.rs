//! Finite-difference verification of reverse-mode gradients.
//!
//! Always runs in f64: the central-difference tolerances in the verification
//! suites are unreachable in f32.

use ndarray::ArrayD;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Compare the reverse-mode gradient of `f` (a scalar-valued graph builder)
/// against central differences at `x0`, coordinate-wise.
///
/// Returns the worst relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, x0: &ArrayD<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_general(
        |g, arr| {
            let x = g.constant(arr.clone())?;
            let loss = f(g, x)?;
            Ok((loss, x))
        },
        x0,
        eps,
    )
}

/// General form: `build` constructs the graph from the candidate array and
/// returns (scalar loss, node whose gradient is checked).
pub fn grad_check_general<F>(build: F, x0: &ArrayD<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ArrayD<f64>) -> Result<(Var, Var)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps {eps} outside [1e-6, 1e-3]"
        )));
    }

    let eval = |arr: &ArrayD<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let (loss, _) = build(&mut g, arr)?;
        if g.shape(loss) != [1] {
            return Err(Error::Contract("grad_check: loss must be scalar".into()));
        }
        let v = g.value(loss)[[0]];
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    // Analytic gradient.
    let mut g = Graph::<f64>::new();
    let (loss, x) = build(&mut g, x0)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(x0.raw_dim()));

    let mut worst = 0.0f64;
    let flat: Vec<f64> = x0.iter().copied().collect();
    for i in 0..flat.len() {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        {
            let p = plus.as_slice_mut().unwrap();
            p[i] += eps;
            let m = minus.as_slice_mut().unwrap();
            m[i] -= eps;
        }
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.as_slice().unwrap()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
