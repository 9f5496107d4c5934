//! Independent numerical check of the tape's gradients.
//!
//! Central differences know nothing about the tape internals: the function
//! under test is simply evaluated at `x +- h e_i`, so agreement here is
//! evidence that forward and backward implement the same function. Relative
//! error uses `|a - b| / max(1, |a|, |b|)`, which behaves like absolute error
//! near zero and like relative error for large gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Number of coordinates compared.
    pub n: usize,
    pub pass: bool,
}

/// Compares tape gradients of a scalar-valued `f` against central
/// differences with step `h`, elementwise over `x0`.
pub fn finite_difference_check<F>(
    f: F,
    rows: usize,
    cols: usize,
    x0: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {h}")));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be > 0, got {tol}")));
    }

    // Analytic pass.
    let tape = Tape::new();
    let x = Tensor::leaf(rows, cols, x0.to_vec())?;
    let loss = f(&tape, &x)?;
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {}x{}",
            loss.rows(),
            loss.cols()
        )));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<f64> = grads
        .get(&x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x0.len()]);

    // Numeric pass: constants only, so nothing is recorded.
    let eval = |values: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = Tensor::constant(rows, cols, values)?;
        f(&tape, &x)?.item()
    };

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += h;
        let mut minus = x0.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }

    let n = x0.len();
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / n as f64,
        n,
        pass: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let report = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.mean(&sq)
            },
            2,
            3,
            &[0.3, -1.2, 0.9, 2.0, -0.4, 0.1],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn a_wrong_gradient_fails() {
        // relu backward is discontinuous at 0; probing exactly at the kink
        // makes the two estimates disagree.
        let report = finite_difference_check(
            |tape, x| {
                let y = tape.relu(x)?;
                tape.sum(&y)
            },
            1,
            1,
            &[0.0],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn zero_step_is_rejected() {
        let r = finite_difference_check(|tape, x| tape.sum(x), 1, 2, &[1.0, 2.0], 0.0, 1e-4);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn non_scalar_functions_are_rejected() {
        let r = finite_difference_check(|tape, x| tape.relu(x), 1, 2, &[1.0, 2.0], 1e-4, 1e-4);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
