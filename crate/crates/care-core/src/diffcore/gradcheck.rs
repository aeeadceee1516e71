//! Finite-difference gradient verification.
//!
//! [`check_gradients`] compares the tape's analytic gradients against central
//! differences for an arbitrary scalar-valued computation, reporting the
//! worst element. Used by the test suite to validate every operator's
//! backward rule through composite expressions.

use crate::diffcore::matrix::Matrix;
use crate::diffcore::tape::{Tape, Tensor};
use crate::error::Result;

/// Tolerances for [`check_gradients`]. An element passes when
/// `|analytic - numeric| <= abs_tol + rel_tol * max(|analytic|, |numeric|)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step size.
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

/// Result of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    /// Worst `|a - n| / (abs_tol + rel_tol * max(|a|, |n|))`; <= 1 passes.
    pub max_err_ratio: f64,
    /// Human-readable description of the worst element.
    pub worst: String,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_err_ratio <= 1.0
    }
}

/// Compare analytic and central-difference gradients of `build` with respect
/// to every element of every input.
///
/// `build` must record the same computation every time it is called (it runs
/// once for the analytic pass and twice per input element for the numeric
/// pass). Computations with top-k selections or other discrete branches are
/// only checkable at inputs where the branch is locally stable.
pub fn check_gradients<F>(
    inputs: &[Matrix],
    settings: GradCheckSettings,
    build: F,
) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|m| tape.param(m)).collect();
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&t| tape.grad_matrix(t)).collect();

    let eval = |mats: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let ls: Vec<Tensor> = mats.iter().map(|m| t.param(m)).collect();
        let out = build(&mut t, &ls)?;
        t.scalar_value(out)
    };

    let mut checked = 0usize;
    let mut max_err_ratio = 0.0f64;
    let mut worst = String::from("no elements checked");
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = work[i].as_slice()[e];
            work[i].as_mut_slice()[e] = orig + settings.h;
            let f_plus = eval(&work)?;
            work[i].as_mut_slice()[e] = orig - settings.h;
            let f_minus = eval(&work)?;
            work[i].as_mut_slice()[e] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * settings.h);
            let a = analytic[i].as_slice()[e];
            let tol = settings.abs_tol + settings.rel_tol * a.abs().max(numeric.abs());
            let ratio = (a - numeric).abs() / tol;
            checked += 1;
            if ratio > max_err_ratio {
                max_err_ratio = ratio;
                worst = format!(
                    "input {i} element {e}: analytic {a:.10e}, numeric {numeric:.10e}"
                );
            }
        }
    }

    Ok(GradCheckOutcome {
        checked,
        max_err_ratio,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Reduce;

    #[test]
    fn passes_on_a_composite_expression() {
        let x = Matrix::from_vec(2, 3, vec![0.3, -0.7, 1.1, 0.9, -0.2, 0.4]).unwrap();
        let w = Matrix::from_vec(3, 2, vec![0.5, -0.1, 0.2, 0.8, -0.6, 0.3]).unwrap();
        let outcome = check_gradients(&[x, w], GradCheckSettings::default(), |tape, leaves| {
            let h = tape.matmul(leaves[0], leaves[1])?;
            let t = tape.tanh(h);
            Ok(tape.reduce(t, Reduce::MeanAll))
        })
        .unwrap();
        assert!(outcome.passed(), "worst: {}", outcome.worst);
        assert_eq!(outcome.checked, 12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale() by 2 forward but pretend the loss is 3x via an extra
        // hand-added term in the numeric path only: simulate by checking a
        // deliberately different function analytically vs numerically is not
        // possible through the public API, so instead verify sensitivity:
        // loosen the step so curvature of exp() breaks a too-tight tolerance.
        let x = Matrix::scalar(2.0);
        let settings = GradCheckSettings {
            h: 0.5, // absurdly large step
            rel_tol: 1e-10,
            abs_tol: 1e-12,
        };
        let outcome = check_gradients(&[x], settings, |tape, leaves| {
            let e = tape.exp(leaves[0]);
            Ok(tape.reduce(e, Reduce::SumAll))
        })
        .unwrap();
        assert!(!outcome.passed());
    }
}
