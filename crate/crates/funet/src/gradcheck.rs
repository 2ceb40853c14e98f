//! Finite-difference gradient checking.
//!
//! Compares tape gradients against central differences,
//! `(f(x + h) - f(x - h)) / (2h)` with `h = 1e-5`, one perturbed scalar
//! forward pass per input element. Meant for desk-scale tensors; the cost is
//! two full forward passes per element checked.

/// Step size for central differences.
pub const GRADCHECK_H: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative, with an
/// absolute floor of 1e-3 in the denominator so near-zero gradients compare
/// absolutely rather than blowing up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Report from [`check`]: the worst element across all checked inputs.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks the gradient of a scalar-valued function of several flat inputs.
///
/// `f` receives the current input vectors and must return the scalar output
/// plus the analytic gradient of each input (rebuilding its tape from scratch
/// each call). The analytic gradients from the unperturbed call are compared
/// element by element against central differences of the scalar.
pub fn check<F>(inputs: &[Vec<f64>], mut f: F) -> GradCheck
where
    F: FnMut(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let (_, grads) = f(inputs);
    assert_eq!(grads.len(), inputs.len(), "one gradient per input");

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        assert_eq!(grads[i].len(), input.len(), "gradient length for input {i}");
        for e in 0..input.len() {
            let x = input[e];
            work[i][e] = x + GRADCHECK_H;
            let (up, _) = f(&work);
            work[i][e] = x - GRADCHECK_H;
            let (down, _) = f(&work);
            work[i][e] = x;
            let numeric = (up - down) / (2.0 * GRADCHECK_H);
            let err = rel_err(grads[i][e], numeric);
            if err > report.max_rel_err {
                report = GradCheck {
                    max_rel_err: err,
                    worst_input: i,
                    worst_element: e,
                    analytic: grads[i][e],
                    numeric,
                };
            }
        }
    }
    report
}
