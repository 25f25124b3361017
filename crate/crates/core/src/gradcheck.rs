//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct InputReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_error: f64,
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub max_error: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tol
    }
}

/// Error between an analytic and a numeric derivative: the smaller of the
/// absolute and the relative error.
pub fn element_error(analytic: f64, numeric: f64) -> f64 {
    let abs = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { abs / scale } else { 0.0 };
    abs.min(rel)
}

/// Evaluates the scalar `f` on a fresh tape.
fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::InvalidShape {
            shape: tape.shape(out).to_vec(),
            reason: "gradcheck needs a scalar-valued function".into(),
        });
    }
    Ok((tape, vars, out))
}

/// Compares the reverse-mode gradient of `f` with `(f(x+h) - f(x-h)) / 2h`
/// for every element of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);
    for (input, grad) in analytic.iter().enumerate() {
        if let Some(element) = grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { input, element });
        }
    }

    let mut probe = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    let mut max_error: f64 = 0.0;
    for (input, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.numel());
        let mut worst = (0.0f64, 0usize);
        for element in 0..grad.numel() {
            let original = probe[input].data()[element];
            probe[input].data_mut()[element] = original + h;
            let plus = scalar_value(&f, &probe)?;
            probe[input].data_mut()[element] = original - h;
            let minus = scalar_value(&f, &probe)?;
            probe[input].data_mut()[element] = original;
            if !plus.is_finite() || !minus.is_finite() || !grad.data()[element].is_finite() {
                return Err(Error::NonFinite { input, element });
            }
            let n = (plus - minus) / (2.0 * h);
            let e = element_error(grad.data()[element], n);
            if e > worst.0 {
                worst = (e, element);
            }
            numeric.push(n);
        }
        max_error = max_error.max(worst.0);
        reports.push(InputReport {
            analytic: grad.data().to_vec(),
            numeric,
            max_error: worst.0,
            worst_element: worst.1,
        });
    }
    Ok(GradcheckReport { inputs: reports, max_error, tol })
}

fn scalar_value<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.inputs[0].analytic, vec![2.0, 4.0]);
        assert!(report.passed(), "{}", report.max_error);
    }

    #[test]
    fn linear_has_zero_error() {
        let x = Tensor::vector(vec![0.25, -3.0, 8.0]).unwrap();
        let report = gradcheck(|t, v| Ok(t.sum(v[0])), &[x], 1e-5, 1e-5).unwrap();
        assert_eq!(report.inputs[0].analytic, vec![1.0; 3]);
        assert!(report.inputs[0].numeric.iter().all(|&n| (n - 1.0).abs() < 1e-10));
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::vector(vec![1.0, 800.0]).unwrap();
        let err = gradcheck(
            |t, v| {
                let e = t.exp(v[0]);
                Ok(t.sum(e))
            },
            &[x],
            1e-5,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { input: 0, element: 1 }), "{err}");
    }

    #[test]
    fn relative_error_metric() {
        assert_eq!(element_error(0.0, 0.0), 0.0);
        assert!((element_error(1000.0, 1000.01) - 1e-5).abs() < 1e-9);
        assert!((element_error(1e-9, 2e-9) - 1e-9).abs() < 1e-20);
    }
}
