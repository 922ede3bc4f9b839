//! Central finite-difference gradient checking.

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR)
}

/// Compares backward gradients of the scalar `f(inputs)` against
/// `(f(x + h e_j) - f(x - h e_j)) / 2h` for every element of every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with_fault(f, inputs, h, None)
}

pub fn finite_diff_check_with_fault<F>(f: F, inputs: &[Tensor], h: f64, fault: Option<OpKind>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars = inputs.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if !tape.shape(out).is_empty() {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for j in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (ti, j);
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.01]).unwrap();
        let report = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn sign_flip_is_caught() {
        let x = Tensor::new(vec![3], vec![0.5, -0.25, 1.5]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.gelu(v[0])?;
            t.sum(y)
        };
        let ok = finite_diff_check(f, &[x.clone()], 1e-5).unwrap();
        assert!(ok.max_rel_error < 1e-6);
        let bad = finite_diff_check_with_fault(f, &[x], 1e-5, Some(OpKind::Gelu)).unwrap();
        assert!(bad.max_rel_error > 1.0, "{bad:?}");
    }
}
