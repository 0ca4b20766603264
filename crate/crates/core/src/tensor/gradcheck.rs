use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar function `f` against central differences
/// with step `h`, over every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("leaf grad")).collect();
    drop(tape);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), coords_checked: 0 };
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for coord in 0..grad.numel() {
            let orig = probe[which].data()[coord];
            probe[which].data_mut()[coord] = orig + h;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[coord] = orig - h;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[coord] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[coord];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "gradient check: non-finite gradient at input {which}, coordinate {coord} \
                     (analytic {a}, numeric {numeric})"
                )));
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (which, coord);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1 - 0.6);
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3 + 0.2);
        // d/dx sin = cos; claim -sin instead
        let err = grad_check(|t, x| {
            let y = t.map(x, f64::sin, |v| -v.sin());
            Ok(t.sum(y))
        }, &x, 1e-5)
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn nan_is_reported_with_coordinate() {
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let res = grad_check(|t, x| {
            let y = t.map(x, |v| v, |v| if v < 0.0 { f64::NAN } else { 1.0 });
            Ok(t.sum(y))
        }, &x, 1e-5);
        match res {
            Err(Error::Numerical(msg)) => assert!(msg.contains("coordinate 1"), "{msg}"),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }
}
