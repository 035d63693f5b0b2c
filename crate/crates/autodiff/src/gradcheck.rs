//! Central finite-difference verification of tape gradients.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - c| / (|a| + |c| + 1e-8)`.
    pub max_rel_error: f64,
    /// Same maximum restricted to each input tensor.
    pub per_input: Vec<f64>,
    /// (input, flat coordinate) attaining `max_rel_error`.
    pub worst: Option<(usize, usize)>,
    /// Max over checked coordinates of [`excess_error`].
    pub max_excess_error: f64,
    /// Same maximum restricted to each input tensor.
    pub per_input_excess: Vec<f64>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Rounding bound, in units of `eps * |f| / h`, on a central difference
/// quotient. Each evaluation of `f` is off by a few ulps of `|f|`.
pub const ROUNDOFF_ULPS: f64 = 8.0;

/// Relative discrepancy left after discounting `noise`, the rounding bound of
/// the difference quotient. Zero whenever `|a - c| <= noise`.
pub fn excess_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / (analytic.abs() + numeric.abs() + 1e-8)
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(false)))
        .collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.item(root)?;
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite { op: "objective" });
    }
    Ok(v)
}

/// Analytic gradients of `f` at `point`, one flat vector per input.
pub fn analytic_gradients<F>(f: &F, point: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t)).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.item(root)?;
    tape.backward(root)?;
    let grads = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| {
            Ok(tape
                .grad(v)?
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// Compares tape gradients of `f` against central differences with step `h`
/// at every coordinate of every input.
pub fn finite_difference_check<F>(f: F, point: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_sampled(f, point, h, usize::MAX)
}

/// As [`finite_difference_check`], checking at most `max_coords` evenly spaced
/// coordinates per input tensor.
pub fn finite_difference_check_sampled<F>(
    f: F,
    point: &[Tensor],
    h: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::Domain { op: "gradcheck", value: h });
    }
    let (_, analytic) = analytic_gradients(&f, point)?;
    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; point.len()],
        worst: None,
        max_excess_error: 0.0,
        per_input_excess: vec![0.0; point.len()],
        checked: 0,
    };
    for (input, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let count = n.min(max_coords.max(1));
        for c in 0..count {
            let coord = if count == n { c } else { c * n / count + (n / count) / 2 };
            let original = work[input].values()[coord];
            let mut vals = work[input].values().to_vec();
            vals[coord] = original + h;
            work[input].set_values(vals.clone())?;
            let plus = evaluate(&f, &work)?;
            vals[coord] = original - h;
            work[input].set_values(vals.clone())?;
            let minus = evaluate(&f, &work)?;
            vals[coord] = original;
            work[input].set_values(vals)?;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad[coord], numeric);
            let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / h;
            let excess = excess_error(grad[coord], numeric, noise);
            report.max_excess_error = report.max_excess_error.max(excess);
            report.per_input_excess[input] = report.per_input_excess[input].max(excess);
            report.checked += 1;
            if err > report.per_input[input] {
                report.per_input[input] = err;
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((input, coord));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let point = vec![Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()];
        let report = finite_difference_check(
            |tape, v| {
                let w = tape.constant([3], vec![2.0, -3.0, 0.25])?;
                let p = tape.mul(v[0], w)?;
                tape.sum(p)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn saturated_sigmoid_reports_finite_error() {
        let point = vec![Tensor::new([2], vec![30.0, -30.0]).unwrap()];
        let report = finite_difference_check(
            |tape, v| {
                let s = tape.sigmoid(v[0])?;
                tape.sum(s)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error.is_finite());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        // log(x) at x = 1e-6 with h = 1e-5 steps into the negative domain.
        let point = vec![Tensor::new([1], vec![1e-6]).unwrap()];
        let result = finite_difference_check(
            |tape, v| {
                let l = tape.log(v[0])?;
                tape.sum(l)
            },
            &point,
            1e-5,
        );
        assert!(result.is_err());
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let point = vec![Tensor::new([4], vec![0.3, -0.7, 1.1, 0.05]).unwrap()];
        let report = finite_difference_check(
            |tape, v| {
                let y = tape.map_with_derivative(v[0], |x| x.sin(), |x| 1.01 * x.cos())?;
                tape.sum(y)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-3);
        assert!(report.max_excess_error > 1e-3);
    }

    #[test]
    fn excess_error_discounts_rounding_only() {
        assert_eq!(excess_error(1e-9, 2e-9, 1e-8), 0.0);
        let e = excess_error(1.0, 1.01, 1e-8);
        assert!((e - (0.01 - 1e-8) / (2.01 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn tiny_gradient_under_large_objective_is_resolved_by_excess_error() {
        // f = 1e3 + 1e-9 x: the quotient cannot resolve 1e-9 at this magnitude.
        let point = vec![Tensor::new([1], vec![0.5]).unwrap()];
        let report = finite_difference_check(
            |tape, v| {
                let y = tape.scale(v[0], 1e-9)?;
                let y = tape.shift(y, 1e3)?;
                tape.sum(y)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
        assert_eq!(report.max_excess_error, 0.0);
    }

    #[test]
    fn sampling_limits_checked_coordinates() {
        let point = vec![Tensor::new([100], (0..100).map(|i| i as f64 * 0.01).collect()).unwrap()];
        let report = finite_difference_check_sampled(
            |tape, v| {
                let y = tape.mul(v[0], v[0])?;
                tape.sum(y)
            },
            &point,
            1e-5,
            10,
        )
        .unwrap();
        assert_eq!(report.checked, 10);
        assert!(report.max_rel_error < 1e-8);
    }
}
