//! Finite-difference verification of tape gradients.
//!
//! Always runs at 64-bit precision; central differences at 32 bits are too
//! noisy to distinguish a wrong adjoint from roundoff.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error for one checked parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_err: f64,
    pub checked_coords: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.entries.iter().all(|e| e.rel_err < self.tolerance)
    }

    /// One row per parameter: name, norms, relative error, PASS/FAIL.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<40} {:>12} {:>12} {:>12}  {}\n",
            "parameter", "|analytic|", "|numeric|", "rel-err", "status"
        ));
        for e in &self.entries {
            s.push_str(&format!(
                "{:<40} {:>12.4e} {:>12.4e} {:>12.4e}  {}\n",
                e.name,
                e.analytic_norm,
                e.numeric_norm,
                e.rel_err,
                if e.rel_err < self.tolerance {
                    "PASS"
                } else {
                    "FAIL"
                }
            ));
        }
        s
    }
}

/// Finite-difference stencil order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// (f(x+h) - f(x-h)) / 2h — the standard central difference.
    Central2,
    /// Five-point stencil, O(h^4) truncation; tolerates a larger step, which
    /// lowers the roundoff floor for weakly coupled parameters.
    Central4,
}

/// Check analytic gradients of a scalar-valued function against central
/// finite differences.
///
/// `f` receives one leaf [`Var`] per named point and must return a scalar.
/// It is evaluated twice up front; if the two values differ bitwise the
/// function is rejected as non-deterministic. For tensors larger than
/// `max_coords` only a deterministic stride subset of coordinates is
/// differenced; norms are taken over that subset.
pub fn grad_check_stencil<F>(
    f: F,
    points: &[(String, Tensor<f64>)],
    step: f64,
    tolerance: f64,
    max_coords: usize,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    grad_check_floor(&f, points, step, tolerance, max_coords, stencil, 1e-12)
}

fn grad_check_floor<F>(
    f: &F,
    points: &[(String, Tensor<f64>)],
    step: f64,
    tolerance: f64,
    max_coords: usize,
    stencil: Stencil,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument {
            what: format!("grad_check step must be positive, got {step}"),
        });
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(Error::InvalidArgument {
                what: format!("grad_check function must be scalar, got {:?}", v.shape()),
            });
        }
        Ok(v.item())
    };

    let base: Vec<Tensor<f64>> = points.iter().map(|(_, t)| t.clone()).collect();
    let y0 = eval(&base)?;
    let y1 = eval(&base)?;
    if y0.to_bits() != y1.to_bits() {
        return Err(Error::NonDeterministic {
            detail: format!("two forward passes disagree: {y0} vs {y1}"),
        });
    }

    // analytic gradients
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = base.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut entries = Vec::new();
    for (pi, (name, tensor)) in points.iter().enumerate() {
        let analytic = grads
            .wrt(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let n = tensor.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let mut a_sq = 0.0;
        let mut d_sq = 0.0;
        let mut n_sq = 0.0;
        for &ci in &coords {
            let at = |offset: f64| -> Result<f64> {
                let mut moved = base.clone();
                moved[pi].data_mut()[ci] += offset;
                eval(&moved)
            };
            let numeric = match stencil {
                Stencil::Central2 => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::Central4 => {
                    (-at(2.0 * step)? + 8.0 * at(step)? - 8.0 * at(-step)? + at(-2.0 * step)?)
                        / (12.0 * step)
                }
            };
            let a = analytic.data()[ci];
            a_sq += a * a;
            n_sq += numeric * numeric;
            d_sq += (a - numeric) * (a - numeric);
        }
        let a_norm = a_sq.sqrt();
        let n_norm = n_sq.sqrt();
        let rel = d_sq.sqrt() / a_norm.max(n_norm).max(floor);
        entries.push(GradCheckEntry {
            name: name.clone(),
            analytic_norm: a_norm,
            numeric_norm: n_norm,
            rel_err: rel,
            checked_coords: coords.len(),
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}

/// [`grad_check_stencil`] with the standard central difference.
pub fn grad_check_sampled<F>(
    f: F,
    points: &[(String, Tensor<f64>)],
    step: f64,
    tolerance: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    grad_check_stencil(f, points, step, tolerance, max_coords, Stencil::Central2)
}

/// Multi-scale finite-difference check.
///
/// No single step suits every parameter of a deep mixed-scale model:
/// strongly coupled weights feeding rectifier kinks want a small step
/// (large offsets cross kinks), while weakly coupled parameters need a
/// large step plus the fourth-order stencil to rise above the roundoff
/// floor. Each parameter is checked against every (step, stencil) in
/// `plan` and keeps its best agreement. `floor` is the absolute gradient
/// level treated as numerically zero (set it near the stencil noise floor,
/// well below any gradient the tolerance should certify).
pub fn grad_check_multi<F>(
    f: F,
    points: &[(String, Tensor<f64>)],
    tolerance: f64,
    max_coords: usize,
    floor: f64,
    plan: &[(f64, Stencil)],
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    if plan.is_empty() {
        return Err(Error::InvalidArgument {
            what: "grad_check_multi needs at least one (step, stencil)".into(),
        });
    }
    let mut best: Option<Vec<GradCheckEntry>> = None;
    for &(step, stencil) in plan {
        let report = grad_check_floor(&f, points, step, tolerance, max_coords, stencil, floor)?;
        best = Some(match best {
            None => report.entries,
            Some(prev) => prev
                .into_iter()
                .zip(report.entries)
                .map(|(a, b)| if b.rel_err < a.rel_err { b } else { a })
                .collect(),
        });
    }
    Ok(GradCheckReport {
        entries: best.expect("plan checked non-empty"),
        tolerance,
    })
}

/// Central-difference check over every coordinate.
pub fn grad_check<F>(
    f: F,
    points: &[(String, Tensor<f64>)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    grad_check_sampled(f, points, step, tolerance, usize::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = x^2 at x = 3: analytic 6
        let report = grad_check(
            |_tape, vars| vars[0].mul(vars[0]).map(|v| v.sum_all()),
            &[("x".into(), Tensor::scalar(3.0))],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passes(), "{}", report.table());
        assert!((report.entries[0].analytic_norm - 6.0).abs() < 1e-9);
        assert!((report.entries[0].numeric_norm - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let err = grad_check(
            |_t, vars| Ok(vars[0].sum_all()),
            &[("x".into(), Tensor::scalar(1.0))],
            0.0,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn rejects_nondeterministic_function() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let err = grad_check(
            move |tape, _vars| {
                counter.set(counter.get() + 1.0);
                Ok(tape.leaf(Tensor::scalar(counter.get())).sum_all())
            },
            &[("x".into(), Tensor::scalar(1.0))],
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
