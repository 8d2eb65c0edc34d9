use super::{no_grad, with_branch_signature, with_wide_precision, Tensor};
use crate::error::{Error, Result};

/// Smallest step tried when refining around a kink is `eps / 10^REFINE_STEPS`.
pub const REFINE_STEPS: u32 = 3;

/// Largest disagreement found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst element error with the requested `eps`, over every element.
    pub max_relative_error: f64,
    /// (input index, element index, analytic, numeric) at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub elements_checked: usize,
    /// Elements whose `x ± eps` evaluations took different branches in a
    /// piecewise op, so the central difference spans a kink.
    pub kinks_crossed: usize,
    /// Worst error after re-measuring each kink-crossing element with
    /// `eps / 10`, `eps / 100`, ... until both sides share a branch pattern.
    /// Equals `max_relative_error` when no kink was crossed.
    pub kink_aware_max_relative_error: f64,
    /// Kink-crossing elements still crossing at the smallest step.
    pub unresolved_kinks: usize,
}

/// Precision of the finite-difference reference objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Evaluate `f(x ± eps)` without rounding op outputs to `f32`. The
    /// gradient under test still comes from the ordinary 32-bit backward.
    #[default]
    Wide,
    /// Evaluate `f(x ± eps)` in the engine's ordinary 32-bit arithmetic.
    /// Rounding noise in the objective is about `1e-7 / eps` per element,
    /// which swamps small gradient entries.
    Single,
}

/// Compares backward-mode gradients of the scalar `f(inputs)` with central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, element by element.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, 1e-6)`,
/// `a` from [`Tensor::backward`] and `n` the central difference, whose
/// divisor is the perturbation actually applied. The reference objective is
/// evaluated in [`Precision::Wide`].
///
/// `inputs` must be leaves that require gradients; their values are
/// restored before returning, and their gradients are left holding the
/// analytic result.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    grad_check_with(f, inputs, eps, Precision::Wide, None)
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// [`grad_check`] with an explicit reference precision, optionally
/// restricted to a subset of elements per input (`selection[i]` lists
/// element indices of input `i`).
pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    eps: f32,
    precision: Precision,
    selection: Option<&[Vec<usize>]>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("grad_check eps {eps} must be positive")));
    }
    if let Some(bad) = inputs.iter().find(|t| !t.is_leaf() || !t.requires_grad()) {
        return Err(Error::Argument(format!(
            "grad_check inputs must be gradient-tracking leaves ({bad:?})"
        )));
    }
    inputs.iter().for_each(Tensor::zero_grad);
    f(inputs)?.backward()?;
    let analytic: Vec<Vec<f32>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = || -> Result<(f64, u64)> {
        let (out, sig) = with_branch_signature(|| {
            no_grad(|| match precision {
                Precision::Single => f(inputs)?.item_f64(),
                Precision::Wide => with_wide_precision(|| f(inputs))?.item_f64(),
            })
        });
        Ok((out?, sig))
    };
    // (numeric derivative, kink crossed) for one element and step
    let central = |t: &Tensor, e: usize, step: f64| -> Result<(f64, bool)> {
        let orig = t.data()[e];
        let (hi, lo) = match precision {
            Precision::Single => ((orig as f32 + step as f32) as f64, (orig as f32 - step as f32) as f64),
            Precision::Wide => (orig + step, orig - step),
        };
        t.data_mut()[e] = hi;
        let up = eval();
        t.data_mut()[e] = lo;
        let down = eval();
        t.data_mut()[e] = orig;
        let ((f_hi, s_hi), (f_lo, s_lo)) = (up?, down?);
        Ok(((f_hi - f_lo) / (hi - lo), s_hi != s_lo))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        elements_checked: 0,
        kinks_crossed: 0,
        kink_aware_max_relative_error: 0.0,
        unresolved_kinks: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let elements: &[usize] = match selection {
            Some(sel) => &sel[ti],
            None => {
                all = (0..t.numel()).collect();
                &all
            }
        };
        for &e in elements {
            let a = analytic[ti][e] as f64;
            let (numeric, crossed) = central(t, e, eps as f64)?;
            let rel = relative_error(a, numeric);
            report.elements_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst = Some((ti, e, a, numeric));
            }
            let mut aware = rel;
            if crossed {
                report.kinks_crossed += 1;
                let mut resolved = false;
                for k in 1..=REFINE_STEPS {
                    let (n, still) = central(t, e, eps as f64 / 10f64.powi(k as i32))?;
                    aware = relative_error(a, n);
                    if !still {
                        resolved = true;
                        break;
                    }
                }
                if !resolved {
                    report.unresolved_kinks += 1;
                }
            }
            report.kink_aware_max_relative_error = report.kink_aware_max_relative_error.max(aware);
        }
    }
    Ok(report)
}
