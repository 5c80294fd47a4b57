//! Central finite-difference verification of analytic gradients.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this floor are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of `value_fn`.
///
/// `value_fn` is evaluated twice at the unperturbed point; differing results
/// are reported as [`AutodiffError::NonDeterministic`].
pub fn compare_with_central_differences<F>(
    mut value_fn: F,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "finite_diff_check",
                lhs: p.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
    }
    let first = value_fn(params)?;
    let second = value_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        pass: true,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let plus = value_fn(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let minus = value_fn(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((pi, ei));
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    Ok(report)
}

/// Builds the scalar `f` on a fresh graph, differentiates it, and checks the
/// result against central differences with the given `step`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let build = |ps: &[Tensor]| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(ParamId(i), t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        Ok((g, root))
    };
    let (g, root) = build(params)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = (0..params.len())
        .map(|i| {
            grads
                .get(ParamId(i))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params[i].shape()))
        })
        .collect();
    compare_with_central_differences(
        |ps| {
            let (g, root) = build(ps)?;
            g.value(root)
                .item()
                .ok_or_else(|| AutodiffError::NonScalarRoot(g.shape(root).to_vec()))
        },
        params,
        &analytic,
        step,
        tolerance,
    )
}
