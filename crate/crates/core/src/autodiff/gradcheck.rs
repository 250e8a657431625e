use super::{Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum was attained.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Relative error used throughout the harness.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference rule used for the numeric side of the check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    Central(f64),
    /// Richardson extrapolation of central differences at `h` and `h/2`,
    /// `(4 D(h/2) − D(h)) / 3`. Truncation error is `O(h⁴)`, which allows a
    /// larger `h` and hence less cancellation in deep graphs.
    Richardson(f64),
}

/// Checks `d loss / d param` for every entry of every parameter in `params`
/// against central differences with the given step.
///
/// `objective` rebuilds the graph from scratch for the given parameter
/// values and returns it with its scalar loss node. It must be a pure
/// function of the parameters; any sampling noise has to be frozen by the
/// caller.
pub fn grad_check<F>(params: &ParamSet, step: f64, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, NodeId)>,
{
    grad_check_with(params, Stencil::Central(step), objective)
}

pub fn grad_check_with<F>(
    params: &ParamSet,
    stencil: Stencil,
    objective: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, NodeId)>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let (g, loss) = objective(p)?;
        Ok(g.scalar(loss))
    };

    let (graph, loss) = objective(params)?;
    let base = graph.scalar(loss);
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let analytic = graph.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.require(&name)?.len();
        let grad = analytic.get(&name).map(|t| t.data().to_vec());
        for i in 0..n {
            let orig = params.require(&name)?.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let plus = eval(&probe)?;
                probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let minus = eval(&probe)?;
                probe.get_mut(&name).unwrap().data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = match stencil {
                Stencil::Central(h) => central(h)?,
                Stencil::Richardson(h) => {
                    let coarse = central(h)?;
                    let fine = central(h / 2.0)?;
                    (4.0 * fine - coarse) / 3.0
                }
            };
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
