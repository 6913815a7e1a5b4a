//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked elements of |analytic - numeric| / max(1, |analytic|).
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `eps`, for every element of every tensor in
/// `params`.
///
/// `f` receives a fresh graph and one [`Var`] per parameter and must return a
/// scalar node. It is called `1 + 2 * (total parameter elements)` times.
pub fn grad_check<F>(params: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |j| (p, j)))
        .collect();
    grad_check_at(params, eps, &all, f)
}

/// [`grad_check`] restricted to the `(tensor, element)` pairs in `picks`;
/// for models too large to perturb every weight.
pub fn grad_check_at<F>(params: &[Tensor<f64>], eps: f64, picks: &[(usize, usize)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if let Some(&(p, j)) = picks.iter().find(|&&(p, j)| p >= params.len() || j >= params[p].len()) {
        return Err(Error::usage(format!("grad_check: no element {j} in parameter {p}")));
    }
    if !(eps > 0.0) {
        return Err(Error::usage(format!("grad_check: eps must be positive, got {eps}")));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();

    let mut g = Graph::new();
    let vars: Vec<Var> = work.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    check_output(&g, loss)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&work)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    for &(p, j) in picks {
        let orig = work[p].data()[j];
        work[p].data_mut()[j] = orig + eps;
        let plus = evaluate(&work, &f)?;
        work[p].data_mut()[j] = orig - eps;
        let minus = evaluate(&work, &f)?;
        work[p].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[p][j];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.elements_checked += 1;
        if err > report.max_rel_error || report.elements_checked == 1 {
            report.max_rel_error = err;
            report.worst = (p, j);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn evaluate<F>(params: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    check_output(&g, loss)?;
    Ok(g.scalar(loss))
}

fn check_output(g: &Graph<f64>, loss: Var) -> Result<()> {
    if g.value(loss).len() != 1 {
        return Err(Error::usage(format!(
            "grad_check: function returned shape {:?}, expected a scalar",
            g.shape(loss)
        )));
    }
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad_check: function evaluated to {v}")));
    }
    Ok(())
}
