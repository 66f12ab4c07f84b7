//! Central finite-difference oracle for reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are numerically zero are compared absolutely.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            denom_floor: 1e-4,
        }
    }
}

/// Which parameter elements get a finite-difference probe.
#[derive(Debug, Clone)]
pub enum ElementSelection {
    All,
    /// Flat element indices per parameter, in parameter order.
    PerParam(Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of the scalar `f(params)` with central
/// differences `(f(θ+h·e) - f(θ-h·e)) / 2h`.
///
/// `f` receives a fresh graph and one variable per parameter. For the
/// perturbed evaluations the parameters are bound as constants, so only the
/// forward values of `f` are used on that side.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    selection: &ElementSelection,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let out = f(&mut graph, &vars)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            graph.value(out).shape()
        )));
    }
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v).clone()).collect();
    drop(graph);

    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).data()[0])
    };

    let selected: Vec<Vec<usize>> = match selection {
        ElementSelection::All => params.iter().map(|p| (0..p.numel()).collect()).collect(),
        ElementSelection::PerParam(sel) => {
            if sel.len() != params.len() {
                return Err(Error::contract(format!(
                    "selection covers {} parameters, expected {}",
                    sel.len(),
                    params.len()
                )));
            }
            sel.clone()
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (p, elems) in selected.iter().enumerate() {
        for &e in elems {
            if e >= params[p].numel() {
                return Err(Error::contract(format!(
                    "element {e} out of range for parameter {p}"
                )));
            }
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + cfg.step;
            let plus = evaluate(&work)?;
            work[p].data_mut()[e] = orig - cfg.step;
            let minus = evaluate(&work)?;
            work[p].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[p].data()[e];
            let denom = a.abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, e));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct DirectionalReport {
    /// `<∇f, v>` from the reverse sweep.
    pub analytic: f64,
    /// `(f(θ+h·v) - f(θ-h·v)) / 2h`.
    pub numeric: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central difference along one direction `v` spanning every parameter at
/// once, compared with the projected reverse-mode gradient.
pub fn grad_check_directional<F>(
    f: F,
    params: &[Tensor],
    direction: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<DirectionalReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if direction.len() != params.len()
        || direction
            .iter()
            .zip(params)
            .any(|(d, p)| d.shape() != p.shape())
    {
        return Err(Error::contract(
            "direction must match every parameter shape",
        ));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let out = f(&mut graph, &vars)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar function"));
    }
    let grads = graph.backward(out)?;
    let analytic: f64 = vars
        .iter()
        .zip(direction)
        .map(|(&v, d)| {
            grads
                .wrt(v)
                .data()
                .iter()
                .zip(d.data())
                .map(|(g, x)| g * x)
                .sum::<f64>()
        })
        .sum();
    drop(graph);

    let shifted = |sign: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = params
            .iter()
            .zip(direction)
            .map(|(p, d)| {
                let data = p
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(x, v)| x + sign * cfg.step * v)
                    .collect();
                g.constant(Tensor::from_parts(p.shape().to_vec(), data))
            })
            .collect();
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).data()[0])
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * cfg.step);
    let denom = analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
    let rel_error = (analytic - numeric).abs() / denom;
    Ok(DirectionalReport {
        analytic,
        numeric,
        rel_error,
        tolerance: cfg.tolerance,
        passed: rel_error < cfg.tolerance,
    })
}
