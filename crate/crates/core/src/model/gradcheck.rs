//! Finite-difference verification of the whole decoder's loss gradient.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;

use super::{sequence_loss, Bound, ModelParams, SequenceInput};
use crate::error::Result;
use crate::tensor::{
    grad_check, grad_check_directional, DirectionalReport, ElementSelection, GradCheckConfig,
    GradCheckReport, Tensor,
};

/// Which probes to run.
#[derive(Debug, Clone)]
pub struct ModelGradPlan {
    /// Elements probed per tensor; tensors at or below this size are probed
    /// in full. `usize::MAX` probes every element of every tensor.
    pub per_tensor: usize,
    /// Random directions spanning all parameters simultaneously.
    pub directions: usize,
    pub config: GradCheckConfig,
}

#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub per_tensor: Vec<(String, GradCheckReport)>,
    pub directional: Vec<DirectionalReport>,
    pub elements_checked: usize,
    pub total_params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Gradient of the next-token loss on `(input, labels, mask)` against
/// central differences.
pub fn check_model_gradients<R: Rng + ?Sized>(
    params: &ModelParams,
    input: &SequenceInput,
    labels: &[u32],
    mask: &[bool],
    plan: &ModelGradPlan,
    rng: &mut R,
) -> Result<ModelGradReport> {
    let cfg = params.config();
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    let values: Vec<Tensor> = params.tensors().values().cloned().collect();
    let f = |g: &mut crate::tensor::Graph, vars: &[crate::tensor::Var]| {
        let b = Bound::from_vars(&names, vars);
        sequence_loss(g, &b, cfg, input, labels, mask, None)
    };

    let mut per_tensor = Vec::with_capacity(values.len());
    let mut elements_checked = 0;
    let mut max_rel_error: f64 = 0.0;
    for (i, t) in values.iter().enumerate() {
        let picked: Vec<usize> = if t.numel() <= plan.per_tensor {
            (0..t.numel()).collect()
        } else {
            sample(rng, t.numel(), plan.per_tensor).into_vec()
        };
        let selection = ElementSelection::PerParam(
            (0..values.len())
                .map(|j| if j == i { picked.clone() } else { Vec::new() })
                .collect(),
        );
        let report = grad_check(f, &values, &selection, &plan.config)?;
        elements_checked += report.checked;
        max_rel_error = max_rel_error.max(report.max_rel_error);
        log::debug!(
            "{}: {} elements, max rel {:.3e}",
            names[i],
            report.checked,
            report.max_rel_error
        );
        per_tensor.push((names[i].clone(), report));
    }

    let mut directional = Vec::with_capacity(plan.directions);
    for _ in 0..plan.directions {
        let raw: Vec<Tensor> = values
            .iter()
            .map(|t| Tensor::randn(t.shape(), 1.0, rng))
            .collect();
        let norm = raw
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let dir: Vec<Tensor> = raw.iter().map(|t| t.map(|v| v / norm)).collect();
        let report = grad_check_directional(f, &values, &dir, &plan.config)?;
        max_rel_error = max_rel_error.max(report.rel_error);
        directional.push(report);
    }

    let passed = per_tensor.iter().all(|(_, r)| r.passed) && directional.iter().all(|r| r.passed);
    Ok(ModelGradReport {
        per_tensor,
        directional,
        elements_checked,
        total_params: params.numel(),
        max_rel_error,
        passed,
    })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub elements_checked: usize,
    pub total_params: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst element so far.
    pub worst: Option<(String, usize)>,
    /// No checked element exceeded the tolerance.
    pub passed: bool,
    /// Every element was checked before the deadline.
    pub complete: bool,
}

/// Central differences on every parameter element, visited in rounds of
/// `chunk` elements from each tensor so a sweep cut short by `deadline`
/// still covers every tensor.
pub fn sweep_model_gradients(
    params: &ModelParams,
    input: &SequenceInput,
    labels: &[u32],
    mask: &[bool],
    config: &GradCheckConfig,
    chunk: usize,
    deadline: Option<Instant>,
) -> Result<SweepReport> {
    let cfg = params.config();
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    let values: Vec<Tensor> = params.tensors().values().cloned().collect();
    let f = |g: &mut crate::tensor::Graph, vars: &[crate::tensor::Var]| {
        let b = Bound::from_vars(&names, vars);
        sequence_loss(g, &b, cfg, input, labels, mask, None)
    };
    let chunk = chunk.max(1);
    let longest = values.iter().map(Tensor::numel).max().unwrap_or(0);
    let mut rep = SweepReport {
        elements_checked: 0,
        total_params: params.numel(),
        max_rel_error: 0.0,
        worst: None,
        passed: true,
        complete: false,
    };
    let mut start = 0;
    while start < longest {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return Ok(rep);
        }
        let picked: Vec<Vec<usize>> = values
            .iter()
            .map(|t| (start.min(t.numel())..(start + chunk).min(t.numel())).collect())
            .collect();
        let r = grad_check(f, &values, &ElementSelection::PerParam(picked), config)?;
        rep.elements_checked += r.checked;
        rep.passed &= r.passed;
        if r.max_rel_error > rep.max_rel_error {
            rep.max_rel_error = r.max_rel_error;
            rep.worst = r.worst.map(|(i, e)| (names[i].clone(), e));
        }
        start += chunk;
    }
    rep.complete = rep.elements_checked == rep.total_params;
    Ok(rep)
}
