//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Outcome of checking one operation or composed loss.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares the reverse-mode gradient of a scalar-valued builder
/// against central finite differences at step `h`, in double
/// precision, over every element of every input.
///
/// The builder is re-invoked for each perturbed evaluation and must be
/// deterministic. All `inputs` are treated as differentiable. The
/// relative error denominator is `max(|analytic|, |numeric|, 1)`.
pub fn finite_diff_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
    build: F,
) -> Result<GradCheckRow, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let owned: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad())
        .collect();

    let mut graph = Graph::new();
    let vars: Vec<Var> = owned.iter().map(|t| graph.input(t)).collect();
    let loss = build(&mut graph, &vars)?;
    if graph.value(loss).len() != 1 {
        return Err(AutodiffError::NonScalarLoss {
            shape: graph.shape(loss).to_vec(),
        });
    }
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| graph.grad(v).to_vec()).collect();

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vs: Vec<Var> = tensors.iter().map(|t| g.input(t)).collect();
        let l = build(&mut g, &vs)?;
        Ok(g.scalar_value(l))
    };

    let mut max_rel_err = 0.0f64;
    for i in 0..owned.len() {
        for e in 0..owned[i].numel() {
            let base = owned[i].values()[e];
            let mut plus = owned.clone();
            plus[i].values_mut()[e] = base + h;
            let mut minus = owned.clone();
            minus[i].values_mut()[e] = base - h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[i].get(e).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    Ok(GradCheckRow {
        name: name.to_string(),
        max_rel_err,
        tolerance,
    })
}
