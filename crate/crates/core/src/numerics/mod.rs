//! Dense `f64` tensors and a tape for reverse-mode differentiation.

mod graph;
mod tensor;

pub use graph::{logistic, softmax_rows, CustomVjp, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Step for [`grad_check`]. With the fourth-order stencil truncation error is
/// negligible here and rounding noise stays near 1e-11.
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Denominator floor of [`relative_error`]. A one-ulp change in a loss of
/// order one moves the stencil estimate by about 4e-12 at [`GRAD_CHECK_EPS`],
/// so gradient entries below this magnitude are effectively compared in
/// absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;
/// Relative agreement required between stencil estimates at adjacent steps.
pub const STEP_AGREEMENT: f64 = 5e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("every target position is padding; nothing to average")]
    DegenerateBatch,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Softmax over the last axis of an untracked tensor.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    softmax_rows(x)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

pub fn cross_entropy_masked(logits: &Tensor, targets: &[usize], pad_id: usize) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy_masked(l, targets, pad_id)?;
    Ok(g.value(loss).item())
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Input index and flat element offset of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub evaluations: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(NumericsError::NonScalarLoss(value.shape().to_vec()));
    }
    if !value.item().is_finite() {
        let (node, op) = g
            .first_non_finite()
            .map(|(v, op)| (v.index(), op))
            .unwrap_or((out.index(), "output"));
        return Err(NumericsError::NonFinite { op, node });
    }
    Ok(value.item())
}

/// Compares the analytic gradient of scalar `f` at `inputs` against the
/// five-point central difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`,
/// element by element over every input.
///
/// Each element is probed with `h = 100·eps`, `10·eps` and `eps` in turn; the
/// first estimate that agrees with the next finer one to [`STEP_AGREEMENT`]
/// is used, otherwise the `eps` estimate. Large steps keep rounding noise low
/// while the finer fallback handles stencils that straddle a ReLU kink. The
/// analytic gradient plays no part in the choice.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        let (node, op) = g
            .first_non_finite()
            .map(|(v, op)| (v.index(), op))
            .unwrap_or((out.index(), "output"));
        return Err(NumericsError::NonFinite { op, node });
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        evaluations: 1,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for j in 0..inputs[i].len() {
            let base = inputs[i].data()[j];
            let mut stencil = |h: f64| -> Result<f64, NumericsError> {
                let mut at = |offset: f64| {
                    probe[i].data_mut()[j] = base + offset;
                    evaluate(&f, &probe)
                };
                let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
                probe[i].data_mut()[j] = base;
                report.evaluations += 4;
                Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
            };
            let coarse = stencil(100.0 * eps)?;
            let middle = stencil(10.0 * eps)?;
            let numeric = if relative_error(coarse, middle) <= STEP_AGREEMENT {
                coarse
            } else {
                let fine = stencil(eps)?;
                if relative_error(middle, fine) <= STEP_AGREEMENT {
                    middle
                } else {
                    fine
                }
            };
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
