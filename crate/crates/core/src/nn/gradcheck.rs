//! Central finite-difference gradient checking on `f64` shadow weights.
//!
//! The numeric derivative uses the five-point stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::exec::{backward, forward, ForwardPass};
use super::graph::ModelGraph;
use super::loss::softmax_cross_entropy;
use super::state::ModelState;
use crate::error::Result;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Step of the five-point central difference; the outer points sit at
    /// twice this distance.
    pub step: f64,
    /// Entries sampled from every parameter tensor.
    pub samples_per_param: usize,
    /// Denominator floor of the relative error, so that gradients that are
    /// both essentially zero compare as equal.
    pub abs_floor: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: 5,
            abs_floor: 1e-7,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLocation {
    pub layer: usize,
    pub param: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ParamLocation>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Scalar objective evaluated on a forward pass, with its gradient at the
/// logits and optionally at intermediate layers.
pub struct ObjectiveValue {
    pub loss: f64,
    pub logits_grad: Tensor<f64>,
    pub feature_grads: Vec<(usize, Tensor<f64>)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradient check of the mean cross-entropy loss in training mode.
pub fn grad_check<T: Element>(
    graph: &ModelGraph,
    state: &ModelState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    grad_check_objective(graph, state, batch, config, |pass| {
        let (loss, logits_grad) = softmax_cross_entropy(pass.logits(), labels)?;
        Ok(ObjectiveValue {
            loss,
            logits_grad,
            feature_grads: Vec::new(),
        })
    })
}

/// Gradient check of an arbitrary objective.
pub fn grad_check_objective<T, F>(
    graph: &ModelGraph,
    state: &ModelState<T>,
    batch: &Tensor<T>,
    config: &GradCheckConfig,
    objective: F,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&ForwardPass<f64>) -> Result<ObjectiveValue>,
{
    let mut shadow: ModelState<f64> = state.cast();
    let batch: Tensor<f64> = batch.cast();
    let pass = forward(graph, &shadow, &batch, true)?;
    let value = objective(&pass)?;
    let taps: Vec<(usize, &Tensor<f64>)> = value.feature_grads.iter().map(|(i, g)| (*i, g)).collect();
    let grads = backward(graph, &shadow, &pass, &value.logits_grad, &taps)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance: config.tolerance,
    };
    for layer in 0..shadow.layers.len() {
        for param in 0..shadow.layers[layer].params.len() {
            let len = shadow.layers[layer].params[param].len();
            let picks = sample(&mut rng, len, config.samples_per_param.min(len)).into_vec();
            for index in picks {
                let original = shadow.layers[layer].params[param].data()[index];
                let mut loss_at = |v: f64| -> Result<f64> {
                    shadow.layers[layer].params[param].data_mut()[index] = v;
                    let p = forward(graph, &shadow, &batch, true)?;
                    objective(&p).map(|o| o.loss)
                };
                let h = config.step;
                let (p1, m1) = (loss_at(original + h)?, loss_at(original - h)?);
                let (p2, m2) = (loss_at(original + 2.0 * h)?, loss_at(original - 2.0 * h)?);
                shadow.layers[layer].params[param].data_mut()[index] = original;
                let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                let analytic = grads.layers[layer][param].data()[index];
                let err = relative_error(analytic, numeric, config.abs_floor);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some(ParamLocation { layer, param, index });
                    report.analytic = analytic;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
