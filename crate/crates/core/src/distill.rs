//! Feature distillation: KL divergence between temperature-softened teacher
//! and student features, blended with the task loss.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{forward, ModelGraph, ModelState};
use crate::tensor::{Element, Tensor};

fn default_alpha() -> f64 {
    0.9
}

fn default_temperature() -> f64 {
    15.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the task loss; the feature loss gets `1 - alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Layer whose output is distilled, in both teacher and student.
    pub tap: usize,
    /// Multiply the feature loss and its gradient by `T^2`. Off by default:
    /// the plain KL sum is used unless this compensation is asked for.
    #[serde(default)]
    pub t_squared: bool,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha {} outside [0, 1]", self.alpha));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(invalid!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// `log softmax(x / t)` in `f64`.
fn log_softmax<T: Element>(x: &[T], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = x.iter().map(|v| v.to_f64() / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// Sum over the batch of `KL(softmax(C_t / T) || softmax(C_s / T))`, each
/// sample flattened to one distribution. The gradient is taken with respect
/// to the student features only.
pub fn fd_loss<T: Element>(teacher: &Tensor<T>, student: &Tensor<T>, temperature: f64) -> Result<(f64, Tensor<T>)> {
    fd_loss_scaled(teacher, student, temperature, false)
}

/// [`fd_loss`] with optional `T^2` scaling of loss and gradient.
pub fn fd_loss_scaled<T: Element>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    temperature: f64,
    t_squared: bool,
) -> Result<(f64, Tensor<T>)> {
    if teacher.shape() != student.shape() {
        return Err(shape_err!(
            "teacher features {:?} vs student features {:?}",
            teacher.shape(),
            student.shape()
        ));
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(invalid!("temperature must be positive, got {temperature}"));
    }
    let batch = teacher.shape()[0];
    let width = teacher.len() / batch;
    let scale = if t_squared { temperature * temperature } else { 1.0 };
    let mut loss = 0f64;
    let mut grad = Vec::with_capacity(student.len());
    for (t, s) in teacher.data().chunks_exact(width).zip(student.data().chunks_exact(width)) {
        let log_p = log_softmax(t, temperature);
        let log_q = log_softmax(s, temperature);
        for (lp, lq) in log_p.iter().zip(&log_q) {
            let p = lp.exp();
            loss += p * (lp - lq);
            grad.push(T::from_f64(scale * (lq.exp() - p) / temperature));
        }
    }
    let loss = scale * loss;
    if !loss.is_finite() {
        return Err(Error::NonFinite("feature distillation loss".into()));
    }
    // rounding can leave tiny negative sums when the distributions agree
    Ok((loss.max(0.0), Tensor::new(student.shape().to_vec(), grad)?))
}

/// Task and feature losses blended as `alpha * task + (1 - alpha) * fd`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blended<T: Element = f32> {
    pub loss: f64,
    pub task_loss: f64,
    pub fd_loss: f64,
    /// Scaled gradient at the logits.
    pub task_grad: Tensor<T>,
    /// Scaled gradient at the distilled feature.
    pub fd_grad: Tensor<T>,
}

pub fn combined_loss<T: Element>(task: (f64, Tensor<T>), fd: (f64, Tensor<T>), alpha: f64) -> Result<Blended<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha {alpha} outside [0, 1]"));
    }
    let (task_loss, task_grad) = task;
    let (fd_loss, fd_grad) = fd;
    let a = T::from_f64(alpha);
    let b = T::from_f64(1.0 - alpha);
    let task_grad = Tensor::new(task_grad.shape().to_vec(), task_grad.data().iter().map(|&g| a * g).collect())?;
    let fd_grad = Tensor::new(fd_grad.shape().to_vec(), fd_grad.data().iter().map(|&g| b * g).collect())?;
    Ok(Blended {
        loss: alpha * task_loss + (1.0 - alpha) * fd_loss,
        task_loss,
        fd_loss,
        task_grad,
        fd_grad,
    })
}

/// Frozen teacher network plus the distillation settings.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub graph: ModelGraph,
    pub state: ModelState,
    pub config: DistillConfig,
}

impl Teacher {
    /// Checks the tap exists in both graphs with identical output shapes.
    pub fn new(graph: ModelGraph, state: ModelState, config: DistillConfig, student: &ModelGraph) -> Result<Self> {
        config.validate()?;
        state.check_against(&graph)?;
        let teacher_shapes = graph.output_shapes()?;
        let student_shapes = student.output_shapes()?;
        let tap = config.tap;
        match (teacher_shapes.get(tap), student_shapes.get(tap)) {
            (Some(t), Some(s)) if t == s => {}
            (Some(t), Some(s)) => {
                return Err(invalid!("tap {tap}: teacher output {t:?}, student output {s:?}"));
            }
            _ => return Err(invalid!("tap {tap} is not a layer of both teacher and student")),
        }
        if graph.input_shape != student.input_shape {
            return Err(invalid!("teacher and student take different inputs"));
        }
        Ok(Self { graph, state, config })
    }

    /// Tap features of the teacher in inference mode.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = forward(&self.graph, &self.state, batch, false)?;
        Ok(pass.feature(self.config.tap).expect("tap validated").clone())
    }
}
