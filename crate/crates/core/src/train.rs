//! Epoch-level training and evaluation.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{combined_loss, fd_loss_scaled, Teacher};
use crate::error::{invalid, shape_err, Error, Result};
use crate::kcp::mask::{freeze_pruned, mask_gradients};
use crate::kcp::MaskSet;
use crate::metrics::{config_hash, flops_of_graph, sparsity, EpochRecord, MetricsReport, RunMetadata};
use crate::nn::{backward, forward, sgd_step, softmax_cross_entropy, ModelGraph, ModelState, Sgd};

fn default_batch_size() -> usize {
    64
}

fn default_lr() -> f64 {
    0.05
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_gamma() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` epochs.
    #[serde(default)]
    pub lr_step: Option<usize>,
    #[serde(default = "default_gamma")]
    pub lr_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: default_batch_size(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_step: None,
            lr_gamma: default_gamma(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            problems.push(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.lr_step == Some(0) {
            problems.push("lr_step must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid!("{}", problems.join("; ")))
        }
    }

    /// Step-decayed learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            Some(step) if step > 0 => self.lr * self.lr_gamma.powi((epoch / step) as i32),
            _ => self.lr,
        }
    }

    pub fn sgd(&self, epoch: usize) -> Sgd {
        Sgd {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Extra behaviour of a fine-tuning epoch.
#[derive(Default, Clone, Copy)]
pub struct EpochHooks<'a> {
    /// Hard fine-tuning: kernels pruned here get no gradient and stay zero.
    pub frozen: Option<&'a MaskSet>,
    pub teacher: Option<&'a Teacher>,
}

/// Sample-weighted means over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub task_loss: f64,
    pub fd_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn check_compatible(graph: &ModelGraph, data: &Dataset) -> Result<()> {
    if data.sample_shape() != graph.input_shape {
        return Err(shape_err!(
            "dataset samples are {:?}, graph {} expects {:?}",
            data.sample_shape(),
            graph.name,
            graph.input_shape
        ));
    }
    if data.class_count > graph.class_count {
        return Err(shape_err!(
            "dataset has {} classes, graph {} predicts {}",
            data.class_count,
            graph.name,
            graph.class_count
        ));
    }
    Ok(())
}

/// One pass over `data` in the order fixed by `(seed, epoch)`.
pub fn train_epoch(
    graph: &ModelGraph,
    state: &mut ModelState,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
    epoch: usize,
    hooks: EpochHooks<'_>,
) -> Result<EpochStats> {
    check_compatible(graph, data)?;
    if data.is_empty() {
        return Err(invalid!("cannot train on an empty dataset"));
    }
    let sgd = config.sgd(epoch);
    let order = data.epoch_order(seed, epoch);
    let (mut total, mut task_total, mut fd_total) = (0f64, 0f64, 0f64);
    for chunk in order.chunks(config.batch_size) {
        let (images, labels) = data.batch(chunk);
        let pass = forward(graph, state, &images, true)?;
        let task = softmax_cross_entropy(pass.logits(), &labels)?;
        let mut grads = match hooks.teacher {
            None => {
                total += task.0 * chunk.len() as f64;
                task_total += task.0 * chunk.len() as f64;
                backward(graph, state, &pass, &task.1, &[])?
            }
            Some(teacher) => {
                let cfg = &teacher.config;
                let target = teacher.features(&images)?;
                let student = pass.feature(cfg.tap).expect("tap validated");
                let fd = fd_loss_scaled(&target, student, cfg.temperature, cfg.t_squared)?;
                let blended = combined_loss(task, fd, cfg.alpha)?;
                total += blended.loss * chunk.len() as f64;
                task_total += blended.task_loss * chunk.len() as f64;
                fd_total += blended.fd_loss * chunk.len() as f64;
                backward(graph, state, &pass, &blended.task_grad, &[(cfg.tap, &blended.fd_grad)])?
            }
        };
        if let Some(masks) = hooks.frozen {
            mask_gradients(&mut grads, masks);
        }
        pass.update_running_stats(graph, state);
        sgd_step(state, &grads, sgd)?;
        if let Some(masks) = hooks.frozen {
            freeze_pruned(state, masks);
        }
    }
    if !state.all_finite() {
        return Err(Error::NonFinite(format!("weights after epoch {epoch}")));
    }
    let n = data.len() as f64;
    Ok(EpochStats {
        loss: total / n,
        task_loss: task_total / n,
        fd_loss: hooks.teacher.map(|_| fd_total / n),
    })
}

/// Top-1 accuracy and mean cross-entropy in inference mode.
pub fn evaluate(graph: &ModelGraph, state: &ModelState, data: &Dataset, batch_size: usize) -> Result<EvalStats> {
    check_compatible(graph, data)?;
    if data.is_empty() {
        return Err(invalid!("cannot evaluate on an empty dataset"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut loss) = (0usize, 0f64);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk);
        let pass = forward(graph, state, &images, false)?;
        let logits = pass.logits();
        let (l, _) = softmax_cross_entropy(logits, &labels)?;
        loss += l * chunk.len() as f64;
        for (row, &label) in logits.data().chunks_exact(graph.class_count).zip(&labels) {
            // first maximum wins, so a constant model always predicts class 0
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(EvalStats {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

const EVAL_BATCH: usize = 256;

/// Trains for `config.epochs` epochs (numbered from `first_epoch`, which
/// fixes data order and learning rate), evaluating after each.
pub fn fit(
    graph: &ModelGraph,
    state: &mut ModelState,
    train: &Dataset,
    eval: &Dataset,
    config: &TrainConfig,
    seed: u64,
    first_epoch: usize,
) -> Result<MetricsReport> {
    config.validate()?;
    check_compatible(graph, eval)?;
    state.check_against(graph)?;
    let masks = MaskSet::all_kept(graph);
    let convs = graph.conv_layers();
    let flops = flops_of_graph(graph)?;
    let mut report = MetricsReport::new(RunMetadata {
        command: "train".into(),
        graph: graph.name.clone(),
        seed,
        config_hash: config_hash(&(config, first_epoch)),
        baseline_flops: flops,
        param_count: graph.param_count() as u64,
        baseline_accuracy: None,
    });
    for epoch in first_epoch..first_epoch + config.epochs {
        let stats = train_epoch(graph, state, train, config, seed, epoch, EpochHooks::default())?;
        let ev = evaluate(graph, state, eval, EVAL_BATCH)?;
        let sp = sparsity(graph, state, &masks, &convs);
        info!(
            "train epoch {}/{}: loss={:.4} acc={:.4}",
            epoch + 1,
            first_epoch + config.epochs,
            stats.loss,
            ev.accuracy
        );
        report.records.push(EpochRecord {
            epoch: epoch + 1,
            portion: None,
            train_loss: stats.loss,
            task_loss: stats.task_loss,
            fd_loss: None,
            eval_accuracy: ev.accuracy,
            eval_loss: ev.loss,
            kernel_sparsity: sp.kernel_sparsity,
            param_sparsity: sp.param_sparsity,
            flops,
            fully_pruned_filters: sp.fully_pruned_filters,
        });
    }
    Ok(report)
}
