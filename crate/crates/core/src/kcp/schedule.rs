use std::collections::BTreeSet;

use log::info;
use rayon::prelude::*;

use super::center::{layer_distances, DistanceMatrix};
use super::mask::{apply_masks, KernelMask, MaskSet};
use super::select::{designate_adversarial_layers, select_prune_set};
use super::{Criteria, FinetuneMode, PruneConfig};
use crate::data::Dataset;
use crate::distill::Teacher;
use crate::error::Result;
use crate::metrics::{config_hash, flops_of_graph, flops_with_masks, sparsity, EpochRecord, MetricsReport, RunMetadata};
use crate::nn::{ModelGraph, ModelState};
use crate::train::{check_compatible, evaluate, train_epoch, EpochHooks, TrainConfig};

const EVAL_BATCH: usize = 256;

/// Portion pruned after pruning epoch `epoch` (1-based):
/// `target * epoch / epochs`, capped at the target.
pub fn portion_at(config: &PruneConfig, epoch: usize) -> f64 {
    (config.target_sparsity * epoch as f64 / config.epochs as f64).min(config.target_sparsity)
}

/// Progress of a pruning run.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    /// Pruning epochs completed.
    pub epoch: usize,
    pub portion: f64,
    /// Current masks. In hard mode these only ever lose kept entries.
    pub masks: MaskSet,
    pub eligible: Vec<usize>,
    /// Layers pruned farthest-first under [`Criteria::Adversarial`].
    pub adversarial_layers: BTreeSet<usize>,
}

impl PruneState {
    pub fn new(graph: &ModelGraph, config: &PruneConfig) -> Result<Self> {
        config.validate()?;
        graph.output_shapes()?;
        let eligible = config.eligible(graph)?;
        let adversarial_layers = match config.criteria {
            Criteria::Center => BTreeSet::new(),
            Criteria::Adversarial => {
                designate_adversarial_layers(&eligible, config.adversarial_layer_fraction, config.seed)?
            }
        };
        Ok(Self {
            epoch: 0,
            portion: 0.0,
            masks: MaskSet::all_kept(graph),
            eligible,
            adversarial_layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub epoch: usize,
    pub portion: f64,
    /// Kernels selected this epoch, summed over layers.
    pub selected: usize,
}

/// One pruning step: advance the portion, then per eligible layer compute
/// the cluster center and distances, select kernels and zero them.
///
/// Soft mode rebuilds the masks from scratch; hard mode adds the new
/// selection to the masks already in force.
pub fn prune_epoch(
    graph: &ModelGraph,
    state: &mut ModelState,
    prune_state: &mut PruneState,
    config: &PruneConfig,
) -> Result<PruneOutcome> {
    state.check_against(graph)?;
    prune_state.epoch += 1;
    let portion = portion_at(config, prune_state.epoch);
    prune_state.portion = portion;

    let distances: Vec<(usize, DistanceMatrix)> = prune_state
        .eligible
        .par_iter()
        .map(|&layer| {
            let w = state.weight(layer).expect("conv layers have weights");
            layer_distances(w, config.normalize_kernels).map(|d| (layer, d))
        })
        .collect::<Result<_>>()?;
    let selection = select_prune_set(
        &distances,
        portion,
        config.criteria,
        &prune_state.adversarial_layers,
        config.guard_full_filters,
    )?;

    let mut fresh = MaskSet::all_kept(graph);
    let mut selected = 0;
    for ((layer, d), kernels) in distances.iter().zip(&selection) {
        let mut mask = KernelMask::all_kept(d.out_channels, d.in_channels);
        for k in kernels {
            mask.prune(k.out_channel, k.in_channel);
        }
        selected += kernels.len();
        fresh.insert(*layer, mask);
    }
    match config.finetune_mode {
        FinetuneMode::Soft => prune_state.masks = fresh,
        FinetuneMode::Hard => {
            for (layer, mask) in fresh.iter() {
                let mut merged = prune_state.masks.get(layer).expect("conv layer").clone();
                merged.absorb(mask);
                prune_state.masks.insert(layer, merged);
            }
        }
    }
    apply_masks(graph, state, &prune_state.masks)?;
    Ok(PruneOutcome {
        epoch: prune_state.epoch,
        portion,
        selected,
    })
}

pub struct ScheduleOutput {
    pub state: ModelState,
    pub prune_state: PruneState,
    pub report: MetricsReport,
}

/// The full prune/fine-tune loop: `epochs` rounds of one fine-tuning epoch
/// on `train` followed by [`prune_epoch`], evaluating on `eval` after each.
pub fn run_schedule(
    graph: &ModelGraph,
    mut state: ModelState,
    train: &Dataset,
    eval: &Dataset,
    config: &PruneConfig,
    train_config: &TrainConfig,
    teacher: Option<&Teacher>,
) -> Result<ScheduleOutput> {
    config.validate()?;
    train_config.validate()?;
    check_compatible(graph, train)?;
    check_compatible(graph, eval)?;
    state.check_against(graph)?;
    let mut prune_state = PruneState::new(graph, config)?;
    let baseline = evaluate(graph, &state, eval, EVAL_BATCH)?;
    let hash_input = (config, train_config, teacher.map(|t| &t.config));
    let mut report = MetricsReport::new(RunMetadata {
        command: "prune".into(),
        graph: graph.name.clone(),
        seed: config.seed,
        config_hash: config_hash(&hash_input),
        baseline_flops: flops_of_graph(graph)?,
        param_count: graph.param_count() as u64,
        baseline_accuracy: Some(baseline.accuracy),
    });
    for e in 0..config.epochs {
        let frozen = match config.finetune_mode {
            FinetuneMode::Hard => Some(prune_state.masks.clone()),
            FinetuneMode::Soft => None,
        };
        let hooks = EpochHooks {
            frozen: frozen.as_ref(),
            teacher,
        };
        let stats = train_epoch(graph, &mut state, train, train_config, config.seed, e, hooks)?;
        let outcome = prune_epoch(graph, &mut state, &mut prune_state, config)?;
        let eval_stats = evaluate(graph, &state, eval, EVAL_BATCH)?;
        let sp = sparsity(graph, &state, &prune_state.masks, &prune_state.eligible);
        let record = EpochRecord {
            epoch: outcome.epoch,
            portion: Some(outcome.portion),
            train_loss: stats.loss,
            task_loss: stats.task_loss,
            fd_loss: stats.fd_loss,
            eval_accuracy: eval_stats.accuracy,
            eval_loss: eval_stats.loss,
            kernel_sparsity: sp.kernel_sparsity,
            param_sparsity: sp.param_sparsity,
            flops: flops_with_masks(graph, &prune_state.masks)?,
            fully_pruned_filters: sp.fully_pruned_filters,
        };
        info!(
            "prune epoch {}/{}: p={:.4} loss={:.4} acc={:.4} kernel_sparsity={:.4} flops={}",
            record.epoch,
            config.epochs,
            outcome.portion,
            record.train_loss,
            record.eval_accuracy,
            record.kernel_sparsity,
            record.flops
        );
        report.records.push(record);
    }
    Ok(ScheduleOutput {
        state,
        prune_state,
        report,
    })
}
