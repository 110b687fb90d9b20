//! Kernel cluster pruning.
//!
//! Per conv layer: average all kernels into a cluster center, measure each
//! kernel's Frobenius distance to it, and zero the `round(p * C_in * C_out)`
//! kernels nearest the center. The portion `p` grows linearly to the target
//! sparsity over the pruning epochs, with one fine-tuning epoch before
//! every pruning step.

pub mod center;
pub mod mask;
pub mod schedule;
pub mod select;

use serde::{Deserialize, Serialize};

pub use center::{cluster_center, kernel_distances, layer_distances, DistanceMatrix};
pub use mask::{apply_masks, KernelIndex, KernelMask, MaskSet};
pub use schedule::{portion_at, prune_epoch, run_schedule, PruneOutcome, PruneState, ScheduleOutput};
pub use select::{designate_adversarial_layers, prune_count, select_layer, select_prune_set};

use crate::error::{invalid, Result};
use crate::nn::ModelGraph;

/// Which kernels a pruning step removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criteria {
    /// Nearest to the layer's cluster center.
    #[default]
    Center,
    /// Farthest from the center, in a seeded subset of layers. A control
    /// that should hurt accuracy.
    Adversarial,
}

/// How pruned kernels behave while fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Pruned kernels keep training and masks are recomputed every epoch,
    /// so a kernel can come back.
    #[default]
    Soft,
    /// Pruned kernels stay zero; the pruned set only grows.
    Hard,
}

fn default_epochs() -> usize {
    10
}

fn default_adv_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Final fraction of kernels removed from every eligible layer.
    pub target_sparsity: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub criteria: Criteria,
    #[serde(default = "default_adv_fraction")]
    pub adversarial_layer_fraction: f64,
    #[serde(default)]
    pub normalize_kernels: bool,
    #[serde(default)]
    pub finetune_mode: FinetuneMode,
    /// Conv layers to prune; `None` means every conv layer.
    #[serde(default)]
    pub eligible_layers: Option<Vec<usize>>,
    /// Never prune the last remaining kernel of an output channel.
    #[serde(default)]
    pub guard_full_filters: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_sparsity: 0.5,
            epochs: default_epochs(),
            criteria: Criteria::Center,
            adversarial_layer_fraction: default_adv_fraction(),
            normalize_kernels: false,
            finetune_mode: FinetuneMode::Soft,
            eligible_layers: None,
            guard_full_filters: false,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.target_sparsity > 0.0 && self.target_sparsity <= 1.0) {
            problems.push(format!("target sparsity {} outside (0, 1]", self.target_sparsity));
        }
        if self.epochs == 0 {
            problems.push("pruning epochs must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.adversarial_layer_fraction) {
            problems.push(format!(
                "adversarial layer fraction {} outside [0, 1]",
                self.adversarial_layer_fraction
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid!("{}", problems.join("; ")))
        }
    }

    /// Eligible conv layers of `graph`, checked and in graph order.
    pub fn eligible(&self, graph: &ModelGraph) -> Result<Vec<usize>> {
        let convs = graph.conv_layers();
        match &self.eligible_layers {
            None => Ok(convs),
            Some(list) => {
                let mut list = list.clone();
                list.sort_unstable();
                list.dedup();
                if let Some(bad) = list.iter().find(|l| !convs.contains(l)) {
                    return Err(invalid!("eligible layer {bad} is not a conv layer"));
                }
                Ok(list)
            }
        }
    }
}
