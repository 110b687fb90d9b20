use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{Gradients, LayerKind, ModelGraph, ModelState};
use crate::tensor::Element;

/// Position of one kernel: conv layer (graph index), output channel `n`
/// and input channel `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KernelIndex {
    pub layer: usize,
    pub out_channel: usize,
    pub in_channel: usize,
}

/// Keep/prune flags over the `(C_out, C_in)` kernel grid of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMask {
    out_channels: usize,
    in_channels: usize,
    keep: Vec<bool>,
}

impl KernelMask {
    pub fn all_kept(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            keep: vec![true; out_channels * in_channels],
        }
    }

    /// Row-major `(C_out, C_in)` flags, `true` = kept.
    pub fn from_flags(out_channels: usize, in_channels: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != out_channels * in_channels {
            return Err(shape_err!(
                "{} mask flags for a ({out_channels}, {in_channels}) grid",
                keep.len()
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            keep,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.out_channels, self.in_channels)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, out_channel: usize, in_channel: usize) -> bool {
        self.keep[out_channel * self.in_channels + in_channel]
    }

    pub fn prune(&mut self, out_channel: usize, in_channel: usize) {
        self.keep[out_channel * self.in_channels + in_channel] = false;
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.len() - self.kept_count()
    }

    /// Output channels whose every kernel is pruned.
    pub fn fully_pruned_filters(&self) -> usize {
        self.keep
            .chunks_exact(self.in_channels)
            .filter(|row| row.iter().all(|&k| !k))
            .count()
    }

    /// Prunes everything pruned in `other` as well.
    pub fn absorb(&mut self, other: &KernelMask) {
        for (a, &b) in self.keep.iter_mut().zip(&other.keep) {
            *a &= b;
        }
    }

    /// `true` when every kernel pruned here is also pruned in `later`.
    pub fn is_subset_of_pruned(&self, later: &KernelMask) -> bool {
        self.keep.iter().zip(&later.keep).all(|(&a, &b)| a || !b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| k as u8).collect()
    }

    pub fn from_bytes(out_channels: usize, in_channels: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != out_channels * in_channels || bytes.iter().any(|&b| b > 1) {
            return None;
        }
        Some(Self {
            out_channels,
            in_channels,
            keep: bytes.iter().map(|&b| b == 1).collect(),
        })
    }
}

/// One [`KernelMask`] per conv layer, keyed by graph layer index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSet {
    masks: BTreeMap<usize, KernelMask>,
}

impl MaskSet {
    pub fn all_kept(graph: &ModelGraph) -> Self {
        let masks = graph
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    ..
                } => Some((i, KernelMask::all_kept(out_channels, in_channels))),
                _ => None,
            })
            .collect();
        Self { masks }
    }

    pub fn get(&self, layer: usize) -> Option<&KernelMask> {
        self.masks.get(&layer)
    }

    pub fn insert(&mut self, layer: usize, mask: KernelMask) {
        self.masks.insert(layer, mask);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &KernelMask)> {
        self.masks.iter().map(|(&i, m)| (i, m))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Requires exactly one correctly shaped mask per conv layer.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        let convs = graph.conv_layers();
        let keys: Vec<usize> = self.masks.keys().copied().collect();
        if keys != convs {
            return Err(shape_err!("masks cover layers {keys:?}, conv layers are {convs:?}"));
        }
        for (&i, mask) in &self.masks {
            let LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } = graph.layers[i].kind
            else {
                unreachable!("keys are conv layers");
            };
            if mask.shape() != (out_channels, in_channels) {
                return Err(shape_err!(
                    "layer {i}: mask {:?}, layer is ({out_channels}, {in_channels})",
                    mask.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn pruned_count(&self) -> usize {
        self.masks.values().map(KernelMask::pruned_count).sum()
    }
}

/// Zeroes the `K x K` slice of every pruned kernel. Shapes and all other
/// parameters are left alone.
pub fn apply_masks<T: Element>(graph: &ModelGraph, state: &mut ModelState<T>, masks: &MaskSet) -> Result<()> {
    masks.check_against(graph)?;
    state.check_against(graph)?;
    for (layer, mask) in masks.iter() {
        let weight = state.weight_mut(layer).expect("conv layers have weights");
        zero_pruned(weight.data_mut(), mask);
    }
    Ok(())
}

fn zero_pruned<T: Element>(data: &mut [T], mask: &KernelMask) {
    let area = data.len() / mask.len();
    for (kernel, &keep) in data.chunks_exact_mut(area).zip(&mask.keep) {
        if !keep {
            kernel.fill(T::ZERO);
        }
    }
}

/// Hard fine-tuning: stops pruned kernels from moving. Zeroes their
/// gradients.
pub fn mask_gradients<T: Element>(grads: &mut Gradients<T>, masks: &MaskSet) {
    for (layer, mask) in masks.iter() {
        if let Some(g) = grads.layers.get_mut(layer).and_then(|g| g.first_mut()) {
            zero_pruned(g.data_mut(), mask);
        }
    }
}

/// Hard fine-tuning: re-zeroes pruned kernels and their momentum after an
/// optimizer step (weight decay and stale momentum would otherwise move
/// them).
pub fn freeze_pruned<T: Element>(state: &mut ModelState<T>, masks: &MaskSet) {
    for (layer, mask) in masks.iter() {
        if let Some(l) = state.layers.get_mut(layer) {
            if let Some(w) = l.params.first_mut() {
                zero_pruned(w.data_mut(), mask);
            }
            if let Some(v) = l.velocity.first_mut() {
                zero_pruned(v.data_mut(), mask);
            }
        }
    }
}
