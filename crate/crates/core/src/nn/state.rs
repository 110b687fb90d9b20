use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{LayerKind, ModelGraph};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Parameters, buffers and optimizer slots of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T: Element = f32> {
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
    /// Momentum buffers, aligned with `params`.
    pub velocity: Vec<Tensor<T>>,
}

/// All weights of a [`ModelGraph`], one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Element = f32> {
    pub layers: Vec<LayerState<T>>,
}

/// Gradients aligned with [`ModelState::layers`]`[i].params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Element = f32> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn zeros_like(state: &ModelState<T>) -> Self {
        Self {
            layers: state
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }
}

impl<T: Element> ModelState<T> {
    /// Zero weights, unit batch-norm scale and variance.
    pub fn zeros(graph: &ModelGraph) -> Self {
        let layers = (0..graph.layers.len())
            .map(|i| {
                let params: Vec<Tensor<T>> = graph
                    .param_shapes(i)
                    .iter()
                    .enumerate()
                    .map(|(p, s)| match (&graph.layers[i].kind, p) {
                        (LayerKind::Batchnorm2d { .. }, 0) => Tensor::full(s, T::ONE),
                        _ => Tensor::zeros(s),
                    })
                    .collect();
                let buffers = graph
                    .buffer_shapes(i)
                    .iter()
                    .enumerate()
                    .map(|(b, s)| if b == 1 { Tensor::full(s, T::ONE) } else { Tensor::zeros(s) })
                    .collect();
                let velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                LayerState {
                    params,
                    buffers,
                    velocity,
                }
            })
            .collect();
        Self { layers }
    }

    /// He-normal conv weights, uniform `±1/sqrt(fan_in)` linear weights,
    /// zero biases.
    pub fn init(graph: &ModelGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = Self::zeros(graph);
        for (layer, spec) in state.layers.iter_mut().zip(&graph.layers) {
            match spec.kind {
                LayerKind::Conv2d {
                    in_channels,
                    kernel_size,
                    ..
                } => {
                    let fan_in = (in_channels * kernel_size * kernel_size) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    for v in layer.params[0].data_mut() {
                        *v = T::from_f64(normal.sample(&mut rng));
                    }
                }
                LayerKind::Linear { in_features, .. } => {
                    let bound = 1.0 / (in_features as f64).sqrt();
                    for v in layer.params[0].data_mut() {
                        *v = T::from_f64(rng.random_range(-bound..bound));
                    }
                }
                _ => {}
            }
        }
        state
    }

    /// Checks every tensor against the shapes `graph` declares.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        if self.layers.len() != graph.layers.len() {
            return Err(shape_err!(
                "state has {} layers, graph has {}",
                self.layers.len(),
                graph.layers.len()
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let want = graph.param_shapes(i);
            let got: Vec<&[usize]> = layer.params.iter().map(|t| t.shape()).collect();
            let vel: Vec<&[usize]> = layer.velocity.iter().map(|t| t.shape()).collect();
            if got != want || vel != want {
                return Err(shape_err!("layer {i}: parameters {got:?}, expected {want:?}"));
            }
            let want = graph.buffer_shapes(i);
            let got: Vec<&[usize]> = layer.buffers.iter().map(|t| t.shape()).collect();
            if got != want {
                return Err(shape_err!("layer {i}: buffers {got:?}, expected {want:?}"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ModelState<U> {
        ModelState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    params: l.params.iter().map(Tensor::cast).collect(),
                    buffers: l.buffers.iter().map(Tensor::cast).collect(),
                    velocity: l.velocity.iter().map(Tensor::cast).collect(),
                })
                .collect(),
        }
    }

    pub fn reset_velocity(&mut self) {
        for layer in &mut self.layers {
            for v in &mut layer.velocity {
                v.fill(T::ZERO);
            }
        }
    }

    /// Weight tensor of layer `index` (first parameter), if it has one.
    pub fn weight(&self, index: usize) -> Option<&Tensor<T>> {
        self.layers.get(index)?.params.first()
    }

    pub fn weight_mut(&mut self, index: usize) -> Option<&mut Tensor<T>> {
        self.layers.get_mut(index)?.params.first_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.params.iter().chain(&l.buffers).all(Tensor::all_finite))
    }
}
