use std::collections::BTreeMap;

use super::graph::{LayerKind, ModelGraph, Source};
use super::ops::{self, BatchNormCache, BatchNormRunning};
use super::state::{Gradients, ModelState};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Element, Tensor};

enum Cache<T> {
    None,
    MaxPool(Vec<u32>),
    BatchNorm(BatchNormCache<T>),
}

/// Activations recorded by [`forward`], consumed by [`backward`].
pub struct ForwardPass<T: Element = f32> {
    training: bool,
    batch: usize,
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Element> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("graphs have at least one layer")
    }

    /// Output of layer `index`.
    pub fn feature(&self, index: usize) -> Option<&Tensor<T>> {
        self.outputs.get(index)
    }

    /// Outputs of the requested tap layers.
    pub fn tapped(&self, taps: &[usize]) -> BTreeMap<usize, &Tensor<T>> {
        taps.iter()
            .filter_map(|&i| self.outputs.get(i).map(|t| (i, t)))
            .collect()
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates kept in `state`.
    pub fn update_running_stats(&self, graph: &ModelGraph, state: &mut ModelState<T>) {
        for (i, cache) in self.caches.iter().enumerate() {
            let (Cache::BatchNorm(bn), LayerKind::Batchnorm2d { momentum, .. }) = (cache, &graph.layers[i].kind)
            else {
                continue;
            };
            let count = (self.outputs[i].len() / bn.mean.len()) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let [running_mean, running_var] = &mut state.layers[i].buffers[..] else {
                continue;
            };
            for (c, (m, v)) in running_mean
                .data_mut()
                .iter_mut()
                .zip(running_var.data_mut())
                .enumerate()
            {
                *m = T::from_f64((1.0 - momentum) * m.to_f64() + momentum * bn.mean[c]);
                *v = T::from_f64((1.0 - momentum) * v.to_f64() + momentum * bn.var[c] * unbias);
            }
        }
    }

    fn source(&self, graph: &ModelGraph, layer: usize) -> &Tensor<T> {
        match graph.source(layer) {
            Source::GraphInput => &self.input,
            Source::Layer(j) => &self.outputs[j],
        }
    }
}

fn with_batch(batch: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(sample.len() + 1);
    s.push(batch);
    s.extend_from_slice(sample);
    s
}

/// Runs `batch` (shape `(N, C, H, W)`) through the graph.
///
/// Convolution is cross-correlation. Batch norm uses batch statistics when
/// `training` is set and running statistics otherwise; the state is not
/// modified (see [`ForwardPass::update_running_stats`]).
pub fn forward<T: Element>(
    graph: &ModelGraph,
    state: &ModelState<T>,
    batch: &Tensor<T>,
    training: bool,
) -> Result<ForwardPass<T>> {
    let shapes = graph.output_shapes()?;
    state.check_against(graph)?;
    if batch.rank() != 4 || batch.shape()[1..] != graph.input_shape {
        return Err(shape_err!(
            "batch {:?} does not match input shape {:?}",
            batch.shape(),
            graph.input_shape
        ));
    }
    let n = batch.shape()[0];
    let mut pass = ForwardPass {
        training,
        batch: n,
        input: batch.clone(),
        outputs: Vec::with_capacity(graph.layers.len()),
        caches: Vec::with_capacity(graph.layers.len()),
    };
    for (i, layer) in graph.layers.iter().enumerate() {
        let x = pass.source(graph, i);
        let params = &state.layers[i].params;
        let out_shape = with_batch(n, &shapes[i]);
        let (data, cache) = match layer.kind {
            LayerKind::Conv2d { .. } => {
                let g = graph.conv_geometry_with(i, &shapes).expect("conv layer");
                let bias = params.get(1).map(|b| b.data());
                (ops::conv2d_forward(x.data(), n, &g, params[0].data(), bias), Cache::None)
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                let bias = params.get(1).map(|b| b.data());
                (
                    ops::linear_forward(x.data(), n, in_features, out_features, params[0].data(), bias),
                    Cache::None,
                )
            }
            LayerKind::Relu => (
                x.data().iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect(),
                Cache::None,
            ),
            LayerKind::Maxpool2d { kernel_size, stride } => {
                let xs = &x.shape()[1..];
                let (y, arg) = ops::maxpool_forward(
                    x.data(),
                    n * xs[0],
                    (xs[1], xs[2]),
                    (shapes[i][1], shapes[i][2]),
                    kernel_size,
                    stride,
                );
                (y, Cache::MaxPool(arg))
            }
            LayerKind::GlobalAvgPool => {
                let xs = &x.shape()[1..];
                (ops::global_avg_pool_forward(x.data(), n * xs[0], xs[1] * xs[2]), Cache::None)
            }
            LayerKind::Batchnorm2d {
                channels, epsilon, ..
            } => {
                let area = shapes[i][1] * shapes[i][2];
                if training {
                    let (y, c) = ops::batchnorm_train_forward(
                        x.data(),
                        n,
                        channels,
                        area,
                        params[0].data(),
                        params[1].data(),
                        epsilon,
                    );
                    (y, Cache::BatchNorm(c))
                } else {
                    let buffers = &state.layers[i].buffers;
                    let running = BatchNormRunning {
                        gamma: params[0].data(),
                        beta: params[1].data(),
                        mean: buffers[0].data(),
                        var: buffers[1].data(),
                        eps: epsilon,
                    };
                    (ops::batchnorm_eval_forward(x.data(), channels, area, &running), Cache::None)
                }
            }
            LayerKind::ResidualAdd { source } => {
                let skip = &pass.outputs[source];
                (
                    x.data().iter().zip(skip.data()).map(|(&a, &b)| a + b).collect(),
                    Cache::None,
                )
            }
            LayerKind::Flatten => (x.data().to_vec(), Cache::None),
        };
        pass.outputs.push(Tensor::new(out_shape, data)?);
        pass.caches.push(cache);
    }
    Ok(pass)
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, grad: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
        None => *slot = Some(grad),
    }
}

/// Backpropagates `logits_grad` (plus optional gradients injected at tap
/// layers) through a training-mode pass.
pub fn backward<T: Element>(
    graph: &ModelGraph,
    state: &ModelState<T>,
    pass: &ForwardPass<T>,
    logits_grad: &Tensor<T>,
    feature_grads: &[(usize, &Tensor<T>)],
) -> Result<Gradients<T>> {
    if !pass.training {
        return Err(invalid!("backward needs a training-mode forward pass"));
    }
    if pass.outputs.len() != graph.layers.len() {
        return Err(invalid!("forward pass was recorded on a different graph"));
    }
    if logits_grad.shape() != pass.logits().shape() {
        return Err(shape_err!(
            "logits gradient {:?} vs logits {:?}",
            logits_grad.shape(),
            pass.logits().shape()
        ));
    }
    let shapes = graph.output_shapes()?;
    let n = pass.batch;
    let mut grads = Gradients::zeros_like(state);
    let mut upstream: Vec<Option<Vec<T>>> = vec![None; graph.layers.len()];
    upstream[graph.layers.len() - 1] = Some(logits_grad.data().to_vec());
    for &(layer, g) in feature_grads {
        let Some(out) = pass.outputs.get(layer) else {
            return Err(invalid!("tap layer {layer} does not exist"));
        };
        if g.shape() != out.shape() {
            return Err(shape_err!("tap {layer} gradient {:?} vs output {:?}", g.shape(), out.shape()));
        }
        accumulate(&mut upstream[layer], g.data().to_vec());
    }

    for i in (0..graph.layers.len()).rev() {
        let Some(g_out) = upstream[i].take() else {
            continue;
        };
        let x = pass.source(graph, i);
        let params = &state.layers[i].params;
        let g_in: Vec<T> = match graph.layers[i].kind {
            LayerKind::Conv2d { .. } => {
                let geom = graph.conv_geometry_with(i, &shapes).expect("conv layer");
                let cg = ops::conv2d_backward(x.data(), &g_out, n, &geom, params[0].data());
                grads.layers[i][0].data_mut().copy_from_slice(&cg.weight);
                if let Some(b) = grads.layers[i].get_mut(1) {
                    b.data_mut().copy_from_slice(&cg.bias);
                }
                cg.input
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                let (gx, gw, gb) =
                    ops::linear_backward(x.data(), &g_out, n, in_features, out_features, params[0].data());
                grads.layers[i][0].data_mut().copy_from_slice(&gw);
                if let Some(b) = grads.layers[i].get_mut(1) {
                    b.data_mut().copy_from_slice(&gb);
                }
                gx
            }
            LayerKind::Relu => x
                .data()
                .iter()
                .zip(&g_out)
                .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                .collect(),
            LayerKind::Maxpool2d { .. } => {
                let Cache::MaxPool(arg) = &pass.caches[i] else {
                    unreachable!("maxpool cache");
                };
                let xs = &x.shape()[1..];
                ops::maxpool_backward(&g_out, arg, n * xs[0], xs[1] * xs[2], shapes[i][1] * shapes[i][2])
            }
            LayerKind::GlobalAvgPool => {
                let xs = &x.shape()[1..];
                ops::global_avg_pool_backward(&g_out, xs[1] * xs[2])
            }
            LayerKind::Batchnorm2d { channels, .. } => {
                let Cache::BatchNorm(cache) = &pass.caches[i] else {
                    unreachable!("training pass records batch-norm caches");
                };
                let area = shapes[i][1] * shapes[i][2];
                let (gx, gg, gb) = ops::batchnorm_backward(&g_out, n, channels, area, params[0].data(), cache);
                grads.layers[i][0].data_mut().copy_from_slice(&gg);
                grads.layers[i][1].data_mut().copy_from_slice(&gb);
                gx
            }
            LayerKind::ResidualAdd { source } => {
                accumulate(&mut upstream[source], g_out.clone());
                g_out
            }
            LayerKind::Flatten => g_out,
        };
        if let Source::Layer(j) = graph.source(i) {
            accumulate(&mut upstream[j], g_in);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::super::graph::LayerSpec;
    use super::*;

    fn single_layer(kind: LayerKind, input_shape: [usize; 3], classes: usize) -> ModelGraph {
        ModelGraph {
            name: "t".into(),
            input_shape,
            class_count: classes,
            layers: vec![LayerSpec::from(kind), LayerKind::Flatten.into()],
        }
    }

    #[test]
    fn identity_1x1_conv() {
        let g = single_layer(
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel_size: 1,
                stride: 1,
                padding: 0,
                bias: true,
            },
            [1, 3, 3],
            9,
        );
        let mut s = ModelState::<f32>::zeros(&g);
        s.layers[0].params[0].data_mut()[0] = 1.0;
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 - 4.0);
        let pass = forward(&g, &s, &x, false).unwrap();
        assert_eq!(pass.logits().data(), x.data());
    }

    #[test]
    fn relu_backward_gates() {
        // 1x1 identity conv feeding a relu; inputs +2 and -2
        let g = ModelGraph {
            name: "relu".into(),
            input_shape: [1, 1, 2],
            class_count: 2,
            layers: vec![
                LayerKind::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel_size: 1,
                    stride: 1,
                    padding: 0,
                    bias: true,
                }
                .into(),
                LayerKind::Relu.into(),
                LayerKind::Flatten.into(),
            ],
        };
        let mut s = ModelState::<f64>::zeros(&g);
        s.layers[0].params[0].data_mut()[0] = 1.0;
        let x = Tensor::new(vec![1, 1, 1, 2], vec![2.0, -2.0]).unwrap();
        let pass = forward(&g, &s, &x, true).unwrap();
        assert_eq!(pass.logits().data(), &[2.0, 0.0]);
        let up = Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap();
        let grads = backward(&g, &s, &pass, &up, &[]).unwrap();
        // only the +2 position lets gradient through
        assert_eq!(grads.layers[0][1].data(), &[0.7]);
        assert_eq!(grads.layers[0][0].data(), &[1.4]);
    }

    #[test]
    fn backward_rejects_eval_pass() {
        let g = ModelGraph::tinycnn([1, 4, 4], 2);
        let s = ModelState::<f32>::init(&g, 0);
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let pass = forward(&g, &s, &x, false).unwrap();
        let up = Tensor::zeros(&[1, 2]);
        assert!(backward(&g, &s, &pass, &up, &[]).is_err());
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let g = ModelGraph::tinycnn([1, 4, 4], 2);
        let s = ModelState::<f32>::init(&g, 0);
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(forward(&g, &s, &x, false).is_err());
    }

    #[test]
    fn running_stats_move_towards_batch_stats() {
        let g = ModelGraph {
            name: "bn".into(),
            input_shape: [1, 2, 2],
            class_count: 4,
            layers: vec![
                LayerKind::Batchnorm2d {
                    channels: 1,
                    epsilon: 1e-5,
                    momentum: 0.1,
                }
                .into(),
                LayerKind::Flatten.into(),
            ],
        };
        let mut s = ModelState::<f64>::zeros(&g);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pass = forward(&g, &s, &x, true).unwrap();
        pass.update_running_stats(&g, &mut s);
        let rm = s.layers[0].buffers[0].data()[0];
        let rv = s.layers[0].buffers[1].data()[0];
        assert!((rm - 0.25).abs() < 1e-12);
        // unbiased batch variance 5/3, blended with the initial 1.0
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
