//! Architecture descriptions and shape propagation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::checked_numel;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn bn_epsilon() -> f64 {
    1e-5
}

fn bn_momentum() -> f64 {
    0.1
}

/// Layer kinds understood by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    Maxpool2d {
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    GlobalAvgPool,
    Batchnorm2d {
        channels: usize,
        #[serde(default = "bn_epsilon")]
        epsilon: f64,
        #[serde(default = "bn_momentum")]
        momentum: f64,
    },
    /// Adds the output of an earlier layer `source` to this layer's input.
    ResidualAdd {
        source: usize,
    },
    Flatten,
}

/// One node of a [`ModelGraph`].
///
/// A layer reads the previous layer's output unless `input` names an earlier
/// layer; projection shortcuts use this to branch off a block input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
}

impl From<LayerKind> for LayerSpec {
    fn from(kind: LayerKind) -> Self {
        Self { kind, input: None }
    }
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. })
    }
}

/// Where a layer reads its primary input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    GraphInput,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    /// `(channels, height, width)` of one sample.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

/// Geometry of a conv layer, resolved against its input shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent.checked_add(padding.checked_mul(2)?)?;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ModelGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        let graph: ModelGraph = serde_json::from_str(text)
            .map_err(|e| invalid!("architecture spec: {e}"))?;
        graph.output_shapes()?;
        Ok(graph)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidArgument(msg) | Error::Shape(msg) => {
                invalid!("{}: {msg}", path.display())
            }
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn source(&self, layer: usize) -> Source {
        match self.layers[layer].input {
            Some(i) => Source::Layer(i),
            None if layer == 0 => Source::GraphInput,
            None => Source::Layer(layer - 1),
        }
    }

    /// Indices of conv layers, in graph order.
    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_conv())
            .collect()
    }

    /// Per-sample output shape of every layer.
    ///
    /// Fails if any layer's declared sizes disagree with its input, if an
    /// index points forward, or if the last layer does not produce
    /// `class_count` values.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.contains(&0) {
            return Err(shape_err!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.class_count == 0 {
            return Err(invalid!("class_count must be positive"));
        }
        if self.layers.is_empty() {
            return Err(invalid!("graph {} has no layers", self.name));
        }
        checked_numel(&self.input_shape)
            .ok_or_else(|| shape_err!("input shape {:?} overflows", self.input_shape))?;
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(src) = layer.input {
                if src >= i {
                    return Err(invalid!("layer {i} reads from layer {src}, which is not earlier"));
                }
            }
            let input: &[usize] = match self.source(i) {
                Source::GraphInput => &self.input_shape,
                Source::Layer(j) => &shapes[j],
            };
            let out = self
                .layer_output_shape(i, input, &shapes)
                .map_err(|e| match e {
                    Error::Shape(msg) => shape_err!("layer {i}: {msg}"),
                    Error::InvalidArgument(msg) => invalid!("layer {i}: {msg}"),
                    other => other,
                })?;
            checked_numel(&out).ok_or_else(|| shape_err!("layer {i}: output {out:?} overflows"))?;
            shapes.push(out);
        }
        let last = shapes.last().expect("non-empty");
        if last.as_slice() != [self.class_count] {
            return Err(shape_err!(
                "final output {last:?} does not match class_count {}",
                self.class_count
            ));
        }
        Ok(shapes)
    }

    fn layer_output_shape(
        &self,
        index: usize,
        input: &[usize],
        earlier: &[Vec<usize>],
    ) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(shape_err!("{what} needs a (C, H, W) input, got {input:?}")),
            }
        };
        Ok(match self.layers[index].kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
                    return Err(invalid!("conv2d sizes and stride must be positive"));
                }
                let (c, h, w) = spatial("conv2d")?;
                if c != in_channels {
                    return Err(shape_err!("conv2d expects {in_channels} channels, input has {c}"));
                }
                let oh = window_out(h, kernel_size, stride, padding);
                let ow = window_out(w, kernel_size, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![out_channels, oh, ow],
                    _ => return Err(shape_err!("kernel {kernel_size} does not fit input {input:?}")),
                }
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err(invalid!("linear sizes must be positive"));
                }
                if input != [in_features] {
                    return Err(shape_err!("linear expects [{in_features}], input is {input:?}"));
                }
                vec![out_features]
            }
            LayerKind::Relu => input.to_vec(),
            LayerKind::Maxpool2d {
                kernel_size,
                stride,
            } => {
                if kernel_size == 0 || stride == 0 {
                    return Err(invalid!("maxpool2d sizes must be positive"));
                }
                let (c, h, w) = spatial("maxpool2d")?;
                match (window_out(h, kernel_size, stride, 0), window_out(w, kernel_size, stride, 0)) {
                    (Some(oh), Some(ow)) => vec![c, oh, ow],
                    _ => return Err(shape_err!("pool window {kernel_size} does not fit {input:?}")),
                }
            }
            LayerKind::GlobalAvgPool => vec![spatial("global_avg_pool")?.0],
            LayerKind::Batchnorm2d {
                channels,
                epsilon,
                momentum,
            } => {
                let (c, _, _) = spatial("batchnorm2d")?;
                if c != channels {
                    return Err(shape_err!("batchnorm2d expects {channels} channels, input has {c}"));
                }
                if epsilon.is_nan() || epsilon <= 0.0 || !(0.0..=1.0).contains(&momentum) {
                    return Err(invalid!("batchnorm2d needs epsilon > 0 and momentum in [0, 1]"));
                }
                input.to_vec()
            }
            LayerKind::ResidualAdd { source } => {
                if source >= index {
                    return Err(invalid!("residual source {source} is not an earlier layer"));
                }
                if earlier[source] != input {
                    return Err(shape_err!(
                        "residual source {source} has shape {:?}, input has {input:?}",
                        earlier[source]
                    ));
                }
                input.to_vec()
            }
            LayerKind::Flatten => vec![input.iter().product()],
        })
    }

    /// Geometry of conv layer `index`, or `None` when it is not a conv layer.
    pub fn conv_geometry(&self, index: usize) -> Result<Option<ConvGeometry>> {
        let shapes = self.output_shapes()?;
        Ok(self.conv_geometry_with(index, &shapes))
    }

    pub(crate) fn conv_geometry_with(&self, index: usize, shapes: &[Vec<usize>]) -> Option<ConvGeometry> {
        let LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            ..
        } = self.layers[index].kind
        else {
            return None;
        };
        let input: &[usize] = match self.source(index) {
            Source::GraphInput => &self.input_shape,
            Source::Layer(j) => &shapes[j],
        };
        let out = &shapes[index];
        Some(ConvGeometry {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            in_h: input[1],
            in_w: input[2],
            out_h: out[1],
            out_w: out[2],
        })
    }

    /// Shapes of the trainable parameters of layer `index`, in storage order.
    pub fn param_shapes(&self, index: usize) -> Vec<Vec<usize>> {
        match self.layers[index].kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, kernel_size, kernel_size]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![vec![out_features, in_features]];
                if bias {
                    v.push(vec![out_features]);
                }
                v
            }
            LayerKind::Batchnorm2d { channels, .. } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    /// Names matching [`param_shapes`](Self::param_shapes).
    pub fn param_names(&self, index: usize) -> Vec<&'static str> {
        match self.layers[index].kind {
            LayerKind::Conv2d { bias, .. } | LayerKind::Linear { bias, .. } => {
                if bias {
                    vec!["weight", "bias"]
                } else {
                    vec!["weight"]
                }
            }
            LayerKind::Batchnorm2d { .. } => vec!["weight", "bias"],
            _ => Vec::new(),
        }
    }

    /// Non-trainable buffers (batch-norm running statistics).
    pub fn buffer_shapes(&self, index: usize) -> Vec<Vec<usize>> {
        match self.layers[index].kind {
            LayerKind::Batchnorm2d { channels, .. } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    pub fn buffer_names(&self, index: usize) -> Vec<&'static str> {
        match self.layers[index].kind {
            LayerKind::Batchnorm2d { .. } => vec!["running_mean", "running_var"],
            _ => Vec::new(),
        }
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        (0..self.layers.len())
            .flat_map(|i| self.param_shapes(i))
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Small CNN: three 3x3 conv stages (8, 16, 32 channels) with ReLU, two
    /// 2x2 max-pools, global average pooling and a linear classifier.
    pub fn tinycnn(input_shape: [usize; 3], class_count: usize) -> Self {
        let conv = |cin, cout| LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            bias: true,
        };
        let pool = || LayerKind::Maxpool2d {
            kernel_size: 2,
            stride: 2,
        };
        let layers = vec![
            conv(input_shape[0], 8),
            LayerKind::Relu,
            pool(),
            conv(8, 16),
            LayerKind::Relu,
            pool(),
            conv(16, 32),
            LayerKind::Relu,
            LayerKind::GlobalAvgPool,
            LayerKind::Linear {
                in_features: 32,
                out_features: class_count,
                bias: true,
            },
        ];
        Self {
            name: "tinycnn".into(),
            input_shape,
            class_count,
            layers: layers.into_iter().map(LayerSpec::from).collect(),
        }
    }

    /// CIFAR-style ResNet of depth `6n + 2`: a 16-channel stem, three stages
    /// of `n` basic blocks at widths 16/32/64, stride-2 downsampling at the
    /// first block of stages two and three with 1x1 projection shortcuts,
    /// global average pooling and a linear classifier.
    pub fn resnet_cifar(depth: usize, class_count: usize) -> Result<Self> {
        if depth < 8 || !(depth - 2).is_multiple_of(6) {
            return Err(invalid!("resnet depth must be 6n+2 with n >= 1, got {depth}"));
        }
        let blocks = (depth - 2) / 6;
        let mut layers: Vec<LayerSpec> = Vec::new();
        let conv = |cin, cout, k, stride, padding| LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride,
            padding,
            bias: false,
        };
        let bn = |channels| LayerKind::Batchnorm2d {
            channels,
            epsilon: bn_epsilon(),
            momentum: bn_momentum(),
        };
        layers.push(conv(3, 16, 3, 1, 1).into());
        layers.push(bn(16).into());
        layers.push(LayerKind::Relu.into());
        let mut in_width = 16;
        for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
            for block in 0..blocks {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let block_input = layers.len() - 1;
                layers.push(conv(in_width, width, 3, stride, 1).into());
                layers.push(bn(width).into());
                layers.push(LayerKind::Relu.into());
                layers.push(conv(width, width, 3, 1, 1).into());
                layers.push(bn(width).into());
                let main = layers.len() - 1;
                if stride != 1 || in_width != width {
                    layers.push(LayerSpec {
                        kind: conv(in_width, width, 1, stride, 0),
                        input: Some(block_input),
                    });
                    layers.push(bn(width).into());
                    layers.push(LayerKind::ResidualAdd { source: main }.into());
                } else {
                    layers.push(LayerKind::ResidualAdd {
                        source: block_input,
                    }
                    .into());
                }
                layers.push(LayerKind::Relu.into());
                in_width = width;
            }
        }
        layers.push(LayerKind::GlobalAvgPool.into());
        layers.push(
            LayerKind::Linear {
                in_features: 64,
                out_features: class_count,
                bias: true,
            }
            .into(),
        );
        Ok(Self {
            name: format!("resnet{depth}"),
            input_shape: [3, 32, 32],
            class_count,
            layers,
        })
    }
}
