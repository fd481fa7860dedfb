use serde::{Deserialize, Serialize};

use super::neuron::NeuronConfig;
use crate::error::{Error, Result};
use crate::ops::conv_output_size;

/// One stage of the time-unrolled network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        window: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Dropout {
        p: f64,
    },
    Spiking {
        neuron: NeuronConfig,
    },
    Flatten,
    /// Sums the incoming currents over all timesteps into class logits.
    OutputAccumulator,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Spiking { .. } => "spiking",
            LayerSpec::Flatten => "flatten",
            LayerSpec::OutputAccumulator => "output_accumulator",
        }
    }

    fn produces_current(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Shape of one input sample, e.g. `[1, 28, 28]` or `[2]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Check structural invariants and return each layer's per-sample output
    /// shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::contract(format!("invalid input shape {:?}", self.input_shape)));
        }
        let accumulators = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::OutputAccumulator))
            .count();
        if accumulators != 1 || !matches!(self.layers.last(), Some(LayerSpec::OutputAccumulator)) {
            return Err(Error::contract("network needs exactly one output accumulator, at the end"));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::dim(format!("layer {i} ({}): {msg}", layer.kind()));
            shape = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if shape != [inputs] {
                        return Err(bad(format!("expects [{inputs}], receives {shape:?}")));
                    }
                    vec![outputs]
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(bad(format!("expects CHW input, receives {shape:?}")));
                    };
                    if c != in_channels {
                        return Err(bad(format!("expects {in_channels} channels, receives {c}")));
                    }
                    vec![
                        out_channels,
                        conv_output_size(h, kernel, stride, padding).map_err(|e| bad(e.to_string()))?,
                        conv_output_size(w, kernel, stride, padding).map_err(|e| bad(e.to_string()))?,
                    ]
                }
                LayerSpec::AvgPool { window } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(bad(format!("expects CHW input, receives {shape:?}")));
                    };
                    if window == 0 || h % window != 0 || w % window != 0 {
                        return Err(bad(format!("{h}x{w} not divisible by window {window}")));
                    }
                    vec![c, h / window, w / window]
                }
                LayerSpec::BatchNorm { channels } => {
                    if shape[0] != channels {
                        return Err(bad(format!("expects {channels} channels, receives {shape:?}")));
                    }
                    shape
                }
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(Error::contract(format!("layer {i}: dropout p={p} outside [0, 1)")));
                    }
                    shape
                }
                LayerSpec::Spiking { neuron } => {
                    neuron.validate()?;
                    if i == 0 || !self.layers[i - 1].produces_current() {
                        return Err(Error::contract(format!(
                            "layer {i}: spiking layer must follow dense, conv2d or batchnorm"
                        )));
                    }
                    shape
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::OutputAccumulator => {
                    if shape.len() != 1 {
                        return Err(bad(format!("expects flat class currents, receives {shape:?}")));
                    }
                    shape
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.validate()?.last().map(|s| s[0]).unwrap_or(0))
    }

    /// Indices of spiking layers, in depth order.
    pub fn spiking_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Spiking { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Human-readable name of a spiking layer, after the op feeding it.
    pub fn spiking_layer_name(&self, ordinal: usize) -> String {
        let layer = self.spiking_layers()[ordinal];
        let source = self.layers[..layer]
            .iter()
            .rev()
            .find(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. }))
            .map_or("input", LayerSpec::kind);
        format!("spike{ordinal}_{source}")
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// Apply `f` to every spiking layer's neuron configuration.
    pub fn map_neurons(&mut self, mut f: impl FnMut(&mut NeuronConfig)) {
        for layer in &mut self.layers {
            if let LayerSpec::Spiking { neuron } = layer {
                f(neuron);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spiking() -> LayerSpec {
        LayerSpec::Spiking {
            neuron: NeuronConfig::default(),
        }
    }

    fn net(layers: Vec<LayerSpec>) -> NetworkSpec {
        NetworkSpec {
            name: "t".into(),
            input_shape: vec![1, 8, 8],
            layers,
        }
    }

    #[test]
    fn infers_shapes_through_conv_pool_dense() {
        let spec = net(vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            spiking(),
            LayerSpec::AvgPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 64, outputs: 3 },
            LayerSpec::OutputAccumulator,
        ]);
        let shapes = spec.validate().unwrap();
        assert_eq!(shapes[0], vec![4, 8, 8]);
        assert_eq!(shapes[2], vec![4, 4, 4]);
        assert_eq!(spec.classes().unwrap(), 3);
        assert_eq!(spec.spiking_layers(), vec![1]);
        assert_eq!(spec.spiking_layer_name(0), "spike0_conv2d");
    }

    #[test]
    fn structural_errors() {
        let no_acc = net(vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 64, outputs: 2 }]);
        assert!(no_acc.validate().is_err());
        let spike_after_pool = net(vec![
            LayerSpec::AvgPool { window: 2 },
            spiking(),
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 16, outputs: 2 },
            LayerSpec::OutputAccumulator,
        ]);
        assert!(matches!(spike_after_pool.validate(), Err(Error::Contract(_))));
        let wrong_dense = net(vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 10, outputs: 2 },
            LayerSpec::OutputAccumulator,
        ]);
        assert!(matches!(wrong_dense.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn serializes_as_tagged_text() {
        let spec = net(vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 64, outputs: 2 }, LayerSpec::OutputAccumulator]);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains(r#""kind":"flatten""#));
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
