//! Built-in named architectures.

use super::neuron::NeuronConfig;
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

/// Depths accepted by `scaling-N`.
pub const SCALING_DEPTHS: [usize; 5] = [3, 4, 5, 9, 13];
pub const DEEP16_LAYERS: usize = 16;
pub const DEEP16_WIDTH: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchOptions {
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub neuron: NeuronConfig,
    pub batch_norm: bool,
    /// Dropout probability before the last layer (`mnist-2conv` only).
    pub dropout: f64,
    /// Hidden width of `deep16`.
    pub width: usize,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            input_shape: vec![1, 28, 28],
            classes: 10,
            neuron: NeuronConfig::default(),
            batch_norm: true,
            dropout: 0.5,
            width: DEEP16_WIDTH,
        }
    }
}

pub fn architecture_names() -> Vec<String> {
    let mut names = vec!["mnist-2conv".to_string(), "deep16".to_string()];
    names.extend(SCALING_DEPTHS.iter().map(|n| format!("scaling-{n}")));
    names
}

/// Build a named architecture.
///
/// * `mnist-2conv`: conv 32 5x5, pool 2, conv 64 5x5, pool 2, dense 1024,
///   dropout, dense to classes.
/// * `scaling-N`: `N - 1` 3x3 convs and one dense layer. For N <= 5 every
///   conv has stride 2; for 9 and 13 the convs form four blocks of 2 or 3
///   where only the first of each block has stride 2. Channels start at 32
///   and double after every stride-2 conv.
/// * `deep16`: 16 dense spiking layers of equal width on flat inputs.
///
/// Each conv/dense layer feeding a spiking layer is followed by batch norm
/// when `opts.batch_norm` is set.
pub fn architecture(name: &str, opts: &ArchOptions) -> Result<NetworkSpec> {
    let mut b = Builder::new(opts);
    match name {
        "mnist-2conv" => {
            b.conv(32, 5, 1, 0)?;
            b.pool(2);
            b.conv(64, 5, 1, 0)?;
            b.pool(2);
            b.flatten();
            b.dense(1024, true);
            if opts.dropout > 0.0 {
                b.layers.push(LayerSpec::Dropout { p: opts.dropout });
            }
        }
        "deep16" => {
            b.flatten();
            for _ in 0..DEEP16_LAYERS {
                b.dense(opts.width, true);
            }
        }
        _ => {
            let depth: usize = name
                .strip_prefix("scaling-")
                .and_then(|n| n.parse().ok())
                .filter(|n| SCALING_DEPTHS.contains(n))
                .ok_or_else(|| {
                    Error::contract(format!(
                        "unknown architecture {name:?}; expected one of {}",
                        architecture_names().join(", ")
                    ))
                })?;
            let per_block = match depth {
                9 => 2,
                13 => 3,
                _ => 1,
            };
            let convs = depth - 1;
            let mut channels = 32;
            for i in 0..convs {
                let stride = if i % per_block == 0 { 2 } else { 1 };
                if stride == 2 && i > 0 {
                    channels *= 2;
                }
                b.conv(channels, 3, stride, 1)?;
            }
            b.flatten();
        }
    }
    b.dense(opts.classes, false);
    b.layers.push(LayerSpec::OutputAccumulator);
    let spec = NetworkSpec {
        name: name.to_string(),
        input_shape: opts.input_shape.clone(),
        layers: b.layers,
    };
    spec.validate()?;
    Ok(spec)
}

struct Builder<'a> {
    opts: &'a ArchOptions,
    layers: Vec<LayerSpec>,
    shape: Vec<usize>,
}

impl<'a> Builder<'a> {
    fn new(opts: &'a ArchOptions) -> Self {
        Self {
            opts,
            layers: Vec::new(),
            shape: opts.input_shape.clone(),
        }
    }

    fn spiking(&mut self, channels: usize) {
        if self.opts.batch_norm {
            self.layers.push(LayerSpec::BatchNorm { channels });
        }
        self.layers.push(LayerSpec::Spiking {
            neuron: self.opts.neuron,
        });
    }

    fn conv(&mut self, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Result<()> {
        let &[c, h, w] = self.shape.as_slice() else {
            return Err(Error::dim(format!("convolution needs CHW input, got {:?}", self.shape)));
        };
        let oh = crate::ops::conv_output_size(h, kernel, stride, padding)?;
        let ow = crate::ops::conv_output_size(w, kernel, stride, padding)?;
        self.layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels,
            kernel,
            stride,
            padding,
        });
        self.shape = vec![out_channels, oh, ow];
        self.spiking(out_channels);
        Ok(())
    }

    fn pool(&mut self, window: usize) {
        self.layers.push(LayerSpec::AvgPool { window });
        self.shape = vec![self.shape[0], self.shape[1] / window, self.shape[2] / window];
    }

    fn flatten(&mut self) {
        if self.shape.len() > 1 {
            self.layers.push(LayerSpec::Flatten);
            self.shape = vec![self.shape.iter().product()];
        }
    }

    fn dense(&mut self, outputs: usize, spiking: bool) {
        self.layers.push(LayerSpec::Dense {
            inputs: self.shape[0],
            outputs,
        });
        self.shape = vec![outputs];
        if spiking {
            self.spiking(outputs);
        }
    }
}
