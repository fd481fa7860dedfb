//! Single-file model checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! b"SPKGCKPT"  u32 version
//! u32 header_len, header_len bytes of JSON (topology and metadata)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, ndim * u32 dims,
//!             u64 element_count, element_count * f32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalization::BatchNormState;
use crate::snn::{LayerParams, Network, NetworkSpec};
use crate::tensor::Tensor;
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 8] = b"SPKGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// How a network was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub timesteps: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub meta: TrainingMeta,
    pub optimizer: Option<OptimizerState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    meta: TrainingMeta,
    gamma: Option<f64>,
    batch_norm: Vec<BnHyper>,
    optimizer_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct BnHyper {
    layer: usize,
    momentum: f64,
    epsilon: f64,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, meta: TrainingMeta) -> Self {
        Self {
            network,
            meta,
            optimizer: None,
        }
    }

    /// Fail with a topology error unless the stored network has the same
    /// layer structure as `spec` (neuron parameters may differ).
    pub fn check_topology(&self, spec: &NetworkSpec) -> Result<()> {
        let ours = self.network.spec();
        let strip = |s: &NetworkSpec| {
            s.layers
                .iter()
                .map(|l| l.kind().to_string() + &serde_json::to_string(&structural(l)).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        if ours.input_shape != spec.input_shape || strip(ours) != strip(spec) {
            return Err(Error::Topology(format!(
                "checkpoint holds {} layers over input {:?}, expected {} layers over {:?}",
                ours.layers.len(),
                ours.input_shape,
                spec.layers.len(),
                spec.input_shape
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let net = &self.network;
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        let mut batch_norm = Vec::new();
        for (i, p) in net.layer_params().iter().enumerate() {
            match p {
                LayerParams::Weight(w) => tensors.push((format!("layer{i}.weight"), w)),
                LayerParams::BatchNorm(bn) => {
                    tensors.push((format!("layer{i}.scale"), &bn.scale));
                    tensors.push((format!("layer{i}.shift"), &bn.shift));
                    tensors.push((format!("layer{i}.running_mean"), &bn.running_mean));
                    tensors.push((format!("layer{i}.running_var"), &bn.running_var));
                    batch_norm.push(BnHyper {
                        layer: i,
                        momentum: bn.momentum,
                        epsilon: bn.epsilon,
                    });
                }
                LayerParams::None => {}
            }
        }
        let param_names: Vec<String> = param_names(net);
        if let Some(opt) = &self.optimizer {
            if opt.first_moment.len() != param_names.len() || opt.second_moment.len() != param_names.len() {
                return Err(Error::contract("optimizer state does not match the parameter list"));
            }
            for (name, m) in param_names.iter().zip(&opt.first_moment) {
                tensors.push((format!("optimizer.m.{name}"), m));
            }
            for (name, v) in param_names.iter().zip(&opt.second_moment) {
                tensors.push((format!("optimizer.v.{name}"), v));
            }
        }
        let header = Header {
            spec: net.spec().clone(),
            meta: self.meta.clone(),
            gamma: net.gamma(),
            batch_norm,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let header = serde_json::to_vec_pretty(&header)?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len_u32(tensors.len())?.to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.ndim())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "not a spikegrad checkpoint"));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u32("header length")? as usize;
        let header_at = r.pos;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::format(header_at, format!("malformed header: {e}")))?;
        header.spec.validate()?;
        let template = Network::<f32>::init(header.spec.clone(), 0)?;

        let count = r.u32("tensor count")? as usize;
        let mut stored: Vec<(String, Tensor<f32>)> = Vec::new();
        for _ in 0..count.min(bytes.len()) {
            let name_at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(name_at + 4, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            if ndim > 8 {
                return Err(Error::format(r.pos - 4, format!("tensor {name}: rank {ndim} too large")));
            }
            let dims = (0..ndim)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len_at = r.pos;
            let len = usize::try_from(r.u64("element count")?)
                .map_err(|_| Error::format(len_at, "element count overflows"))?;
            let raw = r.take(
                len.checked_mul(4).ok_or_else(|| Error::format(len_at, "element count overflows"))?,
                "tensor data",
            )?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let expected = expected_shape(&template, &name).ok_or_else(|| {
                Error::Topology(format!("tensor {name} has no place in the stored topology"))
            })?;
            if dims != expected || dims.iter().product::<usize>() != len {
                return Err(Error::ShapeMismatch { name, expected, found: dims });
            }
            stored.push((name, Tensor::new(&dims, data)?));
        }
        if stored.len() != count {
            return Err(Error::format(r.pos, "tensor count exceeds file size"));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take = |name: &str| -> Result<Tensor<f32>> {
            let at = stored
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Topology(format!("checkpoint lacks tensor {name}")))?;
            Ok(stored.swap_remove(at).1)
        };
        let mut params = Vec::with_capacity(template.layer_params().len());
        for (i, p) in template.layer_params().iter().enumerate() {
            params.push(match p {
                LayerParams::None => LayerParams::None,
                LayerParams::Weight(_) => LayerParams::Weight(take(&format!("layer{i}.weight"))?),
                LayerParams::BatchNorm(_) => {
                    let hyper = header.batch_norm.iter().find(|b| b.layer == i);
                    let mut bn = BatchNormState::new(0);
                    bn.scale = take(&format!("layer{i}.scale"))?;
                    bn.shift = take(&format!("layer{i}.shift"))?;
                    bn.running_mean = take(&format!("layer{i}.running_mean"))?;
                    bn.running_var = take(&format!("layer{i}.running_var"))?;
                    if let Some(h) = hyper {
                        bn.momentum = h.momentum;
                        bn.epsilon = h.epsilon;
                    }
                    LayerParams::BatchNorm(bn)
                }
            });
        }
        let mut network = Network::from_parts(header.spec, params)?;
        if let Some(gamma) = header.gamma {
            network.set_gamma(gamma);
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let names = param_names(&network);
                let first_moment = names
                    .iter()
                    .map(|n| take(&format!("optimizer.m.{n}")))
                    .collect::<Result<Vec<_>>>()?;
                let second_moment = names
                    .iter()
                    .map(|n| take(&format!("optimizer.v.{n}")))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptimizerState {
                    step,
                    first_moment,
                    second_moment,
                })
            }
            None => None,
        };
        if let Some((name, _)) = stored.first() {
            return Err(Error::Topology(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            network,
            meta: header.meta,
            optimizer,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn param_names(net: &Network<f32>) -> Vec<String> {
    net.clone().params_mut().into_iter().map(|(n, _)| n).collect()
}

fn expected_shape(template: &Network<f32>, name: &str) -> Option<Vec<usize>> {
    let name = name
        .strip_prefix("optimizer.m.")
        .or_else(|| name.strip_prefix("optimizer.v."))
        .unwrap_or(name);
    let (layer, field) = name.strip_prefix("layer")?.split_once('.')?;
    let layer: usize = layer.parse().ok()?;
    match (template.layer_params().get(layer)?, field) {
        (LayerParams::Weight(w), "weight") => Some(w.shape().to_vec()),
        (LayerParams::BatchNorm(bn), "scale" | "shift" | "running_mean" | "running_var") => Some(vec![bn.channels()]),
        _ => None,
    }
}

/// Layer description without neuron parameters.
fn structural(layer: &crate::snn::LayerSpec) -> crate::snn::LayerSpec {
    match layer {
        crate::snn::LayerSpec::Spiking { neuron } => crate::snn::LayerSpec::Spiking {
            neuron: crate::snn::NeuronConfig {
                reset: neuron.reset,
                ..Default::default()
            },
        },
        other => other.clone(),
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("{n} exceeds the checkpoint field range")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos, format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }
}
