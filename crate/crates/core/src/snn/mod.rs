mod arch;
mod network;
mod neuron;
mod spec;

pub use arch::{architecture, architecture_names, ArchOptions, DEEP16_LAYERS, DEEP16_WIDTH, SCALING_DEPTHS};
pub use network::{
    firing_rate, unroll_forward, ForwardOptions, ForwardOutput, LayerParams, Network, ParamVar, Seq, SpikingTrace,
    Trace,
};
pub use neuron::{fire, if_step, surrogate_grad, IfStep, NeuronConfig, ResetMode};
pub use spec::{LayerSpec, NetworkSpec};
