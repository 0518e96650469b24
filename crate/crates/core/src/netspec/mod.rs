//! Network architecture description, validation, execution with taps, and
//! FLOPs accounting.

pub mod exec;
pub mod flops;
mod graph;
mod spec;
pub mod zoo;

pub use exec::{
    backward, forward, forward_trace, forward_with_taps, init_params, ChannelScaling, TapSet,
    Trace,
};
pub use flops::{compare, flops_of_conv, flops_of_spec, flops_total, FlopsReport};
pub use graph::{Network, ScoredUnit, Source};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, INPUT, SPEC_SCHEMA_VERSION};
