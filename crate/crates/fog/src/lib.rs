//! Deploy robot nodes across an edge machine and cloud instances, with a
//! topic registry, a node runtime, a secure bridging proxy and benchmarks.

pub mod bench;
pub mod channel;
pub mod cli;
pub mod faultlink;
pub mod net;
pub mod netmon;
pub mod node;
pub mod provider;
pub mod provisioner;
pub mod proxy;
pub mod registry;
pub mod signal;
pub mod state;
pub mod workloads;
