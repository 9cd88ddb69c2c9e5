//! Platform-independent pieces of the fog edge/cloud launcher: the frame
//! codec and control records, registry tables, bridge discovery, launch
//! manifests and deployment plans, monitoring records, timing arithmetic,
//! the benchmark kernel and the secure channel state machines.
//!
//! Everything here is `no_std` + `alloc`; sockets, processes and files live
//! in the `fog` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod backoff;
pub mod codec;
pub mod control;
pub mod discovery;
pub mod kernel;
pub mod manifest;
pub mod plan;
pub mod secure;
pub mod stats;
pub mod table;
pub mod timing;
pub mod topic;

pub use codec::{decode_frame, encode_data, encode_frame, Frame, FrameKind, MessageEnvelope, NodeId, Origin};
pub use control::Control;
pub use discovery::{discover_bridgeable, BridgeEntry, BridgeTable, Direction};
pub use manifest::{parse_manifest, Catalog, LaunchManifest, MachineSpec, NetworkMode, Placement};
pub use table::{Endpoint, RegistryTable, Role};
pub use topic::TopicName;
