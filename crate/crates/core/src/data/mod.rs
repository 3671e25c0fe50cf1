//! Synthetic events, tensor files, dataset manifests and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod synth;
pub mod tensorfile;
