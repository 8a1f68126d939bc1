//! Multi-level feature pyramid detector: a deterministic CPU forward-pass
//! engine with its verification tooling.
//!
//! The crate is organized bottom-up:
//! * [`tensor`]: NCHW f32 tensors and the conv / upsample / concat ops
//! * [`mtsr`]: the on-disk tensor format
//! * [`rng`]: seeded per-layer weight initialization
//! * [`config`]: network and backbone configuration, shape arithmetic
//! * [`trace`]: per-layer shape records, symbolic or captured from a run
//! * [`params`]: weight structs, init, and the parameter store
//! * [`backbone`], [`mlfpn`], [`head`], [`pipeline`]: the forward pass
//! * [`verify`]: independent oracles (shape tracer, parameter accounting,
//!   finite differences, suppression reference, activation profiler)

pub mod backbone;
pub mod config;
pub mod error;
pub mod head;
pub mod mlfpn;
pub mod mtsr;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use config::{BackboneConfig, DetectSettings, NetworkConfig, ANCHORS_PER_CELL, NUM_SCALES};
pub use error::{Error, Result};
pub use head::{AnchorBox, Detection, HeadOutputs};
pub use mlfpn::{MlfpnOutput, PyramidLevel, TumOutput};
pub use params::Model;
pub use pipeline::{detect, detect_with_stats, forward_pyramid, DetectStats, PipelineOutput};
pub use tensor::Tensor4;
pub use trace::{LayerRecord, ShapeTrace, TraceRecorder};
pub use verify::{ActivationProfile, ParamReport};
