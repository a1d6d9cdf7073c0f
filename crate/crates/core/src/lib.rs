//! Probe-based channel quality prediction and per-GoP channel selection for
//! real-time video over contended wireless channels.
//!
//! The crate is organised bottom-up:
//!
//! * [`netsim`] is a seeded multi-channel queueing simulator that maps injected
//!   packet bursts to delivery times and deadline flags.
//! * [`videostream`] packetizes GoPs and scores delivery outcomes as PSNR.
//! * [`probing`] builds the short packet trains sent on idle channels.
//! * [`features`] turns per-slot delivery records into the delay/variance/loss
//!   feature matrix and computes the future-quality class label.
//! * [`predictor`] is a small 1-D CNN classifier trained with Adam.
//! * [`selector`] implements the per-GoP channel selection policies.
//! * [`harness`] wires everything into dataset generation, training, offline
//!   ablations, online experiments and report emission.

pub mod error;
pub mod features;
pub mod harness;
pub mod netsim;
pub mod predictor;
pub mod probing;
pub mod rng;
pub mod selector;
pub mod videostream;

pub use error::{Error, Result};
