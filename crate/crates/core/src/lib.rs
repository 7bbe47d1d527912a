//! SIM-assisted multi-band multiuser MISO downlink: impedance-domain channel
//! model, alternating precoder/phase optimization, and trainable unfolded
//! phase optimizers.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod phase_opt;
pub mod precoding;
pub mod rates;
pub mod rng;
pub mod scalar;
pub mod scenario;
pub mod sim_device;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Real, C};

pub type CMatF64 = linalg::CMat<f64>;
pub type CMatF32 = linalg::CMat<f32>;
pub type RMatF64 = linalg::RMat<f64>;
pub type RMatF32 = linalg::RMat<f32>;
pub type SimPhasesF64 = sim_device::SimPhases<f64>;
pub type SimPhasesF32 = sim_device::SimPhases<f32>;
pub type LinkModelF64 = channel::LinkModel<f64>;
pub type LinkModelF32 = channel::LinkModel<f32>;
pub type PrecoderSetF64 = precoding::PrecoderSet<f64>;
pub type PrecoderSetF32 = precoding::PrecoderSet<f32>;
pub type RateReportF64 = rates::RateReport<f64>;
pub type RateReportF32 = rates::RateReport<f32>;
pub type AoTraceF64 = phase_opt::AoTrace<f64>;
pub type AoTraceF32 = phase_opt::AoTrace<f32>;
