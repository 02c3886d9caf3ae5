//! Sample-level simulator of the underwater channel and device clocks.
//!
//! Every microphone sample is computed from the emitting speaker's clock, the
//! receiving microphone's clock and the multipath profile in one step, so
//! clock skew, stream offsets and fractional propagation delays are all
//! represented exactly up to the band-limited interpolator.

pub mod engine;
pub mod interp;
pub mod medium;
pub mod profile;
pub mod scenario;
pub mod trials;

pub use engine::{Engine, EngineConfig, LogEntry, Role};
pub use medium::{propagate, DeviceGeometry, DeviceModel, EmissionRecord, ImpulseNoise, Medium, MediumParams, Trajectory};
pub use profile::{make_channel_profile, ChannelProfile, ProfilePreset, Tap};
pub use scenario::{ClockSpec, DiverSpec, ImpulseSpec, MultinodeSpec, PreambleKind, SimScenario, DIST_SWEEP_TOML};
pub use trials::{
    noise_sigma_for, run_multinode, run_session, run_trials, summarize, ExchangeRecord, MultinodeOutput,
    MultinodeRow, SessionOutput, SummaryRow, TrialReport,
};
