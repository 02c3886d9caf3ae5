//! Two-way acoustic ranging for phone-class devices in water.
//!
//! The crate is organized bottom-up:
//!
//! - [`waveform`]: ZC-OFDM preamble, ID tones, calibration signal.
//! - [`receiver`]: cross-correlation, PN-gated auto-correlation, LS channel estimation.
//! - [`dualmic`]: direct-path search across the two microphones.
//! - [`audioclock`]: speaker/microphone index-to-time model, self-calibration, reply scheduling.
//! - [`ranging`]: time-of-flight, sound speed, sender/replier state machines.
//! - [`multinode`]: round-robin leader/diver protocol and ID tone decoding.
//! - [`hydrosim`]: sample-accurate medium simulator that drives the whole stack.
//! - [`report`]: CSV/summary outputs shared by the CLI and tests.
//! - [`stages`]: per-stage timing of the receive path.

pub mod audioclock;
pub mod dsp;
pub mod dualmic;
pub mod error;
pub mod hydrosim;
pub mod multinode;
pub mod pcm;
pub mod ranging;
pub mod receiver;
pub mod report;
pub mod stages;
pub mod waveform;

pub use error::{Error, Result};

pub use audioclock::{CalibrationState, StreamClock};
pub use dualmic::{DirectPath, DualMicParams};
pub use hydrosim::{ChannelProfile, ProfilePreset, SimScenario};
pub use ranging::{MediumConfig, RangingResult};
pub use receiver::{ChannelEstimate, DetectionResult, MicId};
pub use waveform::{Preamble, WaveformSpec};
