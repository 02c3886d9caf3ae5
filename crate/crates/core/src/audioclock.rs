//! Speaker and microphone sample streams as independently clocked, offset
//! buffers.
//!
//! A sample index maps to time linearly: `t_s(n) = n / fs_spk + t_s0` and
//! `t_m(m) = m / fs_mic + t_m0`, with `fs_spk = fs / (1 - alpha)` and
//! `fs_mic = fs / (1 - beta)`. The offset between the two streams is unknown
//! but constant while they stay open, so a device measures it once by
//! hearing its own calibration signal and then refreshes it every time it
//! hears any of its own transmissions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SKEW: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamClock {
    /// Speaker skew.
    pub alpha: f64,
    /// Microphone skew.
    pub beta: f64,
    /// Time at which speaker sample 0 plays, seconds.
    pub t_s0: f64,
    /// Time at which microphone sample 0 is captured, seconds.
    pub t_m0: f64,
    pub nominal_fs: u32,
}

impl Default for StreamClock {
    fn default() -> Self {
        StreamClock {
            alpha: 0.0,
            beta: 0.0,
            t_s0: 0.0,
            t_m0: 0.0,
            nominal_fs: 44_100,
        }
    }
}

impl StreamClock {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.abs() > MAX_SKEW {
            return Err(Error::param("alpha", format!("|{}| exceeds 1e-3", self.alpha)));
        }
        if self.beta.abs() > MAX_SKEW {
            return Err(Error::param("beta", format!("|{}| exceeds 1e-3", self.beta)));
        }
        if self.nominal_fs == 0 {
            return Err(Error::param("nominal_fs", "must be positive"));
        }
        Ok(())
    }

    pub fn speaker_rate(&self) -> f64 {
        self.nominal_fs as f64 / (1.0 - self.alpha)
    }

    pub fn mic_rate(&self) -> f64 {
        self.nominal_fs as f64 / (1.0 - self.beta)
    }

    pub fn speaker_time(&self, n: f64) -> f64 {
        n / self.speaker_rate() + self.t_s0
    }

    pub fn mic_time(&self, m: f64) -> f64 {
        m / self.mic_rate() + self.t_m0
    }

    /// Fractional speaker index playing at time `t`.
    pub fn speaker_index_at(&self, t: f64) -> f64 {
        (t - self.t_s0) * self.speaker_rate()
    }

    /// Fractional microphone index captured at time `t`.
    pub fn mic_index_at(&self, t: f64) -> f64 {
        (t - self.t_m0) * self.mic_rate()
    }
}

/// The most recent self-calibration event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Speaker index the signal was written at.
    pub n1: i64,
    /// Fine microphone index it was detected at.
    pub m1: f64,
}

impl CalibrationState {
    /// `n1 - m1`, in samples.
    pub fn offset(&self) -> f64 {
        self.n1 as f64 - self.m1
    }
}

pub fn self_calibrate(n1: i64, m1: f64) -> CalibrationState {
    CalibrationState { n1, m1 }
}

/// Speaker index for the reply: `m2 + (n1 - m1) + fs * t_reply0`, unrounded.
pub fn schedule_reply(m2: f64, cal: &CalibrationState, t_reply0: f64, nominal_fs: u32) -> f64 {
    m2 + cal.offset() + nominal_fs as f64 * t_reply0
}

/// Rounded reply index, rejected if the speaker has already played past it.
pub fn schedule_reply_at(
    m2: f64,
    cal: &CalibrationState,
    t_reply0: f64,
    nominal_fs: u32,
    write_head: i64,
) -> Result<i64> {
    let n2 = schedule_reply(m2, cal, t_reply0, nominal_fs).round() as i64;
    if n2 < write_head {
        return Err(Error::MissedReplySlot {
            requested: n2,
            head: write_head,
        });
    }
    Ok(n2)
}

/// Predicted `t_reply - t_reply0 = -alpha * t_reply0 + gap * (beta - alpha) / fs`.
pub fn reply_error(alpha: f64, beta: f64, t_reply0: f64, gap_samples: f64, nominal_fs: u32) -> f64 {
    -alpha * t_reply0 + gap_samples * (beta - alpha) / nominal_fs as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionKind {
    Calibration,
    Query,
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwnEmission {
    pub n: i64,
    pub kind: EmissionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfSyncConfig {
    /// Bound on `|n1 - m1|` accepted for the first calibration, samples.
    pub max_stream_offset: f64,
    /// Tolerance when matching a detection to a predicted own arrival, samples.
    pub own_match_tolerance: f64,
    /// Retry period for the initial calibration, seconds.
    pub retry_s: f64,
    /// When false only the first calibration event is kept.
    pub continuous: bool,
    /// No calibration is attempted before this speaker index.
    #[serde(default)]
    pub first_attempt_n: i64,
}

impl Default for SelfSyncConfig {
    fn default() -> Self {
        SelfSyncConfig {
            max_stream_offset: 4410.0,
            own_match_tolerance: 441.0,
            retry_s: 2.0,
            continuous: true,
            first_attempt_n: 0,
        }
    }
}

/// Outcome of classifying one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Heard {
    /// Our own emission, with the updated calibration.
    Own(OwnEmission, CalibrationState),
    /// Someone else's transmission.
    Remote,
    /// Nothing can be concluded yet (uncalibrated and not our calibration).
    Unknown,
}

/// Tracks one device's stream offset and its own outstanding emissions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfSync {
    pub config: SelfSyncConfig,
    pub calibration: Option<CalibrationState>,
    pending: Vec<OwnEmission>,
    last_calibration_attempt: Option<i64>,
}

impl SelfSync {
    pub fn new(config: SelfSyncConfig) -> Self {
        SelfSync {
            config,
            calibration: None,
            pending: Vec::new(),
            last_calibration_attempt: None,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.is_some()
    }

    /// Speaker index at which a calibration signal should be written, if one is due.
    pub fn calibration_due(&self, write_head: i64, fs: u32) -> Option<i64> {
        if self.calibration.is_some() || write_head < self.config.first_attempt_n {
            return None;
        }
        match self.last_calibration_attempt {
            None => Some(write_head),
            Some(n) if (write_head - n) as f64 >= self.config.retry_s * fs as f64 => Some(write_head),
            Some(_) => None,
        }
    }

    pub fn record_emission(&mut self, n: i64, kind: EmissionKind) {
        if kind == EmissionKind::Calibration {
            self.last_calibration_attempt = Some(n);
        }
        self.pending.push(OwnEmission { n, kind });
    }

    /// Predicted microphone index of an emission written at `n`.
    pub fn predicted_arrival(&self, n: i64) -> Option<f64> {
        self.calibration.map(|c| n as f64 - c.offset())
    }

    /// Classify a detection at fine microphone index `m`.
    pub fn classify(&mut self, m: f64) -> Heard {
        let Some(cal) = self.calibration else {
            let pos = self.pending.iter().position(|e| {
                e.kind == EmissionKind::Calibration && (e.n as f64 - m).abs() <= self.config.max_stream_offset
            });
            return match pos {
                Some(i) => {
                    let e = self.pending.remove(i);
                    let state = self_calibrate(e.n, m);
                    self.calibration = Some(state);
                    self.pending.retain(|p| p.n > e.n);
                    Heard::Own(e, state)
                }
                None => Heard::Unknown,
            };
        };
        let tol = self.config.own_match_tolerance;
        let pos = self
            .pending
            .iter()
            .position(|e| (e.n as f64 - cal.offset() - m).abs() <= tol);
        match pos {
            Some(i) => {
                let e = self.pending.remove(i);
                // Emissions older than this one were never heard.
                self.pending.retain(|p| p.n > e.n);
                if self.config.continuous {
                    self.calibration = Some(self_calibrate(e.n, m));
                }
                Heard::Own(e, self.calibration.unwrap_or(cal))
            }
            None => Heard::Remote,
        }
    }

    /// Forget emissions that should have been heard by microphone index `mic_head`.
    pub fn expire(&mut self, mic_head: f64, horizon: f64) {
        if let Some(cal) = self.calibration {
            self.pending
                .retain(|e| e.n as f64 - cal.offset() + horizon >= mic_head);
        }
    }
}
