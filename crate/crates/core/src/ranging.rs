//! Two-way ranging: time of flight, sound speed, and the sender/replier
//! state machines.
//!
//! The sender writes a query and measures `t_send` between the query's
//! arrival at its own microphone and the reply's arrival at the same
//! microphone. The replier writes its reply so that it reaches its own
//! microphone `t_reply0` after the query did. Then
//! `tof = (t_send - t_reply0 + delta1 + delta2) / 2`, where the deltas are the
//! speaker-to-microphone delays of the two devices.

use serde::{Deserialize, Serialize};

use crate::audioclock::{self, EmissionKind, Heard, SelfSync, SelfSyncConfig};
use crate::error::{Error, Result};

/// Wilson's empirical sound speed in water, m/s.
///
/// Valid for `T` in [-2, 35] degC, `S` in [0, 45] PSU, `D` in [0, 1000] m.
pub fn wilson_speed(temperature_c: f64, salinity_psu: f64, depth_m: f64) -> Result<f64> {
    if !(-2.0..=35.0).contains(&temperature_c) {
        return Err(Error::param("temperature_c", format!("{temperature_c} outside [-2, 35]")));
    }
    if !(0.0..=45.0).contains(&salinity_psu) {
        return Err(Error::param("salinity_psu", format!("{salinity_psu} outside [0, 45]")));
    }
    if !(0.0..=1000.0).contains(&depth_m) {
        return Err(Error::param("depth_m", format!("{depth_m} outside [0, 1000]")));
    }
    let t = temperature_c;
    Ok(1449.0 + 4.6 * t - 0.055 * t * t + 0.0003 * t * t * t + 1.39 * (salinity_psu - 35.0)
        + 0.017 * depth_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum MediumConfig {
    Fixed {
        speed_mps: f64,
    },
    Wilson {
        temperature_c: f64,
        salinity_psu: f64,
        depth_m: f64,
    },
}

impl Default for MediumConfig {
    fn default() -> Self {
        MediumConfig::Fixed { speed_mps: 1500.0 }
    }
}

impl MediumConfig {
    pub fn speed(&self) -> Result<f64> {
        let c = match *self {
            MediumConfig::Fixed { speed_mps } => speed_mps,
            MediumConfig::Wilson {
                temperature_c,
                salinity_psu,
                depth_m,
            } => wilson_speed(temperature_c, salinity_psu, depth_m)?,
        };
        if !(c > 0.0) {
            return Err(Error::param("speed_mps", "must be positive"));
        }
        Ok(c)
    }
}

/// `(t_send - t_reply + delta1 + delta2) / 2`.
///
/// Slightly negative values (within `tolerance_s`) clamp to zero; anything
/// below that is an inconsistent exchange.
pub fn compute_tof(t_send: f64, t_reply: f64, delta1: f64, delta2: f64, tolerance_s: f64) -> Result<f64> {
    if !(t_send > 0.0) {
        return Err(Error::param("t_send", "must be positive"));
    }
    let tof = (t_send - t_reply + delta1 + delta2) / 2.0;
    if tof < -tolerance_s {
        return Err(Error::InconsistentExchange { tof_s: tof });
    }
    Ok(tof.max(0.0))
}

/// One completed exchange, as seen by the sender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangingResult {
    /// Speaker index the query was written at.
    pub query_index: i64,
    pub peer: Option<usize>,
    pub t_send: f64,
    pub t_reply0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub tof: f64,
    pub distance_m: f64,
    /// Fine microphone index of the sender's own query.
    pub own_arrival: f64,
    /// Fine microphone index of the reply.
    pub reply_arrival: f64,
    pub own_autocorr: f64,
    pub reply_autocorr: f64,
}

/// A preamble accepted by the receiver, after direct-path search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub coarse_index: i64,
    /// `None` when the direct-path search found nothing.
    pub fine_index: Option<f64>,
    pub autocorr: f64,
    /// Decoded ID tone, if the receiver looked for one.
    pub id: Option<usize>,
}

impl Arrival {
    /// Best available position for matching against predictions.
    pub fn position(&self) -> f64 {
        self.fine_index.unwrap_or(self.coarse_index as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Event {
    /// A microphone buffer was processed. `write_head` is the earliest speaker
    /// index that can still be written; `mic_head` the newest captured index.
    Tick { write_head: i64, mic_head: i64 },
    Detected(Arrival),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Timeout,
    NoDirectPath,
    MissedReplySlot,
    InconsistentExchange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplyDiagnostics {
    /// Fine index of the incoming preamble.
    pub m2: f64,
    /// Calibration used to schedule the reply.
    pub n1: i64,
    pub m1: f64,
    pub n2: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Emit {
        n: i64,
        kind: EmissionKind,
        /// ID tone appended after the preamble.
        id: Option<usize>,
    },
    Replied(ReplyDiagnostics),
    Completed(RangingResult),
    Failed { query_index: Option<i64>, reason: FailureReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub nominal_fs: u32,
    pub t_reply0: f64,
    /// Interval between successive queries, seconds.
    pub period_s: f64,
    /// Reply timeout as a multiple of `t_reply0`.
    pub timeout_factor: f64,
    /// Speaker time of the first query relative to stream start, seconds.
    pub first_query_s: f64,
    /// Own speaker-to-microphone delay (effective, across both mics).
    pub delta_self_s: f64,
    /// Peer speaker-to-microphone delay.
    pub delta_peer_s: f64,
    pub sound_speed_mps: f64,
    pub sync: SelfSyncConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            nominal_fs: 44_100,
            t_reply0: 1.0,
            period_s: 2.0,
            timeout_factor: 3.0,
            first_query_s: 2.0,
            delta_self_s: 0.0,
            delta_peer_s: 0.0,
            sound_speed_mps: 1500.0,
            sync: SelfSyncConfig::default(),
        }
    }
}

impl ProtocolConfig {
    fn samples(&self, seconds: f64) -> f64 {
        seconds * self.nominal_fs as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum SenderState {
    Calibrating,
    Idle { next_query: i64 },
    AwaitOwn { query: i64, own_autocorr: f64 },
    AwaitReply { query: i64, own_m: f64, own_autocorr: f64 },
}

/// Sender (query initiator) state machine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sender {
    pub config: ProtocolConfig,
    pub sync: SelfSync,
    state: SenderState,
    write_head: i64,
    /// Target ID appended to queries, for addressed replies.
    pub query_id: Option<usize>,
}

impl Sender {
    pub fn new(config: ProtocolConfig) -> Self {
        Sender {
            sync: SelfSync::new(config.sync),
            config,
            state: SenderState::Calibrating,
            write_head: 0,
            query_id: None,
        }
    }

    pub fn write_head(&self) -> i64 {
        self.write_head
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.state, SenderState::Idle { .. })
    }

    /// Deadline, in microphone samples, for the reply to a query written at `query`.
    fn deadline(&self, query: i64) -> f64 {
        let own = self.sync.predicted_arrival(query).unwrap_or(query as f64);
        own + self.config.samples(self.config.timeout_factor * self.config.t_reply0)
    }

    fn schedule_next(&mut self, query: i64) {
        let next = query + self.config.samples(self.config.period_s).round() as i64;
        self.state = SenderState::Idle { next_query: next };
    }

    /// Override when the next query goes out (used by round-robin leaders).
    pub fn set_next_query(&mut self, n: i64) {
        self.state = SenderState::Idle { next_query: n };
    }

    pub fn step(&mut self, event: Event) -> Vec<Action> {
        let mut out = Vec::new();
        match event {
            Event::Tick { write_head, mic_head } => {
                self.write_head = write_head;
                let fs = self.config.nominal_fs;
                if let Some(n) = self.sync.calibration_due(write_head, fs) {
                    self.sync.record_emission(n, EmissionKind::Calibration);
                    out.push(Action::Emit { n, kind: EmissionKind::Calibration, id: None });
                }
                match self.state {
                    SenderState::Calibrating if self.sync.is_calibrated() => {
                        let first = self.config.samples(self.config.first_query_s).round() as i64;
                        self.state = SenderState::Idle { next_query: first.max(write_head) };
                    }
                    SenderState::AwaitOwn { query, .. } | SenderState::AwaitReply { query, .. }
                        if mic_head as f64 > self.deadline(query) =>
                    {
                        out.push(Action::Failed { query_index: Some(query), reason: FailureReason::Timeout });
                        self.schedule_next(query);
                        // Next query waits for the following tick so callers can retarget.
                        return out;
                    }
                    _ => {}
                }
                if let SenderState::Idle { next_query } = self.state {
                    let lookahead = self.config.samples(1.0) as i64;
                    if write_head >= next_query - lookahead {
                        let n = next_query.max(write_head);
                        self.sync.record_emission(n, EmissionKind::Query);
                        out.push(Action::Emit { n, kind: EmissionKind::Query, id: self.query_id });
                        self.state = SenderState::AwaitOwn { query: n, own_autocorr: 0.0 };
                    }
                }
            }
            Event::Detected(arrival) => {
                let heard = self.sync.classify(arrival.position());
                match (heard, self.state) {
                    (Heard::Own(e, _), SenderState::AwaitOwn { query, .. }) if e.n == query => {
                        match arrival.fine_index {
                            Some(m) => {
                                self.state = SenderState::AwaitReply {
                                    query,
                                    own_m: m,
                                    own_autocorr: arrival.autocorr,
                                }
                            }
                            None => {
                                out.push(Action::Failed {
                                    query_index: Some(query),
                                    reason: FailureReason::NoDirectPath,
                                });
                                self.schedule_next(query);
                            }
                        }
                    }
                    (Heard::Remote, SenderState::AwaitReply { query, own_m, own_autocorr }) => {
                        out.push(self.finish(query, own_m, own_autocorr, &arrival));
                        self.schedule_next(query);
                    }
                    _ => {}
                }
            }
        }
        out
    }

    fn finish(&self, query: i64, own_m: f64, own_autocorr: f64, reply: &Arrival) -> Action {
        let Some(reply_m) = reply.fine_index else {
            return Action::Failed { query_index: Some(query), reason: FailureReason::NoDirectPath };
        };
        let cfg = &self.config;
        let fs = cfg.nominal_fs as f64;
        let t_send = (reply_m - own_m) / fs;
        match compute_tof(t_send, cfg.t_reply0, cfg.delta_self_s, cfg.delta_peer_s, 1.0 / fs) {
            Ok(tof) => Action::Completed(RangingResult {
                query_index: query,
                peer: self.query_id,
                t_send,
                t_reply0: cfg.t_reply0,
                delta1: cfg.delta_self_s,
                delta2: cfg.delta_peer_s,
                tof,
                distance_m: tof * cfg.sound_speed_mps,
                own_arrival: own_m,
                reply_arrival: reply_m,
                own_autocorr,
                reply_autocorr: reply.autocorr,
            }),
            Err(_) => Action::Failed {
                query_index: Some(query),
                reason: FailureReason::InconsistentExchange,
            },
        }
    }
}

/// Replier state machine: answers every remote preamble after `t_reply0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replier {
    pub config: ProtocolConfig,
    pub sync: SelfSync,
    write_head: i64,
    /// Only answer queries carrying this ID (when set).
    pub own_id: Option<usize>,
}

impl Replier {
    pub fn new(config: ProtocolConfig) -> Self {
        Replier {
            sync: SelfSync::new(config.sync),
            config,
            write_head: 0,
            own_id: None,
        }
    }

    pub fn step(&mut self, event: Event) -> Vec<Action> {
        let mut out = Vec::new();
        match event {
            Event::Tick { write_head, .. } => {
                self.write_head = write_head;
                if let Some(n) = self.sync.calibration_due(write_head, self.config.nominal_fs) {
                    self.sync.record_emission(n, EmissionKind::Calibration);
                    out.push(Action::Emit { n, kind: EmissionKind::Calibration, id: None });
                }
            }
            Event::Detected(arrival) => {
                if self.sync.classify(arrival.position()) == Heard::Remote {
                    self.respond(&arrival, &mut out);
                }
            }
        }
        out
    }

    /// Answer a detection already classified as remote.
    pub fn respond(&mut self, arrival: &Arrival, out: &mut Vec<Action>) {
        if self.own_id.is_some() && arrival.id != self.own_id {
            return;
        }
        let Some(m2) = arrival.fine_index else {
            out.push(Action::Failed { query_index: None, reason: FailureReason::NoDirectPath });
            return;
        };
        let Some(cal) = self.sync.calibration else {
            return;
        };
        let fs = self.config.nominal_fs;
        match audioclock::schedule_reply_at(m2, &cal, self.config.t_reply0, fs, self.write_head) {
            Ok(n2) => {
                self.sync.record_emission(n2, EmissionKind::Reply);
                out.push(Action::Emit { n: n2, kind: EmissionKind::Reply, id: None });
                out.push(Action::Replied(ReplyDiagnostics { m2, n1: cal.n1, m1: cal.m1, n2 }));
            }
            Err(_) => out.push(Action::Failed {
                query_index: None,
                reason: FailureReason::MissedReplySlot,
            }),
        }
    }

    pub fn write_head(&self) -> i64 {
        self.write_head
    }
}
