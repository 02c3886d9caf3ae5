//! Leader-driven ranging for several divers.
//!
//! The leader queries each diver in turn, tagging the query with the diver's
//! ID tone. Only the addressed diver replies. The leader issues its next query
//! `tau0` after hearing a reply, so a diver can also measure its own distance
//! to the leader passively: the gap between its reply and the following query
//! is the round trip plus `tau0`.

use serde::{Deserialize, Serialize};

use crate::audioclock::{self, EmissionKind, Heard};
use crate::dsp;
use crate::error::{Error, Result};
use crate::ranging::{Action, Event, ProtocolConfig, RangingResult, Replier, Sender};
use crate::waveform::{WaveformSpec, ID_TONE_COUNT};

/// Minimum tone-to-median power ratio for an accepted ID, dB.
pub const ID_SNR_FLOOR_DB: f64 = 14.0;
/// Carrier offsets searched when decoding, Hz.
pub const ID_OFFSET_SEARCH_HZ: f64 = 15.0;
const ID_OFFSET_STEP_HZ: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdDecision {
    pub id: usize,
    pub snr_db: f64,
    pub offset_hz: f64,
}

/// Power of `x` at `freq_hz` (single-bin DFT, normalized by length squared).
fn tone_power(x: &[f64], freq_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq_hz / fs;
    let (mut s1, mut s2) = (0.0, 0.0);
    let coeff = 2.0 * w.cos();
    for &v in x {
        let s0 = v + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    let p = s1 * s1 + s2 * s2 - coeff * s1 * s2;
    p / (x.len() as f64).powi(2)
}

/// Decode the ID tone in `window` (the samples following a preamble).
///
/// A common carrier offset within +-15 Hz is searched jointly for all tones.
/// Returns `None` when the best tone is less than the floor above the median
/// of the other tones.
pub fn decode_id(window: &[f64], spec: &WaveformSpec) -> Option<IdDecision> {
    let n = spec.id_tone_len.min(window.len());
    if n == 0 {
        return None;
    }
    let x = &window[..n];
    let fs = spec.sample_rate_hz as f64;
    let steps = (ID_OFFSET_SEARCH_HZ / ID_OFFSET_STEP_HZ).round() as i32;
    let mut best: Option<(f64, usize, f64, [f64; ID_TONE_COUNT])> = None;
    for k in -steps..=steps {
        let off = k as f64 * ID_OFFSET_STEP_HZ;
        let mut powers = [0.0; ID_TONE_COUNT];
        for (p, f) in powers.iter_mut().zip(spec.id_tone_table.iter()) {
            *p = tone_power(x, f + off, fs);
        }
        let (i, &p) = powers
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty table");
        if best.as_ref().is_none_or(|b| p > b.0) {
            best = Some((p, i, off, powers));
        }
    }
    let (p, id, offset_hz, powers) = best?;
    let others: Vec<f64> = powers
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != id)
        .map(|(_, &v)| v)
        .collect();
    let floor = dsp::median(&others);
    let snr_db = if floor > 0.0 { 10.0 * (p / floor).log10() } else { f64::INFINITY };
    if !(p > 0.0) || snr_db < ID_SNR_FLOOR_DB {
        return None;
    }
    Some(IdDecision { id, snr_db, offset_hz })
}

/// `c * (t10 - tau0) / 2`.
pub fn diver_overhear_distance(t10: f64, tau0: f64, sound_speed_mps: f64) -> f64 {
    sound_speed_mps * (t10 - tau0) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Leader,
    Diver { id: usize },
}

/// Where a diver starts its overheard interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverhearReference {
    /// Arrival of the diver's own reply at its own microphone.
    #[default]
    OwnMic,
    /// Speaker emission of the reply, derived from the calibration.
    Transmission,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub id: usize,
    pub result: Option<RangingResult>,
}

/// Round-robin leader built on the two-way sender.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Leader {
    pub sender: Sender,
    pub roster: Vec<usize>,
    /// Gap between hearing a reply and the next query, seconds.
    pub tau0: f64,
    cursor: usize,
}

impl Leader {
    pub fn new(config: ProtocolConfig, roster: Vec<usize>, tau0: f64) -> Result<Self> {
        if let Some(&id) = roster.iter().find(|&&id| id >= ID_TONE_COUNT) {
            return Err(Error::param("roster", format!("ID {id} has no tone")));
        }
        if !(tau0 >= 0.0) {
            return Err(Error::param("tau0", "must be non-negative"));
        }
        let mut sender = Sender::new(config);
        sender.query_id = roster.first().copied();
        Ok(Leader { sender, roster, tau0, cursor: 0 })
    }

    pub fn current_target(&self) -> Option<usize> {
        self.roster.get(self.cursor).copied()
    }

    fn advance(&mut self) {
        if self.roster.is_empty() {
            return;
        }
        self.cursor = (self.cursor + 1) % self.roster.len();
        self.sender.query_id = Some(self.roster[self.cursor]);
    }

    /// An empty roster never transmits.
    pub fn step(&mut self, event: Event) -> Vec<Action> {
        if self.roster.is_empty() {
            return Vec::new();
        }
        let actions = self.sender.step(event);
        let write_head = self.sender.write_head();
        for a in &actions {
            match a {
                Action::Completed(r) => {
                    self.advance();
                    let cal = self.sender.sync.calibration.expect("completed implies calibrated");
                    let fs = self.sender.config.nominal_fs;
                    let n = audioclock::schedule_reply(r.reply_arrival, &cal, self.tau0, fs).round() as i64;
                    self.sender.set_next_query(n.max(write_head));
                }
                Action::Failed { query_index: Some(_), .. } => {
                    // Skip the silent diver; query the next one immediately.
                    self.advance();
                    self.sender.set_next_query(write_head);
                }
                _ => {}
            }
        }
        actions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overheard {
    pub id: usize,
    /// Fine index of the diver's own reply.
    pub reply_arrival: f64,
    /// Fine index of the following leader query.
    pub query_arrival: f64,
    pub t10: f64,
    pub distance_m: f64,
}

/// Diver: replies when addressed and measures its range from overheard traffic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diver {
    pub replier: Replier,
    pub tau0: f64,
    /// Leader's speaker-to-microphone delay, seconds.
    pub delta_leader_s: f64,
    pub reference: OverhearReference,
    last_reply: Option<f64>,
    pub overheard: Vec<Overheard>,
}

impl Diver {
    pub fn new(config: ProtocolConfig, id: usize, tau0: f64) -> Self {
        let mut replier = Replier::new(config);
        replier.own_id = Some(id);
        Diver {
            delta_leader_s: config.delta_peer_s,
            replier,
            tau0,
            reference: OverhearReference::OwnMic,
            last_reply: None,
            overheard: Vec::new(),
        }
    }

    pub fn id(&self) -> usize {
        self.replier.own_id.expect("diver has an ID")
    }

    pub fn step(&mut self, event: Event) -> Vec<Action> {
        let Event::Detected(arrival) = event else {
            return self.replier.step(event);
        };
        let mut out = Vec::new();
        match self.replier.sync.classify(arrival.position()) {
            Heard::Own(e, _) if e.kind == EmissionKind::Reply => {
                self.last_reply = arrival.fine_index.map(|m| self.start_of(m, e.n));
            }
            Heard::Remote => {
                if let (Some(start), Some(m)) = (self.last_reply.take(), arrival.fine_index) {
                    self.overheard.push(self.overhear(start, m));
                }
                self.replier.respond(&arrival, &mut out);
            }
            _ => {}
        }
        out
    }

    fn start_of(&self, own_m: f64, n: i64) -> f64 {
        match self.reference {
            OverhearReference::OwnMic => own_m,
            OverhearReference::Transmission => {
                let pred = self.replier.sync.predicted_arrival(n).unwrap_or(own_m);
                pred - self.replier.config.delta_self_s * self.replier.config.nominal_fs as f64
            }
        }
    }

    fn overhear(&self, start: f64, query_m: f64) -> Overheard {
        let cfg = &self.replier.config;
        let t10 = (query_m - start) / cfg.nominal_fs as f64;
        let correction = match self.reference {
            OverhearReference::OwnMic => cfg.delta_self_s + self.delta_leader_s,
            OverhearReference::Transmission => self.delta_leader_s,
        };
        Overheard {
            id: self.id(),
            reply_arrival: start,
            query_arrival: query_m,
            t10,
            distance_m: diver_overhear_distance(t10 + correction, self.tau0, cfg.sound_speed_mps),
        }
    }
}

/// Number of divers whose reply-plus-query cycle fits in `period_s`.
pub fn roster_capacity(period_s: f64, t_reply0: f64, tau0: f64, max_range_m: f64, c: f64) -> usize {
    let cycle = t_reply0 + tau0 + 2.0 * max_range_m / c;
    if cycle <= 0.0 {
        return 0;
    }
    (period_s / cycle).floor() as usize
}
