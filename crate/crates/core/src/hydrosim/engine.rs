//! Event loop driving device state machines through the simulated medium.
//!
//! Each device processes its microphone streams in fixed buffers. Buffers
//! complete at the wall-clock time of their last sample, and devices are
//! stepped in completion order, so every emission is in the medium before
//! any microphone sample it could reach is rendered.

use serde::{Deserialize, Serialize};

use super::medium::Medium;
use crate::audioclock::EmissionKind;
use crate::dualmic::{self, DualMicParams, PathMethod};
use crate::error::Result;
use crate::multinode::{decode_id, Diver, Leader};
use crate::ranging::{Action, Arrival, Event, Replier, Sender};
use crate::receiver::{DetectorConfig, DualStreamReceiver, Reception};
use crate::waveform::{build_id_tone, Preamble, WaveformSpec};

/// Speaker output latency: how far ahead of the playing sample the earliest
/// writable sample is.
pub const DEFAULT_SPEAKER_LATENCY: i64 = 1024;

#[derive(Debug, Clone)]
pub enum Role {
    Sender(Sender),
    Replier(Replier),
    Leader(Leader),
    Diver(Diver),
}

impl Role {
    fn step(&mut self, event: Event) -> Vec<Action> {
        match self {
            Role::Sender(s) => s.step(event),
            Role::Replier(r) => r.step(event),
            Role::Leader(l) => l.step(event),
            Role::Diver(d) => d.step(event),
        }
    }
}

#[derive(Debug, Clone)]
struct DeviceRuntime {
    role: Role,
    receiver: DualStreamReceiver,
    next_chunk: i64,
}

/// One state-machine output, stamped with where and when it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub device: usize,
    /// Wall-clock time of the buffer that triggered it, seconds.
    pub time: f64,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub path_method: PathMethod,
    pub dual: DualMicParams,
    pub speaker_latency: i64,
    pub detector_threshold: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            path_method: PathMethod::Dual,
            dual: DualMicParams::default(),
            speaker_latency: DEFAULT_SPEAKER_LATENCY,
            detector_threshold: crate::receiver::AUTOCORR_THRESHOLD,
        }
    }
}

pub struct Engine {
    pub medium: Medium,
    pub spec: WaveformSpec,
    pub config: EngineConfig,
    preamble: Preamble,
    devices: Vec<DeviceRuntime>,
    buffer_len: usize,
    /// Receptions seen by each device, in order.
    pub receptions: Vec<Vec<Arrival>>,
}

impl Engine {
    /// `roles[i]` drives `medium.devices[i]`.
    pub fn new(medium: Medium, spec: &WaveformSpec, roles: Vec<Role>, config: EngineConfig) -> Result<Self> {
        assert_eq!(roles.len(), medium.devices.len(), "one role per device");
        config.dual.validate()?;
        let preamble = crate::waveform::build_preamble(spec)?;
        let uses_ids = roles.iter().any(|r| matches!(r, Role::Leader(_) | Role::Diver(_)));
        let det = DetectorConfig {
            threshold: config.detector_threshold,
            tail: if uses_ids { spec.id_tone_len } else { 0 },
            ..DetectorConfig::default()
        };
        let buffer_len = det.buffer_len;
        let devices = roles
            .into_iter()
            .map(|role| DeviceRuntime {
                role,
                receiver: DualStreamReceiver::new(&preamble, det.clone()),
                next_chunk: 0,
            })
            .collect::<Vec<_>>();
        let receptions = vec![Vec::new(); devices.len()];
        Ok(Engine {
            medium,
            spec: spec.clone(),
            config,
            preamble,
            devices,
            buffer_len,
            receptions,
        })
    }

    pub fn role(&self, device: usize) -> &Role {
        &self.devices[device].role
    }

    fn completion_time(&self, device: usize) -> f64 {
        let end = (self.devices[device].next_chunk + 1) * self.buffer_len as i64;
        self.medium.devices[device].clock.mic_time(end as f64)
    }

    fn arrival(&self, rec: &Reception) -> Arrival {
        let tau = dualmic::locate(&rec.estimates, &self.config.dual, self.config.path_method);
        let id = if rec.tail.is_empty() {
            None
        } else {
            decode_id(&rec.tail, &self.spec).map(|d| d.id)
        };
        Arrival {
            coarse_index: rec.detection.coarse_index,
            fine_index: tau.map(|t| dualmic::refine_arrival(rec.window_start as f64, t)),
            autocorr: rec.detection.autocorr_score,
            id,
        }
    }

    fn emission_samples(&self, kind: EmissionKind, id: Option<usize>) -> Result<Vec<f64>> {
        let mut x = self.preamble.samples.clone();
        if let (EmissionKind::Query, Some(id)) = (kind, id) {
            x.extend(build_id_tone(id, &self.spec)?);
        }
        Ok(x)
    }

    fn apply(&mut self, device: usize, time: f64, actions: Vec<Action>, log: &mut Vec<LogEntry>) -> Result<()> {
        for action in actions {
            if let Action::Emit { n, kind, id } = action {
                let x = self.emission_samples(kind, id)?;
                self.medium.emit(device, n, kind, &x)?;
            }
            log.push(LogEntry { device, time, action });
        }
        Ok(())
    }

    /// Process one buffer on the device whose buffer completes first.
    /// Returns the wall-clock time processed.
    pub fn step(&mut self, log: &mut Vec<LogEntry>) -> Result<f64> {
        let d = (0..self.devices.len())
            .min_by(|&a, &b| self.completion_time(a).total_cmp(&self.completion_time(b)))
            .expect("at least one device");
        let now = self.completion_time(d);
        let b = self.buffer_len;
        let m0 = self.devices[d].next_chunk * b as i64;
        let bottom = self.medium.render(d, 0, m0, b);
        let top = self.medium.render(d, 1, m0, b);
        let reception = self.devices[d].receiver.push(&bottom, &top)?;
        let clock = self.medium.devices[d].clock;
        let write_head = clock.speaker_index_at(now).ceil() as i64 + self.config.speaker_latency;
        let mic_head = m0 + b as i64;
        let acts = self.devices[d].role.step(Event::Tick { write_head, mic_head });
        self.apply(d, now, acts, log)?;
        if let Some(rec) = reception {
            let arrival = self.arrival(&rec);
            self.receptions[d].push(arrival);
            let acts = self.devices[d].role.step(Event::Detected(arrival));
            self.apply(d, now, acts, log)?;
        }
        self.devices[d].next_chunk += 1;
        // Contributions ending before the retained history are no longer needed.
        self.medium.prune(d, mic_head);
        Ok(now)
    }

    /// Step until wall-clock time `t_end` or `stop` returns true on the log.
    pub fn run_until(&mut self, t_end: f64, mut stop: impl FnMut(&[LogEntry]) -> bool) -> Result<Vec<LogEntry>> {
        let mut log = Vec::new();
        loop {
            let t = self.step(&mut log)?;
            if t >= t_end || stop(&log) {
                return Ok(log);
            }
        }
    }
}
