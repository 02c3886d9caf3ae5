//! Simulated ranging sessions and their ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{Engine, EngineConfig, LogEntry, Role};
use super::medium::{mix_seed, DeviceGeometry, DeviceModel, EmissionRecord, Medium, MediumParams, Trajectory};
use super::scenario::{ClockSpec, SimScenario};
use crate::audioclock::{reply_error, EmissionKind, StreamClock};
use crate::dsp;
use crate::dualmic::{DualMicParams, PathMethod};
use crate::error::{Error, Result};
use crate::multinode::{Diver, Leader};
use crate::ranging::{Action, FailureReason, ProtocolConfig, ReplyDiagnostics, Replier, Sender};
use crate::waveform::{build_preamble, WaveformSpec};

/// Microphone weights matching what a path method measures.
fn mic_weights(method: PathMethod) -> [f64; 2] {
    match method {
        PathMethod::Dual => [0.5, 0.5],
        PathMethod::BottomOnly => [1.0, 0.0],
        PathMethod::TopOnly => [0.0, 1.0],
    }
}

fn weighted(w: [f64; 2], f: impl Fn(usize) -> f64) -> f64 {
    w[0] * f(0) + w[1] * f(1)
}

/// Noise standard deviation giving `snr_db` per sample against the preamble at 1 m.
pub fn noise_sigma_for(spec: &WaveformSpec, snr_db: f64) -> Result<f64> {
    let p = build_preamble(spec)?;
    let power = dsp::energy(&p.samples) / p.samples.len() as f64;
    Ok((power / 10f64.powf(snr_db / 10.0)).sqrt())
}

fn draw_clocks(spec: &ClockSpec, rng: &mut ChaCha8Rng) -> [StreamClock; 2] {
    let base = |rng: &mut ChaCha8Rng, random_offsets: bool| StreamClock {
        t_s0: if random_offsets { rng.random_range(0.0..0.04) } else { 0.0 },
        t_m0: if random_offsets { rng.random_range(0.0..0.04) } else { 0.0 },
        ..StreamClock::default()
    };
    match *spec {
        ClockSpec::Random { max_ppm } => [0, 1].map(|_| {
            let m = max_ppm * 1e-6;
            let mut c = base(rng, true);
            if m > 0.0 {
                c.alpha = rng.random_range(-m..=m);
                c.beta = rng.random_range(-m..=m);
            }
            c
        }),
        ClockSpec::Shared { max_ppm } => [0, 1].map(|_| {
            let m = max_ppm * 1e-6;
            let mut c = base(rng, true);
            if m > 0.0 {
                c.alpha = rng.random_range(-m..=m);
                c.beta = c.alpha;
            }
            c
        }),
        ClockSpec::Fixed {
            sender_alpha_ppm,
            sender_beta_ppm,
            replier_alpha_ppm,
            replier_beta_ppm,
            random_offsets,
        } => {
            let mut a = base(rng, random_offsets);
            a.alpha = sender_alpha_ppm * 1e-6;
            a.beta = sender_beta_ppm * 1e-6;
            let mut b = base(rng, random_offsets);
            b.alpha = replier_alpha_ppm * 1e-6;
            b.beta = replier_beta_ppm * 1e-6;
            [a, b]
        }
    }
}

/// One exchange attempt with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub distance_index: usize,
    pub nominal_distance_m: f64,
    pub exchange: usize,
    pub query_index: i64,
    /// Wall-clock time the query started playing.
    pub t_query_s: f64,
    pub true_distance_m: f64,
    /// `ok`, or why the exchange produced no range.
    pub status: String,
    pub est_distance_m: Option<f64>,
    pub error_m: Option<f64>,
    pub t_send_s: Option<f64>,
    /// Reply interval realized by the replier's clocks, query arrival to own
    /// reply arrival, both referenced to the preamble body center.
    pub t_reply_realized_s: Option<f64>,
    /// `t_reply0` plus the first-order clock-error prediction.
    pub t_reply_predicted_s: Option<f64>,
    pub sender_alpha: f64,
    pub sender_beta: f64,
    pub replier_alpha: f64,
    pub replier_beta: f64,
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub records: Vec<ExchangeRecord>,
    pub emissions: Vec<EmissionRecord>,
    pub log: Vec<LogEntry>,
}

fn status_name(r: FailureReason) -> &'static str {
    match r {
        FailureReason::Timeout => "timeout",
        FailureReason::NoDirectPath => "no_direct_path",
        FailureReason::MissedReplySlot => "missed_reply_slot",
        FailureReason::InconsistentExchange => "inconsistent",
    }
}

fn medium_params(sc: &SimScenario, spec: &WaveformSpec, c: f64, salt: u64) -> Result<MediumParams> {
    Ok(MediumParams {
        sound_speed_mps: c,
        preset: sc.profile,
        noise_sigma: match sc.snr_db {
            Some(snr) => Some(noise_sigma_for(spec, snr)?),
            None => None,
        },
        seed: mix_seed(&[sc.seed, 4, salt]),
        impulse: sc.impulse.map(|i| i.to_noise(spec)).transpose()?,
    })
}

fn engine_config(sc: &SimScenario, spec: &WaveformSpec, c: f64) -> EngineConfig {
    EngineConfig {
        path_method: sc.path_method,
        dual: DualMicParams {
            lambda: sc.lambda,
            sound_speed_mps: c,
            sample_rate_hz: spec.sample_rate_hz,
            ..DualMicParams::default()
        },
        ..EngineConfig::default()
    }
}

/// Run the two-device session for `sc.distances_m[distance_index]`.
pub fn run_session(sc: &SimScenario, distance_index: usize) -> Result<SessionOutput> {
    sc.validate()?;
    let spec = sc.spec();
    let fs = spec.sample_rate_hz;
    let c = sc.medium.speed()?;
    let distance = sc.distances_m[distance_index];
    let salt = distance_index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[sc.seed, 3, salt]));
    let clocks = draw_clocks(&sc.clocks, &mut rng);
    let geometry = DeviceGeometry::default();
    let devices = vec![
        DeviceModel { clock: clocks[0], geometry, trajectory: Trajectory::fixed([0.0; 3]) },
        DeviceModel {
            clock: clocks[1],
            geometry,
            trajectory: Trajectory { start: [distance, 0.0, 0.0], velocity: [sc.velocity_mps, 0.0, 0.0] },
        },
    ];
    let medium = Medium::new(medium_params(sc, &spec, c, salt)?, devices)?;

    let w = mic_weights(sc.path_method);
    let delta = |dev: usize| weighted(w, |m| medium.self_delay(dev, m));
    let base = ProtocolConfig {
        nominal_fs: fs,
        t_reply0: sc.t_reply0_s,
        period_s: sc.period_s,
        first_query_s: sc.first_query_s,
        sound_speed_mps: c,
        ..ProtocolConfig::default()
    };
    let sender_cfg = ProtocolConfig { delta_self_s: delta(0), delta_peer_s: delta(1), ..base };
    let mut replier_cfg = ProtocolConfig { delta_self_s: delta(1), delta_peer_s: delta(0), ..base };
    replier_cfg.sync.first_attempt_n = fs as i64;
    let roles = vec![Role::Sender(Sender::new(sender_cfg)), Role::Replier(Replier::new(replier_cfg))];
    let mut engine = Engine::new(medium, &spec, roles, engine_config(sc, &spec, c))?;

    let wanted = sc.exchanges;
    let outcomes = |log: &[LogEntry]| {
        log.iter()
            .filter(|e| e.device == 0 && matches!(e.action, Action::Completed(_) | Action::Failed { .. }))
            .count()
    };
    let t_end = sc.first_query_s + wanted as f64 * (sc.period_s + 3.0 * sc.t_reply0_s) + 10.0;
    let log = if wanted == 0 {
        Vec::new()
    } else {
        engine.run_until(t_end, |log| {
            log.last().is_some_and(|e| e.device == 0) && outcomes(log) >= wanted
        })?
    };

    let medium = &engine.medium;
    let (ca, cb) = (medium.devices[0].clock, medium.devices[1].clock);
    let k_c = build_preamble(&spec)?.body_center();
    let mut records = Vec::new();
    let mut diag: Option<ReplyDiagnostics> = None;
    for entry in &log {
        match (&entry.action, entry.device) {
            (Action::Replied(d), 1) => diag = Some(*d),
            (Action::Completed(_) | Action::Failed { .. }, 0) => {
                let (query, result, status) = match &entry.action {
                    Action::Completed(r) => (r.query_index, Some(r), "ok"),
                    Action::Failed { query_index: Some(q), reason } => (*q, None, status_name(*reason)),
                    _ => continue,
                };
                let tq = ca.speaker_time(query as f64);
                let reply = diag.take().filter(|d| cb.speaker_time(d.n2 as f64) > tq);
                let t_back = reply.map_or(tq + sc.t_reply0_s, |d| cb.speaker_time(d.n2 as f64));
                let truth = c * (medium.mean_path_delay(0, 1, tq) + medium.mean_path_delay(1, 0, t_back)) / 2.0;
                let (realized, predicted) = match reply {
                    Some(d) => {
                        // Both ends at the body center, the instant the receiver dates.
                        let arrive = tq + k_c * (1.0 - ca.alpha) / fs as f64 + weighted(w, |m| medium.path_delay(0, 1, m, tq));
                        let heard = cb.speaker_time(d.n2 as f64 + k_c) + weighted(w, |m| medium.self_delay(1, m));
                        let pred = sc.t_reply0_s + reply_error(cb.alpha, cb.beta, sc.t_reply0_s, d.m2 - d.m1, fs);
                        (Some(heard - arrive), Some(pred))
                    }
                    None => (None, None),
                };
                records.push(ExchangeRecord {
                    distance_index,
                    nominal_distance_m: distance,
                    exchange: records.len(),
                    query_index: query,
                    t_query_s: tq,
                    true_distance_m: truth,
                    status: status.to_string(),
                    est_distance_m: result.map(|r| r.distance_m),
                    error_m: result.map(|r| r.distance_m - truth),
                    t_send_s: result.map(|r| r.t_send),
                    t_reply_realized_s: realized,
                    t_reply_predicted_s: predicted,
                    sender_alpha: ca.alpha,
                    sender_beta: ca.beta,
                    replier_alpha: cb.alpha,
                    replier_beta: cb.beta,
                });
            }
            _ => {}
        }
    }
    records.truncate(wanted);
    Ok(SessionOutput {
        records,
        emissions: engine.medium.emissions.clone(),
        log,
    })
}

/// Per-distance statistics over absolute range error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub distance_m: f64,
    pub attempts: usize,
    pub ranged: usize,
    pub detection_rate: f64,
    pub median_abs_error_m: Option<f64>,
    pub p95_abs_error_m: Option<f64>,
    pub mean_error_m: Option<f64>,
}

pub fn summarize(distance_m: f64, records: &[ExchangeRecord]) -> SummaryRow {
    let errs: Vec<f64> = records.iter().filter_map(|r| r.error_m).collect();
    let abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
    let some = |v: f64| (!errs.is_empty()).then_some(v);
    SummaryRow {
        distance_m,
        attempts: records.len(),
        ranged: errs.len(),
        detection_rate: if records.is_empty() { 0.0 } else { errs.len() as f64 / records.len() as f64 },
        median_abs_error_m: some(dsp::median(&abs)),
        p95_abs_error_m: some(dsp::percentile(&abs, 0.95)),
        mean_error_m: some(errs.iter().sum::<f64>() / errs.len().max(1) as f64),
    }
}

#[derive(Debug, Clone)]
pub struct TrialReport {
    pub records: Vec<ExchangeRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Every distance of the scenario, sessions in parallel, results in order.
pub fn run_trials(sc: &SimScenario) -> Result<TrialReport> {
    sc.validate()?;
    let outputs: Vec<Result<SessionOutput>> = (0..sc.distances_m.len())
        .into_par_iter()
        .map(|i| run_session(sc, i))
        .collect();
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for (i, out) in outputs.into_iter().enumerate() {
        let out = out?;
        summary.push(summarize(sc.distances_m[i], &out.records));
        records.extend(out.records);
    }
    Ok(TrialReport { records, summary })
}

/// Leader and diver estimates of one diver's range for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinodeRow {
    pub diver_id: usize,
    pub round: usize,
    pub true_distance_m: f64,
    pub leader_distance_m: f64,
    pub diver_distance_m: Option<f64>,
    /// `|leader - diver|`.
    pub disagreement_m: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MultinodeOutput {
    pub rows: Vec<MultinodeRow>,
    pub failures: usize,
    pub emissions: Vec<EmissionRecord>,
}

/// Leader at the origin, divers where the scenario puts them. `distances_m`
/// is not used.
pub fn run_multinode(sc: &SimScenario) -> Result<MultinodeOutput> {
    sc.validate()?;
    let mn = sc
        .multinode
        .as_ref()
        .ok_or_else(|| Error::Scenario { field: "multinode".into(), reason: "missing".into() })?;
    let spec = sc.spec();
    let fs = spec.sample_rate_hz;
    let c = sc.medium.speed()?;
    let n = mn.divers.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[sc.seed, 5]));
    let geometry = DeviceGeometry::default();
    let mut devices = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let [a, _] = draw_clocks(&sc.clocks, &mut rng);
        let start = if k == 0 { [0.0; 3] } else { mn.divers[k - 1].position };
        devices.push(DeviceModel { clock: a, geometry, trajectory: Trajectory::fixed(start) });
    }
    let medium = Medium::new(medium_params(sc, &spec, c, 1000)?, devices)?;
    let w = mic_weights(sc.path_method);
    let delta = |dev: usize| weighted(w, |m| medium.self_delay(dev, m));
    let base = ProtocolConfig {
        nominal_fs: fs,
        t_reply0: sc.t_reply0_s,
        period_s: sc.period_s,
        first_query_s: 2.0 + n as f64,
        sound_speed_mps: c,
        ..ProtocolConfig::default()
    };
    let roster: Vec<usize> = mn.divers.iter().map(|d| d.id).collect();
    let mut roles = vec![Role::Leader(Leader::new(
        ProtocolConfig { delta_self_s: delta(0), delta_peer_s: delta(1), ..base },
        roster,
        mn.tau0_s,
    )?)];
    for (k, d) in mn.divers.iter().enumerate() {
        let mut cfg = ProtocolConfig { delta_self_s: delta(k + 1), delta_peer_s: delta(0), ..base };
        cfg.sync.first_attempt_n = ((1.0 + k as f64) * fs as f64) as i64;
        roles.push(Role::Diver(Diver::new(cfg, d.id, mn.tau0_s)));
    }
    let mut engine = Engine::new(medium, &spec, roles, engine_config(sc, &spec, c))?;
    let wanted = mn.rounds * n;
    let t_end = base.first_query_s + wanted as f64 * (sc.t_reply0_s + mn.tau0_s + 3.0 * sc.t_reply0_s) + 10.0;
    let outcomes = |log: &[LogEntry]| {
        log.iter()
            .filter(|e| e.device == 0 && matches!(e.action, Action::Completed(_) | Action::Failed { query_index: Some(_), .. }))
            .count()
    };
    // One extra query so the last reply has a following query to overhear.
    let log = engine.run_until(t_end, |log| {
        outcomes(log) >= wanted
            && log.last().is_some_and(|e| e.device == 0 && matches!(e.action, Action::Emit { kind: EmissionKind::Query, .. }))
    })?;
    // Let every diver process the final query, which may be written up to a
    // second before it plays.
    let settle = log.last().map_or(0.0, |e| e.time) + 3.0;
    let _ = engine.run_until(settle, |_| false)?;

    let medium = &engine.medium;
    let leader_clock = medium.devices[0].clock;
    let queries: Vec<i64> = log
        .iter()
        .filter_map(|e| match e.action {
            Action::Emit { kind: EmissionKind::Query, n, .. } if e.device == 0 => Some(n),
            _ => None,
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = 0;
    let mut rounds = vec![0usize; n];
    for entry in log.iter().filter(|e| e.device == 0) {
        match &entry.action {
            Action::Completed(r) => {
                let id = r.peer.expect("leader queries carry an ID");
                let k = mn.divers.iter().position(|d| d.id == id).expect("roster member");
                let tq = leader_clock.speaker_time(r.query_index as f64);
                let truth =
                    c * (medium.mean_path_delay(0, k + 1, tq) + medium.mean_path_delay(k + 1, 0, tq)) / 2.0;
                // The leader query following this exchange, as heard by the diver.
                let next_query = queries.iter().copied().find(|&q| q > r.query_index);
                let diver_distance = next_query.and_then(|q| {
                    let t_arrive = leader_clock.speaker_time(q as f64) + medium.mean_path_delay(0, k + 1, tq);
                    let m = medium.devices[k + 1].clock.mic_index_at(t_arrive);
                    let Role::Diver(d) = engine.role(k + 1) else { unreachable!() };
                    d.overheard
                        .iter()
                        .find(|o| (o.query_arrival - m).abs() < 0.05 * fs as f64)
                        .map(|o| o.distance_m)
                });
                rows.push(MultinodeRow {
                    diver_id: id,
                    round: rounds[k],
                    true_distance_m: truth,
                    leader_distance_m: r.distance_m,
                    diver_distance_m: diver_distance,
                    disagreement_m: diver_distance.map(|d| (d - r.distance_m).abs()),
                });
                rounds[k] += 1;
            }
            Action::Failed { query_index: Some(_), .. } => failures += 1,
            _ => {}
        }
    }
    Ok(MultinodeOutput {
        rows,
        failures,
        emissions: engine.medium.emissions.clone(),
    })
}
