//! Scenario files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::medium::{ImpulseNoise, Vec3};
use super::profile::ProfilePreset;
use crate::dualmic::PathMethod;
use crate::error::{Error, Result};
use crate::ranging::MediumConfig;
use crate::waveform::{WaveformSpec, ID_TONE_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreambleKind {
    #[default]
    Short,
    Long,
}

impl PreambleKind {
    pub fn spec(self) -> WaveformSpec {
        match self {
            PreambleKind::Short => WaveformSpec::short(),
            PreambleKind::Long => WaveformSpec::long(),
        }
    }
}

impl std::str::FromStr for PreambleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(PreambleKind::Short),
            "long" => Ok(PreambleKind::Long),
            other => Err(scenario_err("preamble", format!("unknown preamble `{other}`"))),
        }
    }
}

/// Clock skews and stream offsets for the two devices of a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClockSpec {
    /// Skews drawn uniformly within `+-max_ppm`, offsets within 40 ms.
    Random { max_ppm: f64 },
    /// One oscillator per device: `alpha == beta`, drawn within `+-max_ppm`.
    Shared { max_ppm: f64 },
    Fixed {
        sender_alpha_ppm: f64,
        sender_beta_ppm: f64,
        replier_alpha_ppm: f64,
        replier_beta_ppm: f64,
        #[serde(default)]
        random_offsets: bool,
    },
}

impl Default for ClockSpec {
    fn default() -> Self {
        ClockSpec::Random { max_ppm: 80.0 }
    }
}

/// Spike train added to every microphone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseSpec {
    /// Mean spikes per second.
    pub rate_hz: f64,
    /// Spike peak relative to the preamble RMS at 1 m.
    pub amplitude: f64,
}

impl ImpulseSpec {
    pub fn to_noise(&self, spec: &WaveformSpec) -> Result<ImpulseNoise> {
        Ok(ImpulseNoise {
            probability: self.rate_hz / spec.sample_rate_hz as f64,
            amplitude: self.amplitude * super::trials::noise_sigma_for(spec, 0.0)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiverSpec {
    pub id: usize,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultinodeSpec {
    pub divers: Vec<DiverSpec>,
    #[serde(default = "default_tau0")]
    pub tau0_s: f64,
    /// Queries per diver.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
}

fn default_tau0() -> f64 {
    2.0
}
fn default_rounds() -> usize {
    5
}
fn default_exchanges() -> usize {
    60
}
fn default_period() -> f64 {
    2.0
}
fn default_t_reply0() -> f64 {
    1.0
}
fn default_first_query() -> f64 {
    2.0
}
fn default_lambda() -> f64 {
    0.2
}

/// A simulation run: one independent two-device session per distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preamble: PreambleKind,
    #[serde(default)]
    pub profile: ProfilePreset,
    /// Per-sample SNR at 1 m, dB. Absent means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub impulse: Option<ImpulseSpec>,
    #[serde(default)]
    pub medium: MediumConfig,
    pub distances_m: Vec<f64>,
    /// Exchanges per distance.
    #[serde(default = "default_exchanges")]
    pub exchanges: usize,
    #[serde(default = "default_period")]
    pub period_s: f64,
    #[serde(default = "default_t_reply0")]
    pub t_reply0_s: f64,
    #[serde(default = "default_first_query")]
    pub first_query_s: f64,
    #[serde(default)]
    pub path_method: PathMethod,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub clocks: ClockSpec,
    /// Radial speed of the replier away from the sender, m/s.
    #[serde(default)]
    pub velocity_mps: f64,
    #[serde(default)]
    pub multinode: Option<MultinodeSpec>,
}

/// Dotted key at the error position, e.g. `medium.model`, or `toml` when unknown.
fn toml_field(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else {
        return "toml".into();
    };
    let mut table = String::new();
    let mut key = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset <= span.start && span.start < offset + line.len().max(1) {
            key = t.split_once('=').map(|(k, _)| k.trim().to_string());
            if key.is_none() && t.starts_with('[') {
                return table;
            }
            break;
        }
        offset += line.len();
    }
    match (key, table.is_empty()) {
        (Some(k), true) => k,
        (Some(k), false) => format!("{table}.{k}"),
        (None, false) => table,
        (None, true) => "toml".into(),
    }
}

fn scenario_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Scenario {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl SimScenario {
    /// Minimal scenario at the given distances, noiseless and clean.
    pub fn new(name: &str, distances_m: Vec<f64>) -> Self {
        SimScenario {
            name: name.to_string(),
            seed: 0,
            preamble: PreambleKind::Short,
            profile: ProfilePreset::Clean,
            snr_db: None,
            impulse: None,
            medium: MediumConfig::default(),
            distances_m,
            exchanges: default_exchanges(),
            period_s: default_period(),
            t_reply0_s: default_t_reply0(),
            first_query_s: default_first_query(),
            path_method: PathMethod::Dual,
            lambda: default_lambda(),
            clocks: ClockSpec::default(),
            velocity_mps: 0.0,
            multinode: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: SimScenario = toml::from_str(text).map_err(|e| scenario_err(&toml_field(text, &e), e.message()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn spec(&self) -> WaveformSpec {
        self.preamble.spec()
    }

    /// Worst-case delay from a reply's arrival at the leader to the earliest
    /// speaker index it can still write: preamble and ID tail, one buffer to
    /// detect, one more until the next write opportunity, speaker latency.
    pub fn min_tau0_s(&self) -> f64 {
        let spec = self.spec();
        let samples = spec.preamble_len()
            + spec.id_tone_len
            + 2 * crate::receiver::DetectorConfig::default().buffer_len
            + super::engine::DEFAULT_SPEAKER_LATENCY as usize;
        samples as f64 / spec.sample_rate_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.distances_m.is_empty() {
            return Err(scenario_err("distances_m", "must not be empty"));
        }
        if let Some(d) = self.distances_m.iter().find(|d| !(d.is_finite() && **d > 0.0 && **d <= 500.0)) {
            return Err(scenario_err("distances_m", format!("{d} outside (0, 500] m")));
        }
        if !(self.t_reply0_s > 0.0 && self.t_reply0_s.is_finite()) {
            return Err(scenario_err("t_reply0_s", "must be positive"));
        }
        if !(self.period_s > self.t_reply0_s) {
            return Err(scenario_err("period_s", "must exceed t_reply0_s"));
        }
        if !(self.first_query_s >= 1.5) {
            return Err(scenario_err("first_query_s", "device calibration needs at least 1.5 s"));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(scenario_err("snr_db", "must be finite"));
            }
        }
        if let Some(i) = self.impulse {
            let fs = self.spec().sample_rate_hz as f64;
            if !(i.rate_hz >= 0.0 && i.rate_hz <= fs && i.amplitude.is_finite() && i.amplitude >= 0.0) {
                return Err(scenario_err("impulse", "rate must be within [0, fs] and amplitude non-negative"));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(scenario_err("lambda", "must be positive"));
        }
        if !self.velocity_mps.is_finite() || self.velocity_mps.abs() > 5.0 {
            return Err(scenario_err("velocity_mps", "must be within +-5 m/s"));
        }
        let ppm_ok = |v: f64| v.is_finite() && v.abs() <= 1000.0;
        match self.clocks {
            ClockSpec::Random { max_ppm } | ClockSpec::Shared { max_ppm } if !(ppm_ok(max_ppm) && max_ppm >= 0.0) => {
                return Err(scenario_err("clocks.max_ppm", "must be within [0, 1000]"))
            }
            ClockSpec::Fixed {
                sender_alpha_ppm: a,
                sender_beta_ppm: b,
                replier_alpha_ppm: c,
                replier_beta_ppm: d,
                ..
            } if ![a, b, c, d].into_iter().all(ppm_ok) => {
                return Err(scenario_err("clocks", "skews must be within +-1000 ppm"))
            }
            _ => {}
        }
        self.medium
            .speed()
            .map_err(|e| scenario_err("medium", e.to_string()))?;
        if let Some(m) = &self.multinode {
            if m.divers.is_empty() {
                return Err(scenario_err("multinode.divers", "must not be empty"));
            }
            let mut ids: Vec<usize> = m.divers.iter().map(|d| d.id).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != m.divers.len() {
                return Err(scenario_err("multinode.divers", "IDs must be unique"));
            }
            if ids.iter().any(|&i| i >= ID_TONE_COUNT) {
                return Err(scenario_err("multinode.divers", "ID outside the tone table"));
            }
            let c = self.medium.speed().unwrap_or(1500.0);
            let far = m.divers.iter().map(|d| d.position.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
            let min = self.min_tau0_s() + 2.0 * far / c;
            if !(m.tau0_s >= min) {
                return Err(scenario_err(
                    "multinode.tau0_s",
                    format!("must be at least {min:.3} s so the leader can answer every reply on time"),
                ));
            }
        }
        Ok(())
    }
}

/// Distance sweep used by the CLI when no scenario file is given.
pub const DIST_SWEEP_TOML: &str = r#"name = "dist_sweep"
seed = 7
profile = "case_underwater_dense"
snr_db = 26.0
distances_m = [10.0, 20.0, 35.0, 45.0]
exchanges = 20

[medium]
model = "fixed"
speed_mps = 1500.0
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_sweep_parses() {
        let s = SimScenario::from_toml_str(DIST_SWEEP_TOML).unwrap();
        assert_eq!(s.distances_m.len(), 4);
        assert_eq!(s.profile, ProfilePreset::CaseUnderwaterDense);
        assert_eq!(s.period_s, 2.0);
    }

    #[test]
    fn parse_errors_name_the_field() {
        let field = |text: &str| match SimScenario::from_toml_str(text) {
            Err(Error::Scenario { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("name = \"x\"\ndistances_m = [1.0]\nperiod_s = \"two\"\n"), "period_s");
        assert_eq!(field("name = \"x\"\ndistances_m = [1.0]\n[medium]\nmodel = \"fixed\"\nspeed_mps = \"fast\"\n"), "medium");
        assert_eq!(field("name = \"x\"\ndistances_m = [1.0]\nperiod_s = 0.5\n"), "period_s");
        assert_eq!(field("name = \"x\"\ndistances_m = [0.0]\n"), "distances_m");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut s = SimScenario::new("rt", vec![3.0]);
        s.multinode = Some(MultinodeSpec {
            divers: vec![DiverSpec { id: 2, position: [5.0, 1.0, 0.0] }],
            tau0_s: 2.0,
            rounds: 2,
        });
        s.clocks = ClockSpec::Fixed {
            sender_alpha_ppm: 40.0,
            sender_beta_ppm: 40.0,
            replier_alpha_ppm: 40.0,
            replier_beta_ppm: 40.0,
            random_offsets: false,
        };
        let back = SimScenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_malformed() {
        let bad = [
            "name = 1",
            "name = \"x\"\ndistances_m = []",
            "name = \"x\"\ndistances_m = [-1.0]",
            "name = \"x\"\ndistances_m = [1.0]\nperiod_s = 0.5",
            "name = \"x\"\ndistances_m = [1.0]\nprofile = \"swamp\"",
            "name = \"x\"\ndistances_m = [1.0]\nunknown_key = 3",
            "name = \"x\"\ndistances_m = [1.0]\n[multinode]\ntau0_s = 1.2\ndivers = [{ id = 1, position = [40.0, 0.0, 0.0] }]",
            "name = \"x\"\ndistances_m = [1.0]\n[medium]\nmodel = \"wilson\"\ntemperature_c = 50.0\nsalinity_psu = 35.0\ndepth_m = 0.0",
        ];
        for text in bad {
            assert!(
                matches!(SimScenario::from_toml_str(text), Err(Error::Scenario { .. })),
                "{text}"
            );
        }
    }
}
