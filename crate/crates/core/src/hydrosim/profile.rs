//! Multipath channel profiles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfilePreset {
    /// Direct path only.
    #[default]
    Clean,
    /// Strong, short echoes from the phone case and pouch.
    CaseAir,
    /// Case echoes plus dense reverberation and spurious early energy.
    CaseUnderwaterDense,
    /// Dense profile with twice the reflections.
    ShallowSevere,
}

impl std::str::FromStr for ProfilePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(ProfilePreset::Clean),
            "case_air" => Ok(ProfilePreset::CaseAir),
            "case_underwater_dense" => Ok(ProfilePreset::CaseUnderwaterDense),
            "shallow_severe" => Ok(ProfilePreset::ShallowSevere),
            other => Err(Error::Scenario {
                field: "profile".into(),
                reason: format!("unknown preset `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    /// Absolute propagation delay, seconds.
    pub delay_s: f64,
    pub gain: f64,
}

/// One realization of a transmitter-to-microphone channel.
///
/// `taps[0]` is the direct path and every other tap arrives no earlier.
/// Energy arriving before the direct path lives in `precursors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub taps: Vec<Tap>,
    pub precursors: Vec<Tap>,
}

impl ChannelProfile {
    pub fn direct(delay_s: f64, gain: f64) -> Self {
        ChannelProfile {
            taps: vec![Tap { delay_s, gain }],
            precursors: Vec::new(),
        }
    }

    pub fn direct_delay(&self) -> f64 {
        self.taps[0].delay_s
    }

    pub fn all_taps(&self) -> impl Iterator<Item = &Tap> {
        self.taps.iter().chain(&self.precursors)
    }

    pub fn delay_span(&self) -> (f64, f64) {
        self.all_taps().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            (lo.min(t.delay_s), hi.max(t.delay_s))
        })
    }
}

fn signed<R: Rng>(rng: &mut R, magnitude: f64) -> f64 {
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

fn case_echoes<R: Rng>(rng: &mut R, direct: Tap, out: &mut Vec<Tap>) {
    let count = rng.random_range(5..=20);
    for _ in 0..count {
        let delay = rng.random_range(0.5e-3..=3e-3);
        let mag = rng.random_range(0.1..=1.4);
        out.push(Tap {
            delay_s: direct.delay_s + delay,
            gain: signed(rng, mag) * direct.gain,
        });
    }
}

fn reflections<R: Rng>(rng: &mut R, direct: Tap, count: usize, out: &mut Vec<Tap>) {
    for _ in 0..count {
        let delay: f64 = rng.random_range(1e-3..=25e-3);
        let mag = 0.9 * (-delay / 6e-3).exp() * rng.random_range(0.3..=1.0);
        out.push(Tap {
            delay_s: direct.delay_s + delay,
            gain: signed(rng, mag) * direct.gain,
        });
    }
}

/// Early bump before the direct path, present with probability one half.
fn precursor<R: Rng>(rng: &mut R, direct: Tap) -> Option<Tap> {
    if !rng.random::<bool>() {
        return None;
    }
    let lead = rng.random_range(0.3e-3..=4e-3);
    let mag = rng.random_range(0.15..=0.5);
    Some(Tap {
        delay_s: (direct.delay_s - lead).max(0.0),
        gain: signed(rng, mag) * direct.gain,
    })
}

/// Draw a channel for a direct path of `direct_delay_s` and `direct_gain`.
pub fn make_channel_profile<R: Rng>(
    preset: ProfilePreset,
    direct_delay_s: f64,
    direct_gain: f64,
    rng: &mut R,
) -> ChannelProfile {
    let direct = Tap {
        delay_s: direct_delay_s,
        gain: direct_gain,
    };
    let mut taps = vec![direct];
    let mut precursors = Vec::new();
    match preset {
        ProfilePreset::Clean => {}
        ProfilePreset::CaseAir => case_echoes(rng, direct, &mut taps),
        ProfilePreset::CaseUnderwaterDense | ProfilePreset::ShallowSevere => {
            case_echoes(rng, direct, &mut taps);
            let base = rng.random_range(20..=60);
            let count = if preset == ProfilePreset::ShallowSevere { 2 * base } else { base };
            reflections(rng, direct, count, &mut taps);
            precursors.extend(precursor(rng, direct).filter(|p| p.delay_s < direct.delay_s));
        }
    }
    ChannelProfile { taps, precursors }
}
