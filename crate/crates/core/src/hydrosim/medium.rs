//! Shared acoustic medium: emissions in, per-microphone sample streams out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::interp::{self, HALF_WIDTH};
use super::profile::{make_channel_profile, ChannelProfile, ProfilePreset};
use crate::audioclock::{EmissionKind, StreamClock};
use crate::error::{Error, Result};

/// Noise is generated in fixed blocks so any read pattern sees the same samples.
const NOISE_BLOCK: i64 = 4096;
/// Spreading loss is clamped below this range.
const MIN_RANGE_M: f64 = 0.1;

pub type Vec3 = [f64; 3];

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Transducer offsets from the device origin, metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceGeometry {
    pub speaker: Vec3,
    /// Bottom, then top.
    pub mics: [Vec3; 2],
}

impl Default for DeviceGeometry {
    fn default() -> Self {
        DeviceGeometry {
            speaker: [0.0, 0.0, -0.07],
            mics: [[0.0, 0.01, -0.075], [0.0, 0.0, 0.075]],
        }
    }
}

/// Straight-line motion of a device origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: Vec3,
    #[serde(default)]
    pub velocity: Vec3,
}

impl Trajectory {
    pub fn fixed(start: Vec3) -> Self {
        Trajectory {
            start,
            velocity: [0.0; 3],
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.start[0] + self.velocity[0] * t,
            self.start[1] + self.velocity[1] * t,
            self.start[2] + self.velocity[2] * t,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub clock: StreamClock,
    pub geometry: DeviceGeometry,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumParams {
    pub sound_speed_mps: f64,
    pub preset: ProfilePreset,
    /// Per-sample noise standard deviation; `None` is noiseless.
    pub noise_sigma: Option<f64>,
    pub seed: u64,
    /// Sparse spikes on top of the Gaussian noise, off by default.
    #[serde(default)]
    pub impulse: Option<ImpulseNoise>,
}

/// Bernoulli spike train, e.g. bubble clicks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseNoise {
    /// Probability that any one sample carries a spike.
    pub probability: f64,
    /// Peak spike magnitude; each spike is uniform in half to full scale with random sign.
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub device: usize,
    pub kind: EmissionKind,
    pub start_n: i64,
    pub len: usize,
    /// Wall-clock span of the emission at the speaker.
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone)]
struct Rendered {
    start_m: i64,
    samples: Vec<f64>,
}

impl Rendered {
    fn end(&self) -> i64 {
        self.start_m + self.samples.len() as i64
    }
}

/// `samples` written from speaker index `start_n` of `tx`, as heard through
/// `profile` on the microphone grid of `rx`.
fn render_through(samples: &[f64], start_n: i64, tx: &StreamClock, rx: &StreamClock, profile: &ChannelProfile) -> Rendered {
    let t_start = tx.speaker_time(start_n as f64);
    let t_end = tx.speaker_time((start_n + samples.len() as i64) as f64);
    let margin = HALF_WIDTH as i64 + 1;
    let m_lo = rx.mic_index_at(t_start).floor() as i64 - margin;
    let m_hi = rx.mic_index_at(t_end).ceil() as i64 + margin;
    // The emission on the receiver's sample grid, before propagation.
    let base: Vec<f64> = (m_lo..m_hi)
        .map(|m| {
            let u = tx.speaker_index_at(rx.mic_time(m as f64)) - start_n as f64;
            interp::sample_at(samples, u)
        })
        .collect();
    let rate = rx.mic_rate();
    let (lo, _) = profile.delay_span();
    let shift = (lo * rate).floor() as i64 - HALF_WIDTH as i64;
    let fir_taps: Vec<(f64, f64)> = profile
        .all_taps()
        .map(|t| (t.delay_s * rate - shift as f64, t.gain))
        .collect();
    let fir = interp::fractional_delay_fir(&fir_taps);
    Rendered {
        start_m: m_lo + shift,
        samples: interp::convolve(&base, &fir),
    }
}

/// Standalone propagation of one transmit stream to a device's two microphones.
///
/// `tx_stream[0]` is written at speaker index 0 of `tx`. Each output starts at
/// microphone index 0 of `rx` and runs until the latest echo has died out.
/// With `snr_db` set, white Gaussian noise is added per microphone at that
/// ratio to the noiseless signal power over the emission's span.
pub fn propagate<R: Rng>(
    tx_stream: &[f64],
    profiles: &[ChannelProfile; 2],
    tx: &StreamClock,
    rx: &StreamClock,
    snr_db: Option<f64>,
    rng: &mut R,
) -> [Vec<f64>; 2] {
    profiles.each_ref().map(|p| {
        let r = render_through(tx_stream, 0, tx, rx, p);
        let len = r.end().max(0) as usize;
        let mut out = vec![0.0; len];
        for (k, v) in r.samples.iter().enumerate() {
            let m = r.start_m + k as i64;
            if m >= 0 {
                out[m as usize] += v;
            }
        }
        if let Some(snr) = snr_db {
            let power = out.iter().map(|v| v * v).sum::<f64>() / tx_stream.len().max(1) as f64;
            let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
            for v in out.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        out
    })
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 folded over the parts.
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z = x ^ (x >> 31);
    }
    z
}

#[derive(Debug, Clone)]
pub struct Medium {
    pub params: MediumParams,
    pub devices: Vec<DeviceModel>,
    pub emissions: Vec<EmissionRecord>,
    /// Channel drawn for each emission, `[emission][rx device][mic]`.
    pub profiles: Vec<Vec<[ChannelProfile; 2]>>,
    rendered: Vec<[Vec<Rendered>; 2]>,
}

impl Medium {
    pub fn new(params: MediumParams, devices: Vec<DeviceModel>) -> Result<Self> {
        if !(params.sound_speed_mps > 0.0) {
            return Err(Error::param("sound_speed_mps", "must be positive"));
        }
        for d in &devices {
            d.clock.validate()?;
        }
        let rendered = devices.iter().map(|_| [Vec::new(), Vec::new()]).collect();
        Ok(Medium {
            params,
            devices,
            emissions: Vec::new(),
            profiles: Vec::new(),
            rendered,
        })
    }

    fn mic_position(&self, device: usize, mic: usize, t: f64) -> Vec3 {
        let d = &self.devices[device];
        add(d.trajectory.at(t), d.geometry.mics[mic])
    }

    fn speaker_position(&self, device: usize, t: f64) -> Vec3 {
        let d = &self.devices[device];
        add(d.trajectory.at(t), d.geometry.speaker)
    }

    /// Speaker-to-microphone delay on the same device, seconds.
    pub fn self_delay(&self, device: usize, mic: usize) -> f64 {
        let g = &self.devices[device].geometry;
        dist(g.speaker, g.mics[mic]) / self.params.sound_speed_mps
    }

    /// Mean of [`self_delay`](Self::self_delay) over both microphones.
    pub fn mean_self_delay(&self, device: usize) -> f64 {
        (self.self_delay(device, 0) + self.self_delay(device, 1)) / 2.0
    }

    /// Direct-path delay from `tx`'s speaker to `rx`'s microphone at time `t`.
    pub fn path_delay(&self, tx: usize, rx: usize, mic: usize, t: f64) -> f64 {
        dist(self.speaker_position(tx, t), self.mic_position(rx, mic, t)) / self.params.sound_speed_mps
    }

    /// Direct-path delay averaged over `rx`'s two microphones.
    pub fn mean_path_delay(&self, tx: usize, rx: usize, t: f64) -> f64 {
        (self.path_delay(tx, rx, 0, t) + self.path_delay(tx, rx, 1, t)) / 2.0
    }

    fn draw_profile(&self, index: usize, tx: usize, rx: usize, mic: usize, t: f64) -> ChannelProfile {
        if tx == rx {
            return ChannelProfile::direct(self.self_delay(tx, mic), 1.0);
        }
        let delay = self.path_delay(tx, rx, mic, t);
        let range = delay * self.params.sound_speed_mps;
        let gain = 1.0 / range.max(MIN_RANGE_M);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.params.seed,
            1,
            index as u64,
            rx as u64,
            mic as u64,
        ]));
        make_channel_profile(self.params.preset, delay, gain, &mut rng)
    }

    /// Add an emission written at speaker index `start_n` of `device`.
    ///
    /// Fails if it overlaps any earlier emission in time.
    pub fn emit(&mut self, device: usize, start_n: i64, kind: EmissionKind, samples: &[f64]) -> Result<usize> {
        let tx = self.devices[device].clock;
        let rec = EmissionRecord {
            device,
            kind,
            start_n,
            len: samples.len(),
            t_start: tx.speaker_time(start_n as f64),
            t_end: tx.speaker_time((start_n + samples.len() as i64) as f64),
        };
        if let Some(other) = self
            .emissions
            .iter()
            .find(|e| e.t_start < rec.t_end && rec.t_start < e.t_end)
        {
            return Err(Error::TdmaViolation {
                first: other.device,
                second: device,
            });
        }
        let index = self.emissions.len();
        let mut per_rx = Vec::with_capacity(self.devices.len());
        for rx in 0..self.devices.len() {
            let profiles = [0, 1].map(|mic| self.draw_profile(index, device, rx, mic, rec.t_start));
            for (mic, p) in profiles.iter().enumerate() {
                let r = self.render_emission(&rec, samples, rx, p);
                self.rendered[rx][mic].push(r);
            }
            per_rx.push(profiles);
        }
        self.emissions.push(rec);
        self.profiles.push(per_rx);
        Ok(index)
    }

    fn render_emission(&self, rec: &EmissionRecord, samples: &[f64], rx: usize, profile: &ChannelProfile) -> Rendered {
        let tx = self.devices[rec.device].clock;
        let rxc = self.devices[rx].clock;
        render_through(samples, rec.start_n, &tx, &rxc, profile)
    }

    fn noise_block(&self, device: usize, mic: usize, block: i64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.params.seed,
            2,
            device as u64,
            mic as u64,
            block as u64,
        ]));
        let sigma = self.params.noise_sigma.unwrap_or(0.0);
        let mut out: Vec<f64> = (0..NOISE_BLOCK)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
            .collect();
        if let Some(imp) = self.params.impulse {
            for v in out.iter_mut() {
                if rng.random_bool(imp.probability.clamp(0.0, 1.0)) {
                    let mag = imp.amplitude * rng.random_range(0.5..=1.0);
                    *v += if rng.random::<bool>() { mag } else { -mag };
                }
            }
        }
        out
    }

    fn has_noise(&self) -> bool {
        self.params.noise_sigma.is_some_and(|s| s > 0.0) || self.params.impulse.is_some()
    }

    /// Microphone samples `[m0, m0 + len)` of `device`'s `mic`.
    pub fn render(&self, device: usize, mic: usize, m0: i64, len: usize) -> Vec<f64> {
        let m1 = m0 + len as i64;
        let mut out = vec![0.0; len];
        for r in &self.rendered[device][mic] {
            let lo = r.start_m.max(m0);
            let hi = r.end().min(m1);
            for m in lo..hi {
                out[(m - m0) as usize] += r.samples[(m - r.start_m) as usize];
            }
        }
        if self.has_noise() {
            let mut m = m0;
            while m < m1 {
                let block = m.div_euclid(NOISE_BLOCK);
                let noise = self.noise_block(device, mic, block);
                let b_end = ((block + 1) * NOISE_BLOCK).min(m1);
                for k in m..b_end {
                    out[(k - m0) as usize] += noise[(k - block * NOISE_BLOCK) as usize];
                }
                m = b_end;
            }
        }
        out
    }

    /// Drop rendered contributions that end before microphone index `m`.
    pub fn prune(&mut self, device: usize, m: i64) {
        for list in &mut self.rendered[device] {
            list.retain(|r| r.end() > m);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_devices(range: f64, clocks: [StreamClock; 2]) -> Vec<DeviceModel> {
        [0.0, range]
            .iter()
            .zip(clocks)
            .map(|(&x, clock)| DeviceModel {
                clock,
                geometry: DeviceGeometry::default(),
                trajectory: Trajectory::fixed([x, 0.0, 0.0]),
            })
            .collect()
    }

    fn params(preset: ProfilePreset, noise: Option<f64>) -> MediumParams {
        MediumParams {
            sound_speed_mps: 1500.0,
            preset,
            noise_sigma: noise,
            seed: 1,
            impulse: None,
        }
    }

    #[test]
    fn integer_delay_through_clean_channel_is_exact() {
        // 1500 m/s and 44.1 kHz: 34.013... m is exactly 1000 samples.
        let range = 1000.0 * 1500.0 / 44_100.0;
        let mut g = DeviceGeometry::default();
        g.speaker = [0.0; 3];
        g.mics = [[0.0; 3]; 2];
        let devices = vec![
            DeviceModel { clock: StreamClock::default(), geometry: g, trajectory: Trajectory::fixed([0.0; 3]) },
            DeviceModel { clock: StreamClock::default(), geometry: g, trajectory: Trajectory::fixed([range, 0.0, 0.0]) },
        ];
        let mut med = Medium::new(params(ProfilePreset::Clean, None), devices).unwrap();
        let x: Vec<f64> = (0..500).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        med.emit(0, 2000, EmissionKind::Query, &x).unwrap();
        let y = med.render(1, 0, 2900, 800);
        let gain = 1.0 / range;
        for (i, &v) in x.iter().enumerate() {
            assert!((y[100 + i] - gain * v).abs() < 1e-9, "{i}");
        }
        assert!(y[..100].iter().all(|v| v.abs() < 1e-9));
        // Own microphone hears it with unit gain and zero delay.
        let own = med.render(0, 1, 2000, 500);
        for (a, b) in own.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn overlapping_emissions_are_rejected() {
        let mut med = Medium::new(
            params(ProfilePreset::Clean, None),
            two_devices(10.0, [StreamClock::default(); 2]),
        )
        .unwrap();
        let x = vec![0.5; 1000];
        med.emit(0, 0, EmissionKind::Query, &x).unwrap();
        match med.emit(1, 999, EmissionKind::Reply, &x) {
            Err(Error::TdmaViolation { first: 0, second: 1 }) => {}
            other => panic!("{other:?}"),
        }
        med.emit(1, 1000, EmissionKind::Reply, &x).unwrap();
    }

    #[test]
    fn noise_is_independent_of_read_pattern() {
        let med = Medium::new(
            params(ProfilePreset::Clean, Some(0.1)),
            two_devices(10.0, [StreamClock::default(); 2]),
        )
        .unwrap();
        let whole = med.render(1, 0, 1000, 10_000);
        let a = med.render(1, 0, 1000, 3333);
        let b = med.render(1, 0, 4333, 6667);
        assert_eq!(&whole[..3333], &a[..]);
        assert_eq!(&whole[3333..], &b[..]);
        let other_mic = med.render(1, 1, 1000, 10_000);
        assert_ne!(whole, other_mic);
        let var = whole.iter().map(|v| v * v).sum::<f64>() / whole.len() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005);
    }

    #[test]
    fn skewed_clocks_follow_the_stream_model() {
        let tx = StreamClock { alpha: 60e-6, t_s0: 0.011, ..Default::default() };
        let rx = StreamClock { beta: -45e-6, t_m0: 0.029, ..Default::default() };
        let mut med = Medium::new(params(ProfilePreset::Clean, None), two_devices(20.0, [tx, rx])).unwrap();
        let x = crate::waveform::tone(2500.0, 4000, 44_100);
        med.emit(0, 10_000, EmissionKind::Query, &x).unwrap();
        let delay = med.path_delay(0, 1, 0, 0.0);
        let gain = 1.0 / (delay * 1500.0);
        let m0 = rx.mic_index_at(tx.speaker_time(10_000.0) + delay).ceil() as i64;
        let y = med.render(1, 0, m0, 4000);
        for k in 100..3800 {
            let t = rx.mic_time((m0 + k as i64) as f64) - delay;
            let u = tx.speaker_index_at(t) - 10_000.0;
            let want = gain * (2.0 * std::f64::consts::PI * 2500.0 * u / 44_100.0).sin();
            assert!((y[k] - want).abs() < 1e-4 * gain, "{k}");
        }
    }

    fn preamble() -> Vec<f64> {
        crate::waveform::build_preamble(&crate::waveform::WaveformSpec::short()).unwrap().samples
    }

    /// Lag of the band-limited cross-correlation peak, to a thousandth of a sample.
    fn fine_lag(y: &[f64], x: &[f64]) -> f64 {
        let xc = crate::dsp::xcorr_valid(y, x);
        let k = (0..xc.len()).max_by(|&a, &b| xc[a].total_cmp(&xc[b])).unwrap() as f64;
        let (mut lo, mut hi) = (k - 1.0, k + 1.0);
        for _ in 0..60 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if interp::sample_at(&xc, m1) < interp::sample_at(&xc, m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        (lo + hi) / 2.0
    }

    #[test]
    fn propagate_pure_delay() {
        let x = preamble();
        let p = ChannelProfile::direct(441.0 / 44_100.0, 1.0);
        let clk = StreamClock::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let [a, b] = propagate(&x, &[p.clone(), p], &clk, &clk, None, &mut rng);
        assert_eq!(a, b);
        for (i, v) in x.iter().enumerate() {
            assert!((a[441 + i] - v).abs() < 1e-9);
        }
        let lag = fine_lag(&a, &x);
        assert!((lag - 441.0).abs() < 0.1, "{lag}");
    }

    #[test]
    fn inter_mic_difference_follows_geometry() {
        let mut g = DeviceGeometry::default();
        g.speaker = [0.0; 3];
        g.mics = [[0.0, 0.0, 0.0], [0.15, 0.0, 0.0]];
        let devices = vec![
            DeviceModel { clock: StreamClock::default(), geometry: g, trajectory: Trajectory::fixed([0.0; 3]) },
            DeviceModel { clock: StreamClock::default(), geometry: g, trajectory: Trajectory::fixed([10.0, 0.0, 0.0]) },
        ];
        let mut med = Medium::new(params(ProfilePreset::Clean, None), devices).unwrap();
        let x = preamble();
        med.emit(0, 1000, EmissionKind::Query, &x).unwrap();
        let near = med.render(1, 0, 0, 20_000);
        let far = med.render(1, 1, 0, 20_000);
        let d = fine_lag(&far, &x) - fine_lag(&near, &x);
        let want = 0.15 / 1500.0 * 44_100.0;
        assert!((d - want).abs() <= 0.1, "{d} vs {want}");
    }

    #[test]
    fn configured_snr_is_measured() {
        let x = preamble();
        let p = ChannelProfile::direct(0.01, 0.05);
        let clk = StreamClock::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clean = propagate(&x, &[p.clone(), p.clone()], &clk, &clk, None, &mut rng);
        let noisy = propagate(&x, &[p.clone(), p], &clk, &clk, Some(20.0), &mut rng);
        for mic in 0..2 {
            let sig: f64 = clean[mic].iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            let noise: f64 = clean[mic]
                .iter()
                .zip(&noisy[mic])
                .map(|(c, n)| (n - c).powi(2))
                .sum::<f64>()
                / clean[mic].len() as f64;
            let snr = 10.0 * (sig / noise).log10();
            assert!((snr - 20.0).abs() <= 0.5, "{snr}");
        }
        assert_ne!(noisy[0], noisy[1]);
    }

    #[test]
    fn unit_tap_conserves_energy() {
        let x = preamble();
        let e_in = crate::dsp::energy(&x);
        let clk = StreamClock::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [300.0, 300.25, 517.5, 1033.87] {
            let p = ChannelProfile::direct(d / 44_100.0, 1.0);
            let [y, _] = propagate(&x, &[p.clone(), p], &clk, &clk, None, &mut rng);
            let ratio = crate::dsp::energy(&y) / e_in;
            assert!((ratio - 1.0).abs() < 1e-3, "{d}: {ratio}");
        }
        // Skewed clocks stretch the stream by the skew ratio, nothing more.
        let tx = StreamClock { alpha: 50e-6, ..Default::default() };
        let rx = StreamClock { beta: -30e-6, ..Default::default() };
        let p = ChannelProfile::direct(0.01, 1.0);
        let [y, _] = propagate(&x, &[p.clone(), p], &tx, &rx, None, &mut rng);
        let ratio = crate::dsp::energy(&y) / e_in;
        assert!((ratio - 1.0).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn impulse_noise_is_sparse_and_seeded() {
        let mut pr = params(ProfilePreset::Clean, None);
        pr.impulse = Some(ImpulseNoise { probability: 1e-3, amplitude: 2.0 });
        let med = Medium::new(pr, two_devices(5.0, [StreamClock::default(); 2])).unwrap();
        let y = med.render(1, 0, 0, 200_000);
        let spikes: Vec<f64> = y.iter().copied().filter(|v| *v != 0.0).collect();
        assert!((150..=250).contains(&spikes.len()), "{}", spikes.len());
        assert!(spikes.iter().all(|v| (1.0..=2.0).contains(&v.abs())));
        assert_eq!(y, med.render(1, 0, 0, 200_000));
        let quiet = Medium::new(params(ProfilePreset::Clean, None), two_devices(5.0, [StreamClock::default(); 2])).unwrap();
        assert!(quiet.render(1, 0, 0, 10_000).iter().all(|v| *v == 0.0));
    }
}
