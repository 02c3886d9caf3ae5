//! Per-stage timing of the receive path over one processing buffer.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::receiver::{auto_correlate_score, symbol_bodies, ChannelEstimator, Correlator, MicId};
use crate::waveform::{build_preamble, Preamble, WaveformSpec};

/// One synthetic two-microphone buffer holding a single preamble in noise.
#[derive(Debug, Clone)]
pub struct StageInput {
    pub preamble: Preamble,
    pub bottom: Vec<f64>,
    pub top: Vec<f64>,
    /// Where the preamble starts in both streams.
    pub offset: usize,
}

impl StageInput {
    /// `buffer_ms` of audio at 20 dB SNR, the preamble a quarter of the way in.
    pub fn new(spec: &WaveformSpec, buffer_ms: f64, seed: u64) -> Result<Self> {
        let preamble = build_preamble(spec)?;
        let len = (buffer_ms * 1e-3 * spec.sample_rate_hz as f64).round() as usize;
        let tlen = preamble.total_len;
        if len < tlen + tlen / 2 {
            return Err(Error::param(
                "buffer_ms",
                format!("{len} samples cannot hold a {tlen}-sample preamble"),
            ));
        }
        let offset = (len - tlen) / 4;
        let power = crate::dsp::energy(&preamble.samples) / tlen as f64;
        let noise = Normal::new(0.0, (power / 100.0).sqrt()).expect("finite sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stream = |shift: usize| -> Vec<f64> {
            let mut x: Vec<f64> = (0..len).map(|_| noise.sample(&mut rng)).collect();
            for (i, s) in preamble.samples.iter().enumerate() {
                x[offset + shift + i] += s;
            }
            x
        };
        let bottom = stream(0);
        let top = stream(3);
        Ok(StageInput { preamble, bottom, top, offset })
    }
}

/// Reusable state so that timed runs exclude FFT planning.
pub struct Pipeline {
    correlator: Correlator,
    estimator: ChannelEstimator,
    lookback: usize,
}

impl Pipeline {
    pub fn new(preamble: &Preamble) -> Self {
        Pipeline {
            correlator: Correlator::new(&preamble.samples),
            estimator: ChannelEstimator::new(preamble),
            lookback: 160,
        }
    }

    /// Strongest correlation lag in the buffer.
    pub fn xcorr(&mut self, input: &StageInput) -> usize {
        let xc = self.correlator.correlate(&input.bottom).expect("buffer longer than template");
        xc.argmax.unwrap_or(0)
    }

    pub fn autocorr(&self, input: &StageInput, lag: usize) -> f64 {
        let tlen = input.preamble.total_len;
        auto_correlate_score(&input.bottom[lag..lag + tlen], &input.preamble)
    }

    /// Channel estimates for both microphones, tap 0 `lookback` samples early.
    pub fn estimate(&self, input: &StageInput, lag: usize) -> f64 {
        let tlen = input.preamble.total_len;
        let start = lag.saturating_sub(self.lookback);
        let mut peak = 0.0;
        for (x, mic) in [(&input.bottom, MicId::Bottom), (&input.top, MicId::Top)] {
            let bodies = symbol_bodies(&x[start..start + tlen], &input.preamble).expect("window fits");
            let est = self.estimator.estimate(&bodies, mic).expect("eight symbols");
            peak += est.raw_peak;
        }
        peak
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Stat {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Stat { mean_ms: mean, std_ms: var.sqrt() }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2} ms", self.mean_ms, self.std_ms)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTimings {
    pub runs: usize,
    pub buffer_ms: f64,
    pub cross_correlation: Stat,
    pub auto_correlation: Stat,
    pub channel_estimation: Stat,
    pub total: Stat,
}

/// Time every stage `runs` times over the same buffer; one warm-up pass first.
pub fn time_stages(spec: &WaveformSpec, buffer_ms: f64, runs: usize, seed: u64) -> Result<StageTimings> {
    let input = StageInput::new(spec, buffer_ms, seed)?;
    let mut pipe = Pipeline::new(&input.preamble);
    let lag = pipe.xcorr(&input);
    std::hint::black_box(pipe.estimate(&input, lag));
    let mut laps = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;
    for _ in 0..runs {
        let t0 = Instant::now();
        let lag = std::hint::black_box(pipe.xcorr(&input));
        let a = ms(t0);
        let t1 = Instant::now();
        std::hint::black_box(pipe.autocorr(&input, lag));
        let b = ms(t1);
        let t2 = Instant::now();
        std::hint::black_box(pipe.estimate(&input, lag));
        let c = ms(t2);
        for (v, x) in laps.iter_mut().zip([a, b, c, a + b + c]) {
            v.push(x);
        }
    }
    Ok(StageTimings {
        runs,
        buffer_ms,
        cross_correlation: Stat::of(&laps[0]),
        auto_correlation: Stat::of(&laps[1]),
        channel_estimation: Stat::of(&laps[2]),
        total: Stat::of(&laps[3]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_finds_the_planted_preamble() {
        let input = StageInput::new(&WaveformSpec::short(), 500.0, 1).unwrap();
        let mut pipe = Pipeline::new(&input.preamble);
        let lag = pipe.xcorr(&input);
        assert_eq!(lag, input.offset);
        assert!(pipe.autocorr(&input, lag) > 0.9);
        assert!(pipe.estimate(&input, lag) > 0.0);
    }

    #[test]
    fn short_buffer_is_rejected() {
        assert!(StageInput::new(&WaveformSpec::short(), 100.0, 0).is_err());
    }

    #[test]
    fn timings_report_every_run() {
        let t = time_stages(&WaveformSpec::short(), 500.0, 3, 0).unwrap();
        assert_eq!(t.runs, 3);
        assert!(t.total.mean_ms >= t.cross_correlation.mean_ms);
        assert!(t.total.std_ms.is_finite());
    }
}
