//! Preamble acquisition and per-microphone channel estimation.
//!
//! Three stages run on every microphone buffer:
//!
//! 1. normalized cross-correlation against the known preamble gives a coarse
//!    candidate;
//! 2. the candidate is split into its eight symbol slots, PN-corrected, and the
//!    mean pairwise correlation must clear a threshold (0.35 by default);
//! 3. an LS estimate over the eight symbols gives a 1260-tap magnitude profile
//!    for each microphone, which the dual-mic search consumes.

use std::collections::HashMap;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::waveform::{Preamble, SYMBOL_COUNT};

/// Default auto-correlation acceptance threshold.
pub const AUTOCORR_THRESHOLD: f64 = 0.35;
/// Channel length in taps.
pub const CHANNEL_LEN: usize = 1260;
/// Taps averaged for the noise floor.
pub const NOISE_TAPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MicId {
    Bottom,
    Top,
}

impl MicId {
    pub const BOTH: [MicId; 2] = [MicId::Bottom, MicId::Top];

    pub fn index(self) -> usize {
        match self {
            MicId::Bottom => 0,
            MicId::Top => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Absolute sample index of the preamble start in the microphone stream.
    pub coarse_index: i64,
    pub xcorr_peak: f64,
    pub autocorr_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    /// Magnitude taps normalized to a maximum of 1.
    pub taps: Vec<f64>,
    /// Mean power of the last [`NOISE_TAPS`] normalized taps.
    pub noise_floor: f64,
    pub mic_id: MicId,
    /// Largest magnitude before normalization.
    pub raw_peak: f64,
    pub empty: bool,
}

/// Output of [`cross_correlate`].
#[derive(Debug, Clone)]
pub struct CrossCorrelation {
    /// Normalized correlation per lag, in `[-1, 1]`.
    pub values: Vec<f64>,
    /// Lag with the largest `|value|`, if any value is nonzero.
    pub argmax: Option<usize>,
    pub peak: f64,
}

/// FFT cross-correlator with cached template spectra.
#[derive(Debug, Clone)]
pub struct Correlator {
    template: Vec<f64>,
    template_energy: f64,
    spectra: HashMap<usize, Vec<Complex64>>,
}

impl Correlator {
    pub fn new(template: &[f64]) -> Self {
        Correlator {
            template: template.to_vec(),
            template_energy: dsp::energy(template),
            spectra: HashMap::new(),
        }
    }

    pub fn template_len(&self) -> usize {
        self.template.len()
    }

    fn spectrum(&mut self, nfft: usize) -> &[Complex64] {
        let template = &self.template;
        self.spectra.entry(nfft).or_insert_with(|| {
            let mut buf = dsp::real_to_complex(template, nfft);
            dsp::fft(&mut buf);
            buf.iter_mut().for_each(|v| *v = v.conj());
            buf
        })
    }

    /// Normalized correlation at every lag where the template fits inside `segment`.
    pub fn correlate(&mut self, segment: &[f64]) -> Result<CrossCorrelation> {
        let tlen = self.template.len();
        if segment.len() < tlen {
            return Err(Error::param(
                "stream_segment",
                format!("{} samples is shorter than the {tlen}-sample template", segment.len()),
            ));
        }
        let lags = segment.len() - tlen + 1;
        let nfft = (segment.len() + tlen).next_power_of_two();
        let mut buf = dsp::real_to_complex(segment, nfft);
        dsp::fft(&mut buf);
        let tpl = self.spectrum(nfft);
        for (b, t) in buf.iter_mut().zip(tpl) {
            *b *= t;
        }
        dsp::ifft(&mut buf);

        // Sliding window energy via prefix sums.
        let mut prefix = Vec::with_capacity(segment.len() + 1);
        prefix.push(0.0f64);
        let mut acc = 0.0;
        for v in segment {
            acc += v * v;
            prefix.push(acc);
        }
        let max_window = (0..lags)
            .map(|l| prefix[l + tlen] - prefix[l])
            .fold(0.0f64, f64::max);
        let floor = max_window * 1e-9;

        let mut values = Vec::with_capacity(lags);
        let mut best: Option<(usize, f64)> = None;
        for (lag, b) in buf.iter().take(lags).enumerate() {
            let e = prefix[lag + tlen] - prefix[lag];
            let v = if e > floor && e > 0.0 {
                (b.re / (e * self.template_energy).sqrt()).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            if v != 0.0 && best.is_none_or(|(_, p)| v.abs() > p) {
                best = Some((lag, v.abs()));
            }
            values.push(v);
        }
        Ok(CrossCorrelation {
            values,
            argmax: best.map(|b| b.0),
            peak: best.map_or(0.0, |b| b.1),
        })
    }
}

pub fn cross_correlate(segment: &[f64], template: &Preamble) -> Result<CrossCorrelation> {
    Correlator::new(&template.samples).correlate(segment)
}

/// Mean pairwise normalized correlation of the eight PN-corrected symbol bodies.
///
/// `candidate` starts at the first cyclic prefix. Inputs too short to hold all
/// eight symbols score 0.
pub fn auto_correlate_score(candidate: &[f64], preamble: &Preamble) -> f64 {
    let spec = &preamble.spec;
    if candidate.len() < spec.preamble_len() {
        return 0.0;
    }
    let bodies: Vec<&[f64]> = (0..SYMBOL_COUNT)
        .map(|i| {
            let s = i * spec.symbol_len() + spec.cp_len;
            &candidate[s..s + spec.fft_size]
        })
        .collect();
    let norms: Vec<f64> = bodies.iter().map(|b| dsp::energy(b).sqrt()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..SYMBOL_COUNT {
        for j in (i + 1)..SYMBOL_COUNT {
            pairs += 1;
            let denom = norms[i] * norms[j];
            if denom == 0.0 {
                continue;
            }
            let dot: f64 = bodies[i].iter().zip(bodies[j]).map(|(a, b)| a * b).sum();
            let sign = f64::from(spec.pn_signs[i] * spec.pn_signs[j]);
            total += sign * dot / denom;
        }
    }
    (total / pairs as f64).clamp(-1.0, 1.0)
}

/// Slice the eight symbol bodies (CP stripped) out of a window starting at a symbol boundary.
pub fn symbol_bodies<'a>(window: &'a [f64], preamble: &Preamble) -> Result<Vec<&'a [f64]>> {
    let spec = &preamble.spec;
    if window.len() < spec.preamble_len() {
        return Err(Error::param("received_symbols", "window shorter than preamble"));
    }
    Ok((0..SYMBOL_COUNT)
        .map(|i| {
            let s = i * spec.symbol_len() + spec.cp_len;
            &window[s..s + spec.fft_size]
        })
        .collect())
}

/// Kaiser shape parameter of the band taper.
pub const TAPER_BETA: f64 = 3.0;

/// Kaiser weights across the active bins, endpoints excluded so no bin is zeroed.
///
/// A flat band gives a sinc response whose first sidelobe (about 0.22 of the
/// peak) clears the 0.2 direct-path margin by itself. The taper holds every
/// sidelobe of a lone tap near 0.09 for a main lobe about 20% wider.
pub fn band_taper(bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|k| {
            let x = 2.0 * (k + 1) as f64 / (bins + 1) as f64 - 1.0;
            dsp::bessel_i0(TAPER_BETA * (1.0 - x * x).sqrt()) / dsp::bessel_i0(TAPER_BETA)
        })
        .collect()
}

/// LS channel estimator with a cached reference spectrum.
#[derive(Debug, Clone)]
pub struct ChannelEstimator {
    preamble: Preamble,
    inv_reference: Vec<Complex64>,
}

impl ChannelEstimator {
    pub fn new(preamble: &Preamble) -> Self {
        let reference = preamble.symbol_spectrum();
        let taper = band_taper(reference.len());
        let inv_reference = reference.iter().zip(&taper).map(|(x, w)| w / x).collect();
        ChannelEstimator {
            preamble: preamble.clone(),
            inv_reference,
        }
    }

    /// `H(k) = 1/8 * sum_i PN_i * Y_i(k) / X(k)` on active bins, inverse transformed.
    pub fn estimate(&self, symbols: &[&[f64]], mic_id: MicId) -> Result<ChannelEstimate> {
        let spec = &self.preamble.spec;
        if symbols.len() != SYMBOL_COUNT {
            return Err(Error::param(
                "received_symbols",
                format!("expected {SYMBOL_COUNT} segments, got {}", symbols.len()),
            ));
        }
        let n = spec.fft_size;
        if let Some(bad) = symbols.iter().find(|s| s.len() != n) {
            return Err(Error::param(
                "received_symbols",
                format!("segment of {} samples, expected {n}", bad.len()),
            ));
        }
        let bins = self.preamble.active_bins.clone();
        let mut acc = vec![Complex64::new(0.0, 0.0); bins.len()];
        for (seg, &pn) in symbols.iter().zip(&spec.pn_signs) {
            let mut buf = dsp::real_to_complex(seg, n);
            dsp::fft(&mut buf);
            let s = f64::from(pn);
            for (a, (y, inv_x)) in acc.iter_mut().zip(buf[bins.clone()].iter().zip(&self.inv_reference)) {
                *a += y * inv_x * s;
            }
        }
        let mut full = vec![Complex64::new(0.0, 0.0); n];
        for (k, a) in bins.zip(&acc) {
            full[k] = a / SYMBOL_COUNT as f64;
        }
        dsp::ifft(&mut full);

        let mut taps: Vec<f64> = full.iter().take(CHANNEL_LEN).map(|c| c.norm()).collect();
        taps.resize(CHANNEL_LEN, 0.0);
        let raw_peak = taps.iter().fold(0.0f64, |m, &v| m.max(v));
        let empty = raw_peak == 0.0;
        if !empty {
            taps.iter_mut().for_each(|v| *v /= raw_peak);
        }
        let noise_floor = crate::dualmic::noise_floor(&taps)?;
        Ok(ChannelEstimate {
            taps,
            noise_floor,
            mic_id,
            raw_peak,
            empty,
        })
    }
}

pub fn estimate_channel(
    symbols: &[&[f64]],
    preamble: &Preamble,
    mic_id: MicId,
) -> Result<ChannelEstimate> {
    ChannelEstimator::new(preamble).estimate(symbols, mic_id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// New samples per processing call (500 ms at 44.1 kHz).
    pub buffer_len: usize,
    pub threshold: f64,
    /// Samples before the coarse index kept for channel estimation.
    pub lookback: usize,
    /// Samples after the preamble that must be buffered before a detection is
    /// emitted, e.g. an ID tone.
    pub tail: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            buffer_len: 22_050,
            threshold: AUTOCORR_THRESHOLD,
            lookback: 160,
            tail: 0,
        }
    }
}

/// Streaming detector over one microphone stream.
///
/// Keeps enough history that a preamble straddling a buffer boundary is
/// searched in full on the following call.
#[derive(Debug, Clone)]
pub struct PreambleDetector {
    preamble: Preamble,
    correlator: Correlator,
    config: DetectorConfig,
    history: Vec<f64>,
    history_start: i64,
    last_detection: Option<i64>,
}

impl PreambleDetector {
    pub fn new(preamble: &Preamble, config: DetectorConfig) -> Self {
        PreambleDetector {
            correlator: Correlator::new(&preamble.samples),
            preamble: preamble.clone(),
            config,
            history: Vec::new(),
            history_start: 0,
            last_detection: None,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Samples carried over between calls.
    pub fn retention(&self) -> usize {
        self.preamble.total_len + self.config.lookback + self.config.tail
    }

    /// Absolute index of `history()[0]`.
    pub fn history_start(&self) -> i64 {
        self.history_start
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Feed the next contiguous buffer; returns at most one detection.
    pub fn push(&mut self, buffer: &[f64]) -> Option<DetectionResult> {
        self.append(buffer);
        let det = self.search();
        self.trim();
        det
    }

    pub fn append(&mut self, buffer: &[f64]) {
        self.history.extend_from_slice(buffer);
    }

    /// Drop history older than [`retention`](Self::retention).
    pub fn trim(&mut self) {
        let keep = self.retention();
        if self.history.len() > keep {
            let drop = self.history.len() - keep;
            self.history.drain(..drop);
            self.history_start += drop as i64;
        }
    }

    /// Search the current history for the strongest not-yet-reported preamble.
    pub fn search(&mut self) -> Option<DetectionResult> {
        let tlen = self.preamble.total_len;
        let lo = self.config.lookback;
        let need = lo + tlen + self.config.tail;
        if self.history.len() < need {
            return None;
        }
        let hi = self.history.len() - tlen - self.config.tail; // inclusive
        let segment = &self.history[lo..hi + tlen];
        let xc = self.correlator.correlate(segment).ok()?;
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in xc.values.iter().enumerate() {
            let abs = self.history_start + (lo + i) as i64;
            if let Some(prev) = self.last_detection {
                if (abs - prev).unsigned_abs() < tlen as u64 {
                    continue;
                }
            }
            if *v != 0.0 && best.is_none_or(|(_, p)| v.abs() > p) {
                best = Some((i, v.abs()));
            }
        }
        let (i, peak) = best?;
        let lag = lo + i;
        let score = auto_correlate_score(&self.history[lag..lag + tlen], &self.preamble);
        if score < self.config.threshold {
            return None;
        }
        let coarse_index = self.history_start + lag as i64;
        self.last_detection = Some(coarse_index);
        Some(DetectionResult {
            coarse_index,
            xcorr_peak: peak,
            autocorr_score: score,
        })
    }
}

/// One accepted preamble with both microphones' channel estimates.
#[derive(Debug, Clone)]
pub struct Reception {
    pub detection: DetectionResult,
    /// Absolute index that channel tap 0 refers to.
    pub window_start: i64,
    pub estimates: [ChannelEstimate; 2],
    /// Samples following the preamble (ID tone slot), bottom microphone.
    pub tail: Vec<f64>,
}

/// Detection on the bottom microphone, channel estimation on both with a
/// shared time reference.
#[derive(Debug, Clone)]
pub struct DualStreamReceiver {
    detector: PreambleDetector,
    estimator: ChannelEstimator,
    top_history: Vec<f64>,
    top_start: i64,
}

impl DualStreamReceiver {
    pub fn new(preamble: &Preamble, config: DetectorConfig) -> Self {
        DualStreamReceiver {
            detector: PreambleDetector::new(preamble, config),
            estimator: ChannelEstimator::new(preamble),
            top_history: Vec::new(),
            top_start: 0,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        self.detector.config()
    }

    pub fn push(&mut self, bottom: &[f64], top: &[f64]) -> Result<Option<Reception>> {
        debug_assert_eq!(bottom.len(), top.len());
        self.detector.append(bottom);
        self.top_history.extend_from_slice(top);
        let result = match self.detector.search() {
            Some(d) => Some(self.receive(d)?),
            None => None,
        };
        self.detector.trim();
        let keep = self.detector.retention();
        if self.top_history.len() > keep {
            let drop = self.top_history.len() - keep;
            self.top_history.drain(..drop);
            self.top_start += drop as i64;
        }
        Ok(result)
    }

    fn receive(&self, d: DetectionResult) -> Result<Reception> {
        let preamble = &self.estimator.preamble;
        let tlen = preamble.total_len;
        let bottom = self.detector.history();
        let window_start = d.coarse_index - self.config().lookback as i64;
        let b_off = (window_start - self.detector.history_start()) as usize;
        let t_off = (window_start - self.top_start) as usize;
        let est_b = self
            .estimator
            .estimate(&symbol_bodies(&bottom[b_off..b_off + tlen], preamble)?, MicId::Bottom)?;
        let est_t = self.estimator.estimate(
            &symbol_bodies(&self.top_history[t_off..t_off + tlen], preamble)?,
            MicId::Top,
        )?;
        let tail_off = (d.coarse_index - self.detector.history_start()) as usize + tlen;
        let tail_end = (tail_off + self.config().tail).min(bottom.len());
        Ok(Reception {
            detection: d,
            window_start,
            estimates: [est_b, est_t],
            tail: bottom[tail_off.min(tail_end)..tail_end].to_vec(),
        })
    }
}

/// Append records as one JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(out: &mut W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}
