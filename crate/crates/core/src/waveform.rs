//! Transmit-side signal synthesis.
//!
//! The ranging preamble is eight repetitions of one real OFDM symbol whose
//! in-band bins carry a Zadoff-Chu sequence. Each repetition is multiplied by
//! a PN sign and preceded by a cyclic prefix. Device IDs are 100 ms tones
//! appended after the preamble.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::pcm;

/// Number of repeated OFDM symbols in a preamble.
pub const SYMBOL_COUNT: usize = 8;
/// Number of device-ID tones.
pub const ID_TONE_COUNT: usize = 16;

pub const DEFAULT_PN_SIGNS: [i8; SYMBOL_COUNT] = [-1, 1, 1, 1, 1, 1, -1, 1];

/// 1500, 1535, ..., 1990 Hz in 35 Hz steps, then 2060 Hz for the last ID.
pub fn default_id_tone_table() -> [f64; ID_TONE_COUNT] {
    std::array::from_fn(|i| if i + 1 == ID_TONE_COUNT { 2060.0 } else { 1500.0 + 35.0 * i as f64 })
}

/// All transmit-side parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub sample_rate_hz: u32,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub fft_size: usize,
    pub cp_len: usize,
    pub pn_signs: [i8; SYMBOL_COUNT],
    pub zc_root: u64,
    pub id_tone_table: [f64; ID_TONE_COUNT],
    pub id_tone_len: usize,
}

impl Default for WaveformSpec {
    fn default() -> Self {
        Self::short()
    }
}

impl WaveformSpec {
    /// 316 ms preamble: 8 x (1536 + 206) samples at 44.1 kHz.
    pub fn short() -> Self {
        WaveformSpec {
            sample_rate_hz: 44_100,
            band_low_hz: 1000.0,
            band_high_hz: 5000.0,
            fft_size: 1536,
            cp_len: 206,
            pn_signs: DEFAULT_PN_SIGNS,
            zc_root: 7,
            id_tone_table: default_id_tone_table(),
            id_tone_len: 4410,
        }
    }

    /// 479 ms preamble: 8 x (2340 + 300) samples at 44.1 kHz.
    pub fn long() -> Self {
        WaveformSpec {
            fft_size: 2340,
            cp_len: 300,
            ..Self::short()
        }
    }

    pub fn symbol_len(&self) -> usize {
        self.fft_size + self.cp_len
    }

    pub fn preamble_len(&self) -> usize {
        SYMBOL_COUNT * self.symbol_len()
    }

    pub fn bin_spacing_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.fft_size as f64
    }

    /// FFT bins whose center frequency lies inside the band (inclusive).
    pub fn active_bins(&self) -> Range<usize> {
        let df = self.bin_spacing_hz();
        let lo = (self.band_low_hz / df).ceil() as usize;
        let hi = (self.band_high_hz / df).floor() as usize + 1;
        lo..hi.max(lo)
    }

    /// Largest odd length not exceeding the active-bin count.
    pub fn zc_len(&self) -> usize {
        let n = self.active_bins().len();
        if n == 0 {
            0
        } else if n % 2 == 1 {
            n
        } else {
            n - 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.band_low_hz < self.band_high_hz && self.band_high_hz < nyquist) {
            return Err(Error::param(
                "band_high_hz",
                format!(
                    "need band_low < band_high < fs/2, got {} / {} / {}",
                    self.band_low_hz, self.band_high_hz, nyquist
                ),
            ));
        }
        if self.band_low_hz <= 0.0 {
            return Err(Error::param("band_low_hz", "must be positive"));
        }
        if self.fft_size == 0 {
            return Err(Error::param("fft_size", "must be positive"));
        }
        if self.cp_len >= self.fft_size {
            return Err(Error::param("cp_len", "must be shorter than fft_size"));
        }
        if self.pn_signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::param("pn_signs", "entries must be -1 or +1"));
        }
        if self.active_bins().is_empty() {
            return Err(Error::param("fft_size", "no active bins in band"));
        }
        let zc = self.zc_len() as u64;
        if dsp::gcd(self.zc_root, zc) != 1 {
            return Err(Error::param(
                "zc_root",
                format!("root {} is not coprime with ZC length {zc}", self.zc_root),
            ));
        }
        for pair in self.id_tone_table.windows(2) {
            if pair[1] - pair[0] < 35.0 - 1e-9 {
                return Err(Error::param(
                    "id_tone_table",
                    "tones must be increasing with spacing >= 35 Hz",
                ));
            }
        }
        if self.id_tone_table[ID_TONE_COUNT - 1] >= nyquist || self.id_tone_table[0] <= 0.0 {
            return Err(Error::param("id_tone_table", "tones must lie in (0, fs/2)"));
        }
        if self.id_tone_len == 0 {
            return Err(Error::param("id_tone_len", "must be positive"));
        }
        Ok(())
    }
}

/// Zadoff-Chu sequence `x(k) = exp(-j*pi*root*k*(k+1)/length)` for odd `length`.
pub fn make_zc_sequence(length: usize, root: u64) -> Result<Vec<Complex64>> {
    if length == 0 || length.is_multiple_of(2) {
        return Err(Error::param("length", format!("ZC length {length} must be odd")));
    }
    if dsp::gcd(root, length as u64) != 1 {
        return Err(Error::param(
            "root",
            format!("root {root} is not coprime with {length}"),
        ));
    }
    let n = length as u64;
    Ok((0..n)
        .map(|k| {
            // Reduce k(k+1)*root modulo 2n to keep the phase argument small.
            let e = (root % (2 * n)) * ((k * (k + 1)) % (2 * n)) % (2 * n);
            Complex64::from_polar(1.0, -PI * e as f64 / n as f64)
        })
        .collect())
}

/// A synthesized preamble and the pieces the receiver needs to match it.
#[derive(Debug, Clone, PartialEq)]
pub struct Preamble {
    pub samples: Vec<f64>,
    /// Offset of each symbol's cyclic prefix.
    pub symbol_starts: [usize; SYMBOL_COUNT],
    pub total_len: usize,
    /// Base OFDM symbol (without CP or PN sign), at the same scale as `samples`.
    pub symbol: Vec<f64>,
    /// Bins carrying ZC values; the rest of the band is zero-filled.
    pub active_bins: Range<usize>,
    pub spec: WaveformSpec,
}

impl Preamble {
    /// Forward transform of the base symbol restricted to the active bins.
    pub fn symbol_spectrum(&self) -> Vec<Complex64> {
        let mut buf = dsp::real_to_complex(&self.symbol, self.spec.fft_size);
        dsp::fft(&mut buf);
        buf[self.active_bins.clone()].to_vec()
    }

    /// Mean offset of the symbol bodies' centers. Under clock skew the
    /// received preamble is stretched, and a channel estimate averaged over
    /// the bodies dates the arrival of this sample, not of sample 0.
    pub fn body_center(&self) -> f64 {
        let half = self.spec.cp_len as f64 + self.spec.fft_size as f64 / 2.0;
        self.symbol_starts.iter().map(|&s| s as f64 + half).sum::<f64>() / SYMBOL_COUNT as f64
    }
}

pub fn build_preamble(spec: &WaveformSpec) -> Result<Preamble> {
    spec.validate()?;
    let n = spec.fft_size;
    let bins = spec.active_bins();
    let zc = make_zc_sequence(spec.zc_len(), spec.zc_root)?;

    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for (k, z) in bins.clone().zip(&zc) {
        spectrum[k] = *z;
        spectrum[n - k] = z.conj();
    }
    dsp::ifft(&mut spectrum);
    let mut symbol: Vec<f64> = spectrum.iter().map(|c| c.re).collect();

    let cp = spec.cp_len;
    let step = spec.symbol_len();
    let mut samples = Vec::with_capacity(spec.preamble_len());
    let mut symbol_starts = [0usize; SYMBOL_COUNT];
    for (i, &sign) in spec.pn_signs.iter().enumerate() {
        symbol_starts[i] = i * step;
        let s = f64::from(sign);
        samples.extend(symbol[n - cp..].iter().map(|v| v * s));
        samples.extend(symbol.iter().map(|v| v * s));
    }

    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in samples.iter_mut() {
        *v /= peak;
    }
    for v in symbol.iter_mut() {
        *v /= peak;
    }

    Ok(Preamble {
        total_len: samples.len(),
        samples,
        symbol_starts,
        symbol,
        active_bins: bins.start..bins.start + zc.len(),
        spec: spec.clone(),
    })
}

pub fn build_id_tone(user_id: usize, spec: &WaveformSpec) -> Result<Vec<f64>> {
    if user_id >= ID_TONE_COUNT {
        return Err(Error::param("user_id", format!("{user_id} is outside 0..16")));
    }
    Ok(tone(spec.id_tone_table[user_id], spec.id_tone_len, spec.sample_rate_hz))
}

pub(crate) fn tone(freq_hz: f64, len: usize, fs: u32) -> Vec<f64> {
    let w = 2.0 * PI * freq_hz / fs as f64;
    (0..len).map(|t| (w * t as f64).sin()).collect()
}

/// Calibration signal; the preamble itself so a single detector serves both.
pub fn build_calibration_signal(spec: &WaveformSpec) -> Result<Vec<f64>> {
    Ok(build_preamble(spec)?.samples)
}

/// Preamble followed immediately by the ID tone of `user_id`.
pub fn build_query(spec: &WaveformSpec, user_id: usize) -> Result<Vec<f64>> {
    let mut out = build_preamble(spec)?.samples;
    out.extend(build_id_tone(user_id, spec)?);
    Ok(out)
}

/// Sidecar metadata written next to an exported waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformMetadata {
    pub kind: String,
    pub sample_rate_hz: u32,
    pub channels: u16,
    pub sample_format: String,
    pub num_samples: usize,
    pub symbol_starts: Vec<usize>,
    pub spec: WaveformSpec,
}

/// Write `samples` as raw PCM16 at `path` plus `<path>.toml` metadata.
pub fn export_waveform(
    path: &Path,
    kind: &str,
    samples: &[f64],
    preamble: &Preamble,
) -> Result<WaveformMetadata> {
    pcm::write_pcm16(path, samples)?;
    let meta = WaveformMetadata {
        kind: kind.to_string(),
        sample_rate_hz: preamble.spec.sample_rate_hz,
        channels: 1,
        sample_format: "s16le".into(),
        num_samples: samples.len(),
        symbol_starts: preamble.symbol_starts.to_vec(),
        spec: preamble.spec.clone(),
    };
    let text = toml::to_string_pretty(&meta).map_err(|e| Error::param("metadata", e.to_string()))?;
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok(meta)
}

pub fn import_waveform(path: &Path) -> Result<(Vec<f64>, WaveformMetadata)> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: WaveformMetadata = toml::from_str(&text).map_err(|e| Error::Scenario {
        field: "metadata".into(),
        reason: e.to_string(),
    })?;
    Ok((pcm::read_pcm16(path)?, meta))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inner(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zc_length_three() {
        let x = make_zc_sequence(3, 1).unwrap();
        let expect = [
            Complex64::new(1.0, 0.0),
            Complex64::from_polar(1.0, -PI * 2.0 / 3.0),
            Complex64::new(1.0, 0.0),
        ];
        for (a, b) in x.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zc_ideal_periodic_autocorrelation() {
        let x = make_zc_sequence(353, 7).unwrap();
        for lag in 1..353 {
            let s: Complex64 = (0..353).map(|k| x[k] * x[(k + lag) % 353].conj()).sum();
            assert!(s.norm() < 1e-9, "lag {lag}: {}", s.norm());
        }
    }

    #[test]
    fn zc_root_changes_phase_not_magnitude() {
        let a = make_zc_sequence(353, 7).unwrap();
        let b = make_zc_sequence(353, 6).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| (p.norm() - q.norm()).abs() < 1e-12));
        assert!(a.iter().zip(&b).any(|(p, q)| (p - q).norm() > 1e-3));
    }

    #[test]
    fn zc_rejects_bad_parameters() {
        assert!(make_zc_sequence(354, 7).is_err());
        assert!(make_zc_sequence(9, 3).is_err());
    }

    #[test]
    fn preamble_lengths_match_published_durations() {
        let p = build_preamble(&WaveformSpec::short()).unwrap();
        assert_eq!(p.total_len, 13936);
        assert!((p.total_len as f64 / 44100.0 - 0.316).abs() < 5e-4);
        let p = build_preamble(&WaveformSpec::long()).unwrap();
        assert_eq!(p.total_len, 21120);
        assert!((p.total_len as f64 / 44100.0 - 0.479).abs() < 5e-4);
    }

    #[test]
    fn default_bins_and_zc_length() {
        let s = WaveformSpec::short();
        assert_eq!(s.active_bins(), 35..175);
        assert_eq!(s.zc_len(), 139);
        assert_eq!(WaveformSpec::long().zc_len(), 211);
    }

    #[test]
    fn cyclic_prefix_equals_symbol_tail() {
        let spec = WaveformSpec::short();
        let p = build_preamble(&spec).unwrap();
        for &start in &p.symbol_starts {
            let end = start + spec.symbol_len();
            assert_eq!(
                &p.samples[start..start + spec.cp_len],
                &p.samples[end - spec.cp_len..end]
            );
        }
    }

    #[test]
    fn pn_sign_flip_is_local() {
        let spec = WaveformSpec::short();
        let a = build_preamble(&spec).unwrap();
        let mut flipped = spec.clone();
        flipped.pn_signs[0] = -flipped.pn_signs[0];
        let b = build_preamble(&flipped).unwrap();
        let step = spec.symbol_len();
        for i in 0..a.total_len {
            if i < step {
                assert_eq!(a.samples[i], -b.samples[i]);
            } else {
                assert_eq!(a.samples[i], b.samples[i]);
            }
        }
    }

    #[test]
    fn preamble_peak_normalized_and_deterministic() {
        let spec = WaveformSpec::short();
        let a = build_preamble(&spec).unwrap();
        let b = build_preamble(&spec).unwrap();
        assert_eq!(a, b);
        let peak = a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn band_energy_fraction() {
        let spec = WaveformSpec::short();
        let p = build_preamble(&spec).unwrap();
        let n = p.total_len.next_power_of_two() * 2;
        let mut buf = dsp::real_to_complex(&p.samples, n);
        dsp::fft(&mut buf);
        let df = 44100.0 / n as f64;
        let (mut inband, mut total) = (0.0, 0.0);
        for (k, v) in buf.iter().enumerate().take(n / 2) {
            let f = k as f64 * df;
            let pw = v.norm_sqr();
            total += pw;
            if (1000.0..=5000.0).contains(&f) {
                inband += pw;
            }
        }
        assert!(inband / total >= 0.99, "in-band fraction {}", inband / total);
    }

    #[test]
    fn symbol_windows_have_no_out_of_band_energy() {
        let spec = WaveformSpec::short();
        let p = build_preamble(&spec).unwrap();
        for &start in &p.symbol_starts {
            let body = &p.samples[start + spec.cp_len..start + spec.symbol_len()];
            let mut buf = dsp::real_to_complex(body, spec.fft_size);
            dsp::fft(&mut buf);
            let (mut inb, mut oob) = (0.0, 0.0);
            for (k, v) in buf.iter().enumerate().take(spec.fft_size / 2) {
                if p.active_bins.contains(&k) {
                    inb += v.norm_sqr();
                } else {
                    oob += v.norm_sqr();
                }
            }
            assert!(10.0 * (oob / inb).log10() <= -40.0);
        }
    }

    #[test]
    fn id_tones_match_table() {
        let spec = WaveformSpec::short();
        assert_eq!(spec.id_tone_table[0], 1500.0);
        assert_eq!(spec.id_tone_table[1], 1535.0);
        assert_eq!(spec.id_tone_table[15], 2060.0);
        let t = build_id_tone(3, &spec).unwrap();
        assert_eq!(t.len(), 4410);
        let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-3);
        assert!(build_id_tone(16, &spec).is_err());
    }

    #[test]
    fn id_tones_are_orthogonal() {
        let spec = WaveformSpec::short();
        let tones: Vec<Vec<f64>> = (0..16).map(|i| build_id_tone(i, &spec).unwrap()).collect();
        for i in 0..16 {
            for j in (i + 1)..16 {
                let c = inner(&tones[i], &tones[j])
                    / (inner(&tones[i], &tones[i]) * inner(&tones[j], &tones[j])).sqrt();
                assert!(c.abs() <= 0.05, "tones {i},{j}: {c}");
            }
        }
    }

    #[test]
    fn calibration_signal_is_preamble() {
        let spec = WaveformSpec::short();
        assert_eq!(
            build_calibration_signal(&spec).unwrap(),
            build_preamble(&spec).unwrap().samples
        );
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut s = WaveformSpec::short();
        s.pn_signs[2] = 0;
        assert!(s.validate().is_err());
        let mut s = WaveformSpec::short();
        s.band_high_hz = 30_000.0;
        assert!(s.validate().is_err());
        let mut s = WaveformSpec::short();
        s.id_tone_table[5] = s.id_tone_table[4] + 20.0;
        assert!(s.validate().is_err());
        let mut s = WaveformSpec::short();
        s.zc_root = 139;
        assert!(s.validate().is_err());
        // 4-point FFT: 11 kHz bin spacing leaves no bin in band.
        let mut s = WaveformSpec::short();
        s.fft_size = 4;
        s.cp_len = 1;
        assert!(matches!(build_preamble(&s), Err(Error::Parameter { field: "fft_size", .. })));
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = WaveformSpec::short();
        let p = build_preamble(&spec).unwrap();
        let path = dir.path().join("preamble.raw");
        export_waveform(&path, "preamble", &p.samples, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 2 * p.total_len);
        let (back, meta) = import_waveform(&path).unwrap();
        assert_eq!(meta.spec, spec);
        assert_eq!(meta.symbol_starts, p.symbol_starts.to_vec());
        for (a, b) in back.iter().zip(&p.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }
}
