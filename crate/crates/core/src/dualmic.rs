//! Direct-path identification from the two microphones' channel profiles.
//!
//! The direct path is taken as the earliest pair of peaks, one per microphone,
//! that both clear their channel's noise floor by `lambda` and whose tap
//! offset is physically possible given the microphone spacing. The delay
//! estimate is the midpoint of the pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::receiver::{ChannelEstimate, NOISE_TAPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualMicParams {
    pub lambda: f64,
    pub mic_separation_m: f64,
    pub sound_speed_mps: f64,
    pub sample_rate_hz: u32,
    /// Overrides the geometric window when set.
    pub window_override: Option<usize>,
}

impl Default for DualMicParams {
    fn default() -> Self {
        DualMicParams {
            lambda: 0.2,
            mic_separation_m: 0.15,
            sound_speed_mps: 1500.0,
            sample_rate_hz: 44_100,
            window_override: None,
        }
    }
}

impl DualMicParams {
    /// `ceil(d * fs / c)`, at least 1.
    pub fn max_tap_window(&self) -> usize {
        if let Some(w) = self.window_override {
            return w.max(1);
        }
        let w = (self.mic_separation_m * self.sample_rate_hz as f64 / self.sound_speed_mps).ceil();
        (w as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::param("lambda", "must be positive"));
        }
        if !(self.mic_separation_m > 0.0) {
            return Err(Error::param("mic_separation_m", "must be positive"));
        }
        if !(self.sound_speed_mps > 0.0) {
            return Err(Error::param("sound_speed_mps", "must be positive"));
        }
        Ok(())
    }
}

/// Mean squared magnitude of the last 100 taps.
pub fn noise_floor(h: &[f64]) -> Result<f64> {
    if h.len() < NOISE_TAPS {
        return Err(Error::param(
            "taps",
            format!("need at least {NOISE_TAPS} taps, got {}", h.len()),
        ));
    }
    let tail = &h[h.len() - NOISE_TAPS..];
    Ok(tail.iter().map(|v| v * v).sum::<f64>() / NOISE_TAPS as f64)
}

/// Strictly above the left neighbor and not below the right one. The first
/// and last taps are never peaks.
pub fn is_peak(h: &[f64], n: usize) -> bool {
    if n == 0 || n + 1 >= h.len() {
        return false;
    }
    h[n] > h[n - 1] && h[n] >= h[n + 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectPath {
    /// Tap in the first (bottom) channel.
    pub n: usize,
    /// Tap in the second (top) channel.
    pub m: usize,
    /// `(n + m) / 2`.
    pub tau: f64,
}

/// Early-exit scan over raw tap vectors.
///
/// Scanning `n` upward and, for each, `m` upward over `n - window ..= n + window`
/// returns the minimizer of `n + m`: any qualifying pair with a larger `n` has
/// an `m` that is inside the earlier scan range or beyond it.
pub fn find_direct_path_taps(
    h1: &[f64],
    w1: f64,
    h2: &[f64],
    w2: f64,
    lambda: f64,
    window: usize,
) -> Option<DirectPath> {
    let len = h1.len().min(h2.len());
    let thr1 = w1 + lambda;
    let thr2 = w2 + lambda;
    for n in 0..len {
        if !(h1[n] > thr1) || !is_peak(h1, n) {
            continue;
        }
        let lo = n.saturating_sub(window);
        let hi = (n + window).min(len - 1);
        for m in lo..=hi {
            if h2[m] > thr2 && is_peak(h2, m) {
                return Some(DirectPath {
                    n,
                    m,
                    tau: (n + m) as f64 / 2.0,
                });
            }
        }
    }
    None
}

pub fn find_direct_path(
    h1: &ChannelEstimate,
    h2: &ChannelEstimate,
    p: &DualMicParams,
) -> Option<DirectPath> {
    if h1.empty || h2.empty {
        return None;
    }
    find_direct_path_taps(
        &h1.taps,
        h1.noise_floor,
        &h2.taps,
        h2.noise_floor,
        p.lambda,
        p.max_tap_window(),
    )
}

/// Earliest qualifying peak in a single channel; the baseline the dual-mic
/// search is compared against.
pub fn find_first_peak(h: &ChannelEstimate, lambda: f64) -> Option<usize> {
    if h.empty {
        return None;
    }
    let thr = h.noise_floor + lambda;
    (0..h.taps.len()).find(|&n| h.taps[n] > thr && is_peak(&h.taps, n))
}

/// Parabolic interpolation of a peak's position from its two neighbors.
pub fn subsample_peak(h: &[f64], n: usize) -> f64 {
    if n == 0 || n + 1 >= h.len() {
        return n as f64;
    }
    let (a, b, c) = (h[n - 1], h[n], h[n + 1]);
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return n as f64;
    }
    n as f64 + (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Direct-path delay with each peak refined to sub-tap precision.
pub fn refined_tau(h1: &[f64], h2: &[f64], path: &DirectPath) -> f64 {
    (subsample_peak(h1, path.n) + subsample_peak(h2, path.m)) / 2.0
}

/// Fine arrival index: the window origin (tap 0) plus the direct-path delay.
pub fn refine_arrival(coarse_index: f64, tau_los: f64) -> f64 {
    coarse_index + tau_los
}

/// Which taps the direct-path search uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMethod {
    #[default]
    Dual,
    BottomOnly,
    TopOnly,
}

/// Direct-path delay in taps for `method`, or `None` when nothing qualifies.
pub fn locate(estimates: &[ChannelEstimate; 2], p: &DualMicParams, method: PathMethod) -> Option<f64> {
    match method {
        PathMethod::Dual => find_direct_path(&estimates[0], &estimates[1], p)
            .map(|d| refined_tau(&estimates[0].taps, &estimates[1].taps, &d)),
        PathMethod::BottomOnly => find_first_peak(&estimates[0], p.lambda)
            .map(|n| subsample_peak(&estimates[0].taps, n)),
        PathMethod::TopOnly => find_first_peak(&estimates[1], p.lambda)
            .map(|n| subsample_peak(&estimates[1].taps, n)),
    }
}

/// One row of the candidate-pair debug table.
#[derive(Debug, Clone, Serialize)]
pub struct CandidatePair {
    pub n: usize,
    pub m: usize,
    pub h1: f64,
    pub h2: f64,
    pub tau: f64,
}

/// Every qualifying pair, for debug dumps.
pub fn candidate_pairs(h1: &ChannelEstimate, h2: &ChannelEstimate, p: &DualMicParams) -> Vec<CandidatePair> {
    let w = p.max_tap_window();
    let thr1 = h1.noise_floor + p.lambda;
    let thr2 = h2.noise_floor + p.lambda;
    let len = h1.taps.len().min(h2.taps.len());
    let mut out = Vec::new();
    for n in (0..len).filter(|&n| h1.taps[n] > thr1 && is_peak(&h1.taps, n)) {
        for m in n.saturating_sub(w)..=(n + w).min(len - 1) {
            if h2.taps[m] > thr2 && is_peak(&h2.taps, m) {
                out.push(CandidatePair {
                    n,
                    m,
                    h1: h1.taps[n],
                    h2: h2.taps[m],
                    tau: (n + m) as f64 / 2.0,
                });
            }
        }
    }
    out
}
