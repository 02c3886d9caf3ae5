//! Band-limited fractional delay and resampling.
//!
//! Kaiser-windowed sinc with its cutoff at Nyquist, so an integer shift
//! reproduces the input exactly.

use std::sync::OnceLock;

use num_complex::Complex64;

use crate::dsp;

/// One-sided kernel support in samples.
pub const HALF_WIDTH: usize = 16;
const KAISER_BETA: f64 = 8.0;
const PHASES: usize = 2048;

/// Windowed sinc evaluated at offset `x` samples.
pub fn kernel(x: f64) -> f64 {
    let h = HALF_WIDTH as f64;
    if x.abs() >= h {
        return 0.0;
    }
    if x == 0.0 {
        return 1.0;
    }
    let px = std::f64::consts::PI * x;
    let r = x / h;
    px.sin() / px * dsp::bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / dsp::bessel_i0(KAISER_BETA)
}

/// `table[p][j] = kernel(p / PHASES + HALF_WIDTH - 1 - j)` for `j` in `0..2*HALF_WIDTH`.
fn table() -> &'static [Vec<f64>] {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=PHASES)
            .map(|p| {
                let frac = p as f64 / PHASES as f64;
                (0..2 * HALF_WIDTH)
                    .map(|j| kernel(frac + (HALF_WIDTH as f64 - 1.0) - j as f64))
                    .collect()
            })
            .collect()
    })
}

/// Band-limited value of `x` at fractional index `u` (zero outside `x`).
pub fn sample_at(x: &[f64], u: f64) -> f64 {
    let base = u.floor();
    let frac = u - base;
    let i0 = base as i64 - (HALF_WIDTH as i64 - 1);
    let pos = frac * PHASES as f64;
    let p = (pos.floor() as usize).min(PHASES - 1);
    let w = pos - p as f64;
    let (lo, hi) = (&table()[p], &table()[p + 1]);
    let mut acc = 0.0;
    for j in 0..2 * HALF_WIDTH {
        let idx = i0 + j as i64;
        if idx < 0 || idx as usize >= x.len() {
            continue;
        }
        let k = if w == 0.0 { lo[j] } else { lo[j] + w * (hi[j] - lo[j]) };
        acc += x[idx as usize] * k;
    }
    acc
}

/// FIR whose output `y[k]` is `sum_i g_i * x[k - d_i]` for fractional delays
/// `d_i >= HALF_WIDTH` (smaller delays lose the kernel's leading side).
/// Length covers the largest delay plus the kernel.
pub fn fractional_delay_fir(taps: &[(f64, f64)]) -> Vec<f64> {
    let max_d = taps.iter().fold(0.0f64, |m, t| m.max(t.0));
    let len = max_d.ceil() as usize + HALF_WIDTH + 1;
    let mut h = vec![0.0; len];
    for &(d, g) in taps {
        let lo = (d - HALF_WIDTH as f64).ceil().max(0.0) as usize;
        let hi = ((d + HALF_WIDTH as f64).floor() as usize).min(len - 1);
        for (k, v) in h.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *v += g * kernel(k as f64 - d);
        }
    }
    h
}

/// Full linear convolution.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if h.len() <= 32 || x.len() <= 32 {
        let mut y = vec![0.0; out_len];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        return y;
    }
    let n = out_len.next_power_of_two();
    let mut a = dsp::real_to_complex(x, n);
    let mut b = dsp::real_to_complex(h, n);
    dsp::fft(&mut a);
    dsp::fft(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    dsp::ifft(&mut a);
    a.iter().take(out_len).map(|c: &Complex64| c.re).collect()
}
