//! Fixtures shared by the benchmarks.

use aquarange_core::hydrosim::{ClockSpec, SimScenario};

/// A short single-distance session: `exchanges` queries at `distance_m` on skewed clocks.
pub fn session(distance_m: f64, exchanges: usize) -> SimScenario {
    let mut sc = SimScenario::new("bench", vec![distance_m]);
    sc.exchanges = exchanges;
    sc.clocks = ClockSpec::Random { max_ppm: 40.0 };
    sc
}
