//! Fixtures shared by the benchmarks.

use s2swtv_core::synth::{add_noise, make_synthetic, EventSpec, NoiseSpec};
use s2swtv_core::{Gather, RngStream};

/// A noisy `h × w` gather with three linear and two hyperbolic events.
pub fn noisy_gather(h: usize, w: usize, seed: u64) -> Gather {
    let events = [
        EventSpec::linear(0.2 * h as f64, 0.3, 1.0, 0.08),
        EventSpec::linear(0.5 * h as f64, -0.2, -0.7, 0.06),
        EventSpec::linear(0.7 * h as f64, 0.1, 0.5, 0.1),
        EventSpec::hyperbolic(0.3 * h as f64, 0.8, 0.8, 0.07),
        EventSpec::hyperbolic(0.6 * h as f64, 0.6, -0.6, 0.05),
    ];
    let clean: Gather = make_synthetic(h, w, &events).expect("valid synthetic");
    add_noise(&clean, &NoiseSpec::gaussian(0.2), RngStream::new(seed, 0)).expect("valid noise")
}
