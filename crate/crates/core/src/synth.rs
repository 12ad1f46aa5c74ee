//! Synthetic gathers built from Ricker-wavelet events, and the two additive
//! noise models (white Gaussian and band-limited Gaussian).

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Gather, Real, RngStream};

/// Width in frequency bins of the raised-cosine ramps at each band edge.
pub const BAND_TAPER_BINS: f64 = 4.0;

/// Default amplitude threshold, relative to the spectral peak, for
/// [`estimate_band`].
pub const DEFAULT_BAND_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// `t(j) = intercept + moveout * j`; moveout in samples per trace.
    Linear,
    /// `t(j) = sqrt(intercept^2 + (j / moveout)^2)`; moveout is the
    /// velocity in traces per sample.
    Hyperbolic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub kind: EventKind,
    /// Arrival time at trace 0, in samples.
    pub intercept: f64,
    pub moveout: f64,
    pub amplitude: f64,
    /// Ricker peak frequency in cycles per sample, inside (0, 0.5).
    pub peak_freq: f64,
}

impl EventSpec {
    pub fn linear(intercept: f64, slope: f64, amplitude: f64, peak_freq: f64) -> Self {
        EventSpec {
            kind: EventKind::Linear,
            intercept,
            moveout: slope,
            amplitude,
            peak_freq,
        }
    }

    pub fn hyperbolic(intercept: f64, velocity: f64, amplitude: f64, peak_freq: f64) -> Self {
        EventSpec {
            kind: EventKind::Hyperbolic,
            intercept,
            moveout: velocity,
            amplitude,
            peak_freq,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.amplitude.is_finite() || !self.intercept.is_finite() || !self.moveout.is_finite() {
            return Err(Error::BadSpec("event parameters must be finite".into()));
        }
        if !(self.peak_freq > 0.0 && self.peak_freq < 0.5) {
            return Err(Error::BadSpec(format!(
                "peak frequency {} must lie strictly inside (0, 0.5)",
                self.peak_freq
            )));
        }
        if self.kind == EventKind::Hyperbolic && self.moveout <= 0.0 {
            return Err(Error::BadSpec("hyperbolic velocity must be positive".into()));
        }
        Ok(())
    }

    /// Arrival time (samples) at trace `j`.
    pub fn arrival(&self, j: usize) -> f64 {
        let j = j as f64;
        match self.kind {
            EventKind::Linear => self.intercept + self.moveout * j,
            EventKind::Hyperbolic => (self.intercept.powi(2) + (j / self.moveout).powi(2)).sqrt(),
        }
    }
}

/// Ricker wavelet with peak frequency `f` (cycles/sample) at lag `t` samples.
pub fn ricker(t: f64, f: f64) -> f64 {
    let a = (PI * f * t).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

/// Sums the events into an `h x w` gather and scales it to unit max-abs
/// amplitude (an empty event list gives zeros).
pub fn make_synthetic<F: Real>(h: usize, w: usize, events: &[EventSpec]) -> Result<Gather<F>> {
    if h < 16 || w < 16 {
        return Err(Error::BadSpec(format!("synthetic gathers need h, w >= 16 (got {h}x{w})")));
    }
    let mut data = Array2::<f64>::zeros((h, w));
    for ev in events {
        ev.validate()?;
        let inside = (0..w).any(|j| {
            let t = ev.arrival(j);
            t >= 0.0 && t <= (h - 1) as f64
        });
        if !inside {
            return Err(Error::BadSpec(format!("event {ev:?} never crosses the grid")));
        }
        for j in 0..w {
            let t0 = ev.arrival(j);
            for i in 0..h {
                data[[i, j]] += ev.amplitude * ricker(i as f64 - t0, ev.peak_freq);
            }
        }
    }
    let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        data /= peak;
    }
    Gather::new(data.mapv(F::lit))
}

/// Draws a plausible event set: `linear` dipping events and `hyperbolic`
/// reflections, all crossing an `h x w` grid.
pub fn random_events(linear: usize, hyperbolic: usize, h: usize, w: usize, stream: RngStream) -> Vec<EventSpec> {
    let mut rng = stream.rng();
    let (hf, wf) = (h as f64, w as f64);
    let mut events = Vec::with_capacity(linear + hyperbolic);
    for _ in 0..linear {
        let intercept = rng.random_range(0.15 * hf..0.85 * hf);
        // Keep the far end inside the grid.
        let lo = ((0.05 * hf - intercept) / wf).max(-0.6);
        let hi = ((0.95 * hf - intercept) / wf).min(0.6);
        let slope = rng.random_range(lo..hi);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        events.push(EventSpec::linear(
            intercept,
            slope,
            sign * rng.random_range(0.5..1.0),
            rng.random_range(0.06..0.12),
        ));
    }
    for _ in 0..hyperbolic {
        let intercept = rng.random_range(0.15 * hf..0.5 * hf);
        let far = intercept + rng.random_range(0.1..0.35) * hf;
        let velocity = wf / (far * far - intercept * intercept).sqrt();
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        events.push(EventSpec::hyperbolic(
            intercept,
            velocity,
            sign * rng.random_range(0.5..1.0),
            rng.random_range(0.06..0.12),
        ));
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Bandpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    /// `(low, high)` in cycles per sample; required for bandpass noise.
    pub band: Option<(f64, f64)>,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma,
            band: None,
        }
    }

    pub fn bandpass(sigma: f64, low: f64, high: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Bandpass,
            sigma,
            band: Some((low, high)),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::BadSpec(format!("noise sigma {} must be > 0", self.sigma)));
        }
        if let Some((lo, hi)) = self.band {
            if !(0.0 < lo && lo < hi && hi < 0.5) {
                return Err(Error::BadSpec(format!("band ({lo}, {hi}) must satisfy 0 < low < high < 0.5")));
            }
        }
        if self.kind == NoiseKind::Bandpass && self.band.is_none() {
            return Err(Error::BadSpec("bandpass noise needs a band".into()));
        }
        Ok(())
    }
}

/// Gain of the band filter at signed frequency `f` (cycles/sample): a boxcar
/// on `[low, high]` whose inner `BAND_TAPER_BINS` bins at each edge follow a
/// raised cosine. Zero outside the band.
pub fn band_gain(f: f64, low: f64, high: f64, n: usize) -> f64 {
    let f = f.abs();
    if f < low || f > high {
        return 0.0;
    }
    let bins = (f - low).min(high - f) * n as f64;
    if bins >= BAND_TAPER_BINS {
        1.0
    } else {
        0.5 * (1.0 - (PI * bins / BAND_TAPER_BINS).cos())
    }
}

/// Signed frequency of DFT bin `k` of an `n`-point transform.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64 / n as f64
    } else {
        k as f64 / n as f64 - 1.0
    }
}

/// `Y = X + N`. Gaussian noise is i.i.d. `N(0, sigma^2)`. Bandpass noise is
/// Gaussian noise filtered trace by trace along time and rescaled to an
/// empirical standard deviation of exactly `sigma`.
pub fn add_noise<F: Real>(x: &Gather<F>, spec: &NoiseSpec, stream: RngStream) -> Result<Gather<F>> {
    spec.validate()?;
    let noise = make_noise(x.height(), x.width(), spec, stream)?;
    let data = &x.data() + &noise.mapv(F::lit);
    Ok(Gather::new(data)?.with_sampling(x.dt, x.dx))
}

/// The noise realization alone (f64), as used by [`add_noise`].
pub fn make_noise(h: usize, w: usize, spec: &NoiseSpec, stream: RngStream) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut rng = stream.rng();
    let mut noise = Array2::<f64>::zeros((h, w));
    for v in noise.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    match spec.kind {
        NoiseKind::Gaussian => {
            noise *= spec.sigma;
        }
        NoiseKind::Bandpass => {
            let (low, high) = spec.band.expect("validated");
            let mut planner = FftPlanner::<f64>::new();
            let fwd = planner.plan_fft_forward(h);
            let inv = planner.plan_fft_inverse(h);
            let gains: Vec<f64> = (0..h).map(|k| band_gain(bin_frequency(k, h), low, high, h)).collect();
            if gains.iter().all(|&g| g == 0.0) {
                return Err(Error::BadSpec(format!("band ({low}, {high}) holds no frequency bin at length {h}")));
            }
            let mut buf = vec![Complex::new(0.0, 0.0); h];
            for mut col in noise.columns_mut() {
                for (b, &v) in buf.iter_mut().zip(col.iter()) {
                    *b = Complex::new(v, 0.0);
                }
                fwd.process(&mut buf);
                for (b, g) in buf.iter_mut().zip(&gains) {
                    *b *= g;
                }
                inv.process(&mut buf);
                for (c, b) in col.iter_mut().zip(&buf) {
                    *c = b.re / h as f64;
                }
            }
            let n = noise.len() as f64;
            let mean = noise.sum() / n;
            let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            noise *= spec.sigma / std;
        }
    }
    Ok(noise)
}

/// Trace-averaged amplitude spectrum along time, bins `0..=h/2`.
pub fn mean_amplitude_spectrum<F: Real>(x: &Gather<F>) -> Vec<f64> {
    let h = x.height();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(h);
    let mut acc = vec![0.0; h / 2 + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for col in x.data().columns() {
        for (b, v) in buf.iter_mut().zip(col.iter()) {
            *b = Complex::new(v.as_f64(), 0.0);
        }
        fwd.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm();
        }
    }
    let w = x.width() as f64;
    acc.iter_mut().for_each(|a| *a /= w);
    acc
}

/// Smallest frequency interval (cycles/sample) of the trace-averaged
/// amplitude spectrum outside which every amplitude is below
/// `threshold_fraction` times the peak.
pub fn estimate_band<F: Real>(x: &Gather<F>, threshold_fraction: f64) -> Result<(f64, f64)> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::BadSpec(format!("threshold fraction {threshold_fraction} must lie in (0, 1)")));
    }
    let spec = mean_amplitude_spectrum(x);
    let peak = spec.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let level = threshold_fraction * peak;
    let first = spec.iter().position(|&a| a >= level).expect("peak qualifies");
    let last = spec.iter().rposition(|&a| a >= level).expect("peak qualifies");
    let h = x.height() as f64;
    Ok((first as f64 / h, last as f64 / h))
}
