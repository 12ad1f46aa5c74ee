//! Dropout-ensemble inference: the denoised gather is the mean of many
//! forward passes, each on a freshly masked input with its own dropout
//! realization.

use ndarray::{Array2, Zip};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::{make_instance, sample_mask};
use crate::network::{forward, DenoiserParams, ForwardMode};
use crate::types::{Gather, MaskMode, Real, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult<F = f32> {
    pub mean: Gather<F>,
    /// Population standard deviation of the samples, per element.
    pub per_sample_std: Array2<F>,
    pub p: usize,
}

/// Ensemble of `config.infer.samples` passes using the training mask mode
/// and rate.
pub fn ensemble_denoise<F: Real>(
    params: &DenoiserParams<F>,
    y: &Gather<F>,
    config: &RunConfig,
    stream: RngStream,
) -> Result<EnsembleResult<F>> {
    ensemble(params, y, config.mask.mode, config.mask.rate, config.infer.samples, stream)
}

pub fn ensemble<F: Real>(
    params: &DenoiserParams<F>,
    y: &Gather<F>,
    mode: MaskMode,
    mask_rate: f64,
    p: usize,
    stream: RngStream,
) -> Result<EnsembleResult<F>> {
    let samples = ensemble_samples(params, y, mode, mask_rate, p, stream)?;
    let (mean, per_sample_std) = reduce(&samples)?;
    Ok(EnsembleResult {
        mean: Gather::from_trusted(mean).with_sampling(y.dt, y.dx),
        per_sample_std,
        p,
    })
}

/// The individual passes. Sample `i` draws its mask from `stream.fork(2i)`
/// and its dropout from `stream.fork(2i + 1)`, so results do not depend on
/// scheduling.
pub fn ensemble_samples<F: Real>(
    params: &DenoiserParams<F>,
    y: &Gather<F>,
    mode: MaskMode,
    mask_rate: f64,
    p: usize,
    stream: RngStream,
) -> Result<Vec<Array2<F>>> {
    if p == 0 {
        return Err(Error::InvalidConfig("ensemble size must be >= 1".into()));
    }
    let (h, w) = y.shape();
    (0..p as u64)
        .into_par_iter()
        .map(|i| {
            let mask = sample_mask(h, w, mode, mask_rate, stream.fork(2 * i))?;
            let inst = make_instance(y, &mask)?;
            forward(params, &inst, ForwardMode::EvalSample, stream.fork(2 * i + 1)).map(Gather::into_data)
        })
        .collect()
}

/// Element-wise mean and standard deviation. Each element's values are
/// sorted before a pairwise sum, so the result does not depend on sample
/// order.
pub fn reduce<F: Real>(samples: &[Array2<F>]) -> Result<(Array2<F>, Array2<F>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("ensemble size must be >= 1".into()))?;
    let dim = first.dim();
    if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
        return Err(Error::shape(dim, bad.dim()));
    }
    let n = F::lit(samples.len() as f64);
    let mut mean = Array2::<F>::zeros(dim);
    let mut std = Array2::<F>::zeros(dim);
    let mut buf = vec![F::zero(); samples.len()];
    Zip::indexed(&mut mean).and(&mut std).for_each(|idx, m, s| {
        for (b, smp) in buf.iter_mut().zip(samples) {
            *b = smp[idx];
        }
        buf.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let mu = pairwise_sum(&buf) / n;
        for b in buf.iter_mut() {
            *b = (*b - mu) * (*b - mu);
        }
        buf.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        *m = mu;
        *s = (pairwise_sum(&buf) / n).sqrt();
    });
    Ok((mean, std))
}

fn pairwise_sum<F: Real>(xs: &[F]) -> F {
    match xs.len() {
        0 => F::zero(),
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
