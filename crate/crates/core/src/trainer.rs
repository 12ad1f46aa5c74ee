//! The ADMM training loop for one gather and the warm-started loop over a
//! group of slices.
//!
//! Each iteration draws a fresh mask, runs one forward pass, and uses that
//! output for all four updates: `V`, one Adam step on θ, `Λ`, and (on
//! schedule) the weight matrix.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{ensemble, ensemble_denoise, EnsembleResult};
use crate::masking::{make_instance, sample_mask};
use crate::metrics::psnr;
use crate::network::{adam_step, forward_recorded, init_params, theta_loss_at, Adam, DenoiserParams};
use crate::types::{derive_stream, Gather, Purpose, Real};
use crate::wtv::{WeightSchedule, WtvState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// Masked data-fidelity term.
    pub fidelity: f64,
    /// Augmented-Lagrangian coupling `(μ/2)‖∇ₕf + Λ/μ − V‖²`.
    pub penalty: f64,
    /// Split regularizer `γ‖W ⊙ V‖₁` after the `V` update.
    pub l1: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsnrRecord {
    pub iteration: usize,
    pub psnr: f64,
}

/// State of a training run after some number of iterations.
#[derive(Debug, Clone)]
pub struct TrainRun<F = f32> {
    pub config: RunConfig,
    pub params: DenoiserParams<F>,
    pub wtv_state: WtvState<F>,
    pub opt_state: Adam<F>,
    pub iteration: usize,
    pub loss_trace: Vec<LossRecord>,
    /// Only filled when a clean reference is supplied.
    pub psnr_trace: Vec<PsnrRecord>,
}

impl<F> TrainRun<F> {
    /// Final probe PSNR minus the best probe PSNR (≤ 0), if any probes ran.
    pub fn psnr_drop(&self) -> Option<f64> {
        let last = self.psnr_trace.last()?.psnr;
        let best = self.psnr_trace.iter().map(|r| r.psnr).fold(f64::NEG_INFINITY, f64::max);
        Some(last - best)
    }
}

/// Optional extras of a training run.
pub struct TrainOptions<'a, F> {
    /// Slice index; selects the random streams.
    pub slice: u64,
    /// Clean gather for PSNR probes every `train.psnr_every` iterations.
    pub clean: Option<&'a Gather<F>>,
    /// Factor applied to probe outputs before comparing with `clean`.
    pub output_scale: F,
    pub checkpoint_dir: Option<&'a Path>,
    pub log: Option<&'a (dyn Fn(u64, &LossRecord) + Sync)>,
}

impl<F: Real> Default for TrainOptions<'_, F> {
    fn default() -> Self {
        TrainOptions {
            slice: 0,
            clean: None,
            output_scale: F::one(),
            checkpoint_dir: None,
            log: None,
        }
    }
}

impl<F: Copy> Clone for TrainOptions<'_, F> {
    fn clone(&self) -> Self {
        TrainOptions { ..*self }
    }
}

pub fn weight_schedule(config: &RunConfig) -> WeightSchedule {
    WeightSchedule {
        period: config.wtv.weight_period,
        freeze: config.wtv.weight_freeze,
        epsilon: config.wtv.epsilon,
        adaptive: config.wtv.adaptive,
    }
}

fn stream_index(slice: u64, t: usize) -> u64 {
    (slice << 32) | t as u64
}

/// `iters` ADMM iterations on `y` starting from `init`.
pub fn train_single<F: Real>(y: &Gather<F>, config: &RunConfig, init: DenoiserParams<F>, iters: usize) -> Result<TrainRun<F>> {
    train_single_with(y, config, init, iters, &TrainOptions::default())
}

pub fn train_single_with<F: Real>(
    y: &Gather<F>,
    config: &RunConfig,
    init: DenoiserParams<F>,
    iters: usize,
    opts: &TrainOptions<'_, F>,
) -> Result<TrainRun<F>> {
    config.validate()?;
    let (h, w) = y.shape();
    if let Some(c) = opts.clean {
        y.check_shape(c.shape())?;
    }
    let wtv_state = WtvState::new(h, w, config.wtv.gamma, config.wtv.mu, weight_schedule(config))?;
    let mut run = TrainRun {
        config: config.clone(),
        opt_state: Adam::new(init.len(), config.train.step_size),
        params: init,
        wtv_state,
        iteration: 0,
        loss_trace: Vec::with_capacity(iters),
        psnr_trace: Vec::new(),
    };
    let started = Instant::now();
    for _ in 0..iters {
        step(&mut run, y, opts.slice)?;
        let t = run.iteration;
        let rec = run.loss_trace.last_mut().expect("step records a loss");
        rec.elapsed_secs = started.elapsed().as_secs_f64();
        if let Some(log) = opts.log {
            log(opts.slice, rec);
        }
        if let Some(clean) = opts.clean {
            let every = config.train.psnr_every;
            if every > 0 && (t % every == 0 || t == iters) {
                let probe = ensemble(
                    &run.params,
                    y,
                    config.mask.mode,
                    config.mask.rate,
                    config.train.psnr_samples.max(1),
                    derive_stream(config.seed, Purpose::Probe, opts.slice),
                )?;
                run.psnr_trace.push(PsnrRecord {
                    iteration: t,
                    psnr: psnr(clean, &probe.mean.scaled(opts.output_scale))?,
                });
            }
        }
        if let Some(dir) = opts.checkpoint_dir {
            let every = config.train.checkpoint_every;
            if every > 0 && t % every == 0 {
                run.params.save(&checkpoint_path(dir, opts.slice, t))?;
            }
        }
    }
    Ok(run)
}

pub fn checkpoint_path(dir: &Path, slice: u64, iteration: usize) -> PathBuf {
    dir.join(format!("theta_slice{slice:03}_iter{iteration:06}.bin"))
}

/// One ADMM iteration.
fn step<F: Real>(run: &mut TrainRun<F>, y: &Gather<F>, slice: u64) -> Result<()> {
    let cfg = &run.config;
    let t = run.iteration;
    let (h, w) = y.shape();
    let idx = stream_index(slice, t);
    let mask = sample_mask(h, w, cfg.mask.mode, cfg.mask.rate, derive_stream(cfg.seed, Purpose::Mask, idx))?;
    let instance = make_instance(y, &mask)?;
    let diverged = |_| Error::DivergenceDetected { iteration: t };

    let pass = forward_recorded(&run.params, &instance, derive_stream(cfg.seed, Purpose::Dropout, idx))
        .map_err(|e| match e {
            Error::NonFinite => Error::DivergenceDetected { iteration: t },
            e => e,
        })?;
    let f = pass.output().data();

    run.wtv_state.update_v(f)?;
    let l1 = run.wtv_state.weighted_l1().as_f64();
    let (loss, grad_f) = theta_loss_at(pass.output(), &instance, y, &run.wtv_state)?;
    if !loss.total().is_finite() {
        return Err(Error::DivergenceDetected { iteration: t });
    }
    let grads = pass.backward(&run.params, grad_f.view())?;
    adam_step(&mut run.params, &grads, &mut run.opt_state).map_err(diverged)?;
    run.wtv_state.update_lambda(f)?;
    run.wtv_state.update_weights(y.data(), f)?;
    run.wtv_state.advance();
    run.iteration += 1;
    run.loss_trace.push(LossRecord {
        iteration: run.iteration,
        fidelity: loss.fidelity.as_f64(),
        penalty: loss.penalty.as_f64(),
        l1,
        elapsed_secs: 0.0,
    });
    Ok(())
}

/// Training run and ensemble output of one slice.
#[derive(Debug, Clone)]
pub struct SliceOutcome<F = f32> {
    pub run: TrainRun<F>,
    pub ensemble: EnsembleResult<F>,
}

/// Trains on every slice of `group` and denoises it.
///
/// Slice 1 is trained from random initialization for `t1` iterations; each
/// later slice starts from a copy of the slice-1 parameters and runs `tk`
/// iterations. Slices are scaled by the group's peak amplitude during
/// training and the outputs are scaled back.
pub fn train_group<F: Real>(group: &[Gather<F>], config: &RunConfig) -> Result<Vec<SliceOutcome<F>>> {
    train_group_with(group, config, None, &TrainOptions::default())
}

/// [`train_group`] with optional clean references (one per slice) for PSNR
/// probes; `slice`, `clean` and `output_scale` of `opts` are set per slice.
pub fn train_group_with<F: Real>(
    group: &[Gather<F>],
    config: &RunConfig,
    clean: Option<&[Gather<F>]>,
    opts: &TrainOptions<'_, F>,
) -> Result<Vec<SliceOutcome<F>>> {
    config.validate()?;
    let first = group
        .first()
        .ok_or_else(|| Error::InvalidConfig("a group needs at least one slice".into()))?;
    for g in &group[1..] {
        first.check_shape(g.shape())?;
    }
    if let Some(c) = clean {
        if c.len() != group.len() {
            return Err(Error::shape((group.len(), 1), (c.len(), 1)));
        }
        for g in c {
            first.check_shape(g.shape())?;
        }
    }
    let peak = group.iter().map(|g| g.max_abs()).fold(F::zero(), F::max);
    let scale = if peak > F::zero() { peak } else { F::one() };
    let inv = F::one() / scale;
    let scaled: Vec<Gather<F>> = group.iter().map(|g| g.scaled(inv)).collect();

    let init = init_params::<F>(&config.architecture(), derive_stream(config.seed, Purpose::Init, 0))?;
    let run_slice = |k: usize, init: DenoiserParams<F>, iters: usize| -> Result<SliceOutcome<F>> {
        let o = TrainOptions {
            slice: k as u64,
            clean: clean.map(|c| &c[k]),
            output_scale: scale,
            ..opts.clone()
        };
        let run = train_single_with(&scaled[k], config, init, iters, &o)?;
        let e = ensemble_denoise(
            &run.params,
            &scaled[k],
            config,
            derive_stream(config.seed, Purpose::Inference, k as u64),
        )?;
        Ok(SliceOutcome {
            run,
            ensemble: EnsembleResult {
                mean: e.mean.scaled(scale),
                per_sample_std: e.per_sample_std * scale,
                p: e.p,
            },
        })
    };

    let head = run_slice(0, init, config.train.t1)?;
    let theta1 = &head.run.params;
    let tail: Vec<SliceOutcome<F>> = (1..group.len())
        .into_par_iter()
        .map(|k| run_slice(k, theta1.clone(), config.train.tk))
        .collect::<Result<_>>()?;
    Ok(std::iter::once(head).chain(tail).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ConvVariant;
    use ndarray::Array2;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.net.depth = 2;
        c.net.width = 8;
        c.net.conv = ConvVariant::Mgrconv;
        c.train.t1 = 6;
        c.train.tk = 3;
        c.train.step_size = 1e-3;
        c.wtv.weight_period = 2;
        c.wtv.weight_freeze = 4;
        c.infer.samples = 2;
        c
    }

    fn gather(seed: u64) -> Gather<f64> {
        Gather::new(Array2::from_shape_fn((16, 16), |(i, j)| {
            ((i as f64 * 0.4 + j as f64 * 0.1 + seed as f64).sin()) * 0.8
        }))
        .unwrap()
    }

    fn init(c: &RunConfig) -> DenoiserParams<f64> {
        init_params(&c.architecture(), derive_stream(c.seed, Purpose::Init, 0)).unwrap()
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let c = small_config();
        let p = init(&c);
        let run = train_single(&gather(0), &c, p.clone(), 0).unwrap();
        assert_eq!(run.params, p);
        assert_eq!(run.iteration, 0);
        assert!(run.wtv_state.v.iter().all(|&v| v == 0.0));
        assert!(run.wtv_state.weights.iter().all(|&v| v == 1.0));
        assert!(run.loss_trace.is_empty());
    }

    #[test]
    fn iterations_advance_by_one_and_losses_are_finite() {
        let c = small_config();
        let run = train_single(&gather(0), &c, init(&c), 5).unwrap();
        assert_eq!(run.iteration, 5);
        assert_eq!(run.wtv_state.iteration, 5);
        assert_eq!(run.opt_state.steps(), 5);
        let its: Vec<usize> = run.loss_trace.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![1, 2, 3, 4, 5]);
        assert!(run.loss_trace.iter().all(|r| r.fidelity.is_finite() && r.penalty.is_finite()));
        assert!(run.wtv_state.weights.iter().any(|&v| v != 1.0));
    }

    #[test]
    fn no_regularization_keeps_v_at_zero() {
        let mut c = small_config();
        c.wtv.gamma = 0.0;
        c.wtv.mu = 0.0;
        let run = train_single(&gather(0), &c, init(&c), 4).unwrap();
        assert!(run.wtv_state.v.iter().all(|&v| v == 0.0));
        assert!(run.loss_trace.iter().all(|r| r.penalty == 0.0));
    }

    #[test]
    fn runs_are_bit_reproducible_in_double_precision() {
        let c = small_config();
        let a = train_single(&gather(0), &c, init(&c), 4).unwrap();
        let b = train_single(&gather(0), &c, init(&c), 4).unwrap();
        let strip = |r: &TrainRun<f64>| r.loss_trace.iter().map(|l| (l.fidelity, l.penalty)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn psnr_probes_and_checkpoints() {
        let mut c = small_config();
        c.train.psnr_every = 2;
        c.train.checkpoint_every = 3;
        let clean = gather(0);
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            clean: Some(&clean),
            checkpoint_dir: Some(dir.path()),
            ..TrainOptions::default()
        };
        let run = train_single_with(&gather(0), &c, init(&c), 5, &opts).unwrap();
        let its: Vec<usize> = run.psnr_trace.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![2, 4, 5]);
        assert!(run.psnr_drop().unwrap() <= 0.0);
        assert!(checkpoint_path(dir.path(), 0, 3).exists());
        assert!(!checkpoint_path(dir.path(), 0, 5).exists());
    }

    #[test]
    fn single_slice_group_matches_train_single() {
        let c = small_config();
        let y = gather(1);
        let out = train_group(std::slice::from_ref(&y), &c).unwrap();
        assert_eq!(out.len(), 1);
        let scale = y.max_abs();
        let direct = train_single(&y.scaled(1.0 / scale), &c, init(&c), c.train.t1).unwrap();
        assert_eq!(out[0].run.params, direct.params);
        assert_eq!(out[0].run.iteration, c.train.t1);
    }

    #[test]
    fn later_slices_warm_start_from_the_first() {
        let c = small_config();
        let group = vec![gather(1), gather(2), gather(3)];
        let out = train_group(&group, &c).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[1].run.iteration, c.train.tk);
        assert_eq!(out[2].run.iteration, c.train.tk);
        let total: usize = out.iter().map(|o| o.run.iteration).sum();
        assert_eq!(total, c.total_iterations(3));
        // warm start from θ₁ (not chained): rerunning slice 2 alone from θ₁ matches
        let scale = group.iter().map(|g| g.max_abs()).fold(0.0, f64::max);
        let o = TrainOptions {
            slice: 2,
            ..TrainOptions::default()
        };
        let again = train_single_with(&group[2].scaled(1.0 / scale), &c, out[0].run.params.clone(), c.train.tk, &o).unwrap();
        assert_eq!(again.params, out[2].run.params);
    }

    #[test]
    fn mismatched_group_is_rejected() {
        let c = small_config();
        let odd = Gather::<f64>::zeros(16, 20).unwrap();
        assert!(matches!(train_group(&[gather(0), odd], &c), Err(Error::ShapeMismatch { .. })));
    }
}
