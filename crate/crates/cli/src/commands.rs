use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use s2swtv_core::io::{is_grid, read_csv_grid, read_grid, read_group, write_grid};
use s2swtv_core::metrics::{evaluate, local_similarity_map, psnr, ssim, EvalReport};
use s2swtv_core::synth::{add_noise, estimate_band, make_synthetic, random_events, EventSpec, NoiseSpec, DEFAULT_BAND_THRESHOLD};
use s2swtv_core::trainer::{train_group_with, LossRecord, SliceOutcome, TrainOptions};
use s2swtv_core::{derive_stream, ConvVariant, Gather, MaskMode, Purpose, RunConfig};
use serde::Serialize;

use crate::{AblateArgs, AddnoiseArgs, ConfigArgs, DenoiseArgs, EvalArgs, NoiseKindArg, RegularizerArg, SynthArgs};

pub fn synth(a: SynthArgs) -> Result<()> {
    let events: Vec<EventSpec> = match &a.events {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing events in {}", path.display()))?
        }
        None => random_events(
            a.linear,
            a.hyperbolic,
            a.height,
            a.width,
            derive_stream(a.seed, Purpose::Events, 0),
        ),
    };
    let g: Gather = make_synthetic(a.height, a.width, &events)?;
    write_grid(&g, &a.out)?;
    Ok(())
}

/// Reads a grid file, or a CSV grid when the path ends in `.csv`.
pub fn load_grid(path: &Path) -> Result<Gather> {
    let g = if path.extension().is_some_and(|e| e == "csv") {
        read_csv_grid(path)?
    } else {
        read_grid(path)?
    };
    Ok(g)
}

/// A grid file is a group of one; anything else is read as a manifest.
pub fn load_group(path: &Path) -> Result<Vec<Gather>> {
    if is_grid(path) || path.extension().is_some_and(|e| e == "csv") {
        Ok(vec![load_grid(path)?])
    } else {
        Ok(read_group(path)?)
    }
}

pub fn addnoise(a: AddnoiseArgs) -> Result<()> {
    let x = load_grid(&a.input)?;
    let spec = match (a.kind, a.band) {
        (NoiseKindArg::Gaussian, _) => NoiseSpec::gaussian(a.sigma),
        (NoiseKindArg::Bandpass, Some(b)) => NoiseSpec::bandpass(a.sigma, b[0], b[1]),
        (NoiseKindArg::Bandpass, None) => {
            let (lo, hi) = estimate_band(&x, DEFAULT_BAND_THRESHOLD)?;
            // A band must have positive width away from DC and Nyquist.
            NoiseSpec::bandpass(a.sigma, lo.max(1e-3), hi.min(0.499).max(lo + 1e-3))
        }
    };
    let y = add_noise(&x, &spec, derive_stream(a.seed, Purpose::Noise, 0))?;
    write_grid(&y, &a.out)?;
    Ok(())
}

pub fn load_config(c: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in &c.overrides {
        cfg.set(k, v).with_context(|| format!("applying --set {k}={v}"))?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_line(slice: u64, r: &LossRecord) -> String {
    format!(
        "slice={} iter={} fidelity={:.6e} penalty={:.6e} l1={:.6e} elapsed={:.3}",
        slice + 1,
        r.iteration,
        r.fidelity,
        r.penalty,
        r.l1,
        r.elapsed_secs
    )
}

/// Trains on `noisy` and returns one outcome per slice, logging to
/// `log_path` as it goes.
fn run_group(noisy: &[Gather], clean: Option<&[Gather]>, cfg: &RunConfig, log_path: &Path) -> Result<Vec<SliceOutcome>> {
    let file = fs::File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let sink = Mutex::new(BufWriter::new(file));
    let log = |slice: u64, r: &LossRecord| {
        let mut w = sink.lock().expect("log lock");
        let _ = writeln!(w, "{}", log_line(slice, r));
    };
    let opts = TrainOptions {
        log: Some(&log),
        ..TrainOptions::default()
    };
    let out = train_group_with(noisy, cfg, clean, &opts);
    sink.into_inner().expect("log lock").flush()?;
    let out = out?;
    let mut w = fs::OpenOptions::new().append(true).open(log_path)?;
    for (k, o) in out.iter().enumerate() {
        for p in &o.run.psnr_trace {
            writeln!(w, "slice={} iter={} psnr={:.4}", k + 1, p.iteration, p.psnr)?;
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SliceReport {
    slice: usize,
    output: PathBuf,
    iterations: usize,
    psnr: Option<f64>,
    ssim: Option<f64>,
    ls: f64,
}

pub fn denoise(a: DenoiseArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let noisy = load_group(&a.input)?;
    // Ground truth is only touched when explicitly requested.
    let clean = a.clean.as_deref().map(load_group).transpose()?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    fs::write(a.out_dir.join("config.toml"), cfg.to_toml_string())?;

    let out = run_group(&noisy, clean.as_deref(), &cfg, &a.out_dir.join("train.log"))?;
    let mut reports = Vec::with_capacity(out.len());
    for (k, o) in out.iter().enumerate() {
        let path = a.out_dir.join(format!("denoised_{:03}.f32", k + 1));
        write_grid(&o.ensemble.mean, &path)?;
        if a.std_out {
            let std = Gather::new(o.ensemble.per_sample_std.clone())?;
            write_grid(&std, &a.out_dir.join(format!("std_{:03}.f32", k + 1)))?;
        }
        if a.save_params {
            o.run.params.save(&a.out_dir.join(format!("params_{:03}.bin", k + 1)))?;
        }
        let rep = evaluate(&noisy[k], &o.ensemble.mean, clean.as_ref().map(|c| &c[k]))?;
        reports.push(SliceReport {
            slice: k + 1,
            output: path,
            iterations: o.run.iteration,
            psnr: rep.psnr,
            ssim: rep.ssim,
            ls: rep.ls,
        });
    }
    let text = serde_json::to_string_pretty(&reports)?;
    fs::write(a.out_dir.join("report.json"), &text)?;
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    window: usize,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let noisy = load_grid(&a.noisy)?;
    let denoised = load_grid(&a.denoised)?;
    let clean = a.clean.as_deref().map(load_grid).transpose()?;
    let mut report = evaluate(&noisy, &denoised, clean.as_ref())?;
    if a.window != s2swtv_core::metrics::LS_WINDOW {
        let map = local_similarity_map(&denoised, &report.residual, a.window)?;
        report.ls = map.mean().unwrap_or(0.0);
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        write_grid(&report.residual, &dir.join("residual.f32"))?;
        let map = local_similarity_map(&denoised, &report.residual, a.window)?;
        write_grid(&Gather::new(map.mapv(|v| v as f32))?, &dir.join("ls_map.f32"))?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&EvalOutput {
            report: &report,
            window: a.window
        })?
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: MaskMode,
    pub regularizer: &'static str,
    pub conv: ConvVariant,
    pub psnr: f64,
    pub ssim: f64,
    pub ls: f64,
}

fn regularized(mut cfg: RunConfig, r: RegularizerArg) -> (RunConfig, &'static str) {
    match r {
        RegularizerArg::Wtv => {
            cfg.wtv.adaptive = true;
            (cfg, "wtv")
        }
        RegularizerArg::Tv => {
            cfg.wtv.adaptive = false;
            (cfg, "tv")
        }
        RegularizerArg::None => {
            cfg.wtv.gamma = 0.0;
            cfg.wtv.mu = 0.0;
            (cfg, "none")
        }
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let base = load_config(&a.config)?;
    let noisy = load_grid(&a.input)?;
    let clean = load_grid(&a.clean)?;
    if noisy.shape() != clean.shape() {
        bail!("noisy {:?} and clean {:?} shapes differ", noisy.shape(), clean.shape());
    }
    let convs: Vec<ConvVariant> = if a.convs.is_empty() {
        vec![base.net.conv]
    } else {
        a.convs.iter().map(|&c| c.into()).collect()
    };
    let mut combos = Vec::new();
    for &m in &a.modes {
        for &r in &a.regularizers {
            for &c in &convs {
                let (mut cfg, name) = regularized(base.clone(), r);
                cfg.mask.mode = m.into();
                cfg.net.conv = c;
                combos.push((cfg, name));
            }
        }
    }
    fs::create_dir_all(&a.out_dir)?;
    let rows: Vec<AblationRow> = combos
        .par_iter()
        .map(|(cfg, name)| -> Result<AblationRow> {
            let tag = format!("{}_{}_{}", cfg.mask.mode, name, cfg.net.conv);
            let out = run_group(std::slice::from_ref(&noisy), None, cfg, &a.out_dir.join(format!("{tag}.log")))?;
            let den = &out[0].ensemble.mean;
            write_grid(den, &a.out_dir.join(format!("{tag}.f32")))?;
            let rep = evaluate(&noisy, den, Some(&clean))?;
            Ok(AblationRow {
                mode: cfg.mask.mode,
                regularizer: name,
                conv: cfg.net.conv,
                psnr: psnr(&clean, den)?,
                ssim: ssim(&clean, den)?,
                ls: rep.ls,
            })
        })
        .collect::<Result<_>>()?;

    let mut table = String::from("mode\tregularizer\tconv\tpsnr\tssim\tls\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{}\t{}\t{:.3}\t{:.4}\t{:.4}\n",
            r.mode, r.regularizer, r.conv, r.psnr, r.ssim, r.ls
        ));
    }
    fs::write(a.out_dir.join("ablation.tsv"), &table)?;
    fs::write(a.out_dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(())
}
