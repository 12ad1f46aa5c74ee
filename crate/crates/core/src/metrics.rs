//! Quality measures: PSNR and SSIM against a clean reference, and the
//! reference-free local similarity between a denoised gather and the noise
//! it removed.
//!
//! Local similarity here is the mean absolute windowed zero-normalized
//! cross-correlation. It ranks results like the shaping-regularized local
//! similarity common in seismic work, but its absolute values differ.

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{Gather, Real};

/// Value reported when the two grids are identical.
pub const PSNR_CAP: f64 = 300.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of data normalized to `[−1, 1]`.
pub const SSIM_RANGE: f64 = 2.0;
pub const LS_WINDOW: usize = 9;

fn as_f64<F: Real>(g: &Gather<F>) -> Array2<f64> {
    g.data().mapv(|v| v.as_f64())
}

fn same_shape<F: Real>(a: &Gather<F>, b: &Gather<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// `10 log₁₀(1 / MSE)` with unit peak, capped at [`PSNR_CAP`].
pub fn psnr<F: Real>(reference: &Gather<F>, estimate: &Gather<F>) -> Result<f64> {
    same_shape(reference, estimate)?;
    let n = (reference.height() * reference.width()) as f64;
    let mse = reference
        .data()
        .iter()
        .zip(estimate.data().iter())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w = Array2::from_shape_fn((size, size), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let s = w.sum();
    w / s
}

/// Windowed weighted sum over all fully contained window positions.
fn filter_valid(x: ArrayView2<'_, f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.nrows();
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                acc += k[[a, b]] * x[[i + a, j + b]];
            }
        }
        acc
    })
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// the window positions that fit inside the grid. Grids smaller than the
/// window use the largest odd window that fits.
pub fn ssim<F: Real>(reference: &Gather<F>, estimate: &Gather<F>) -> Result<f64> {
    same_shape(reference, estimate)?;
    let (h, w) = reference.shape();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let (x, y) = (as_f64(reference), as_f64(estimate));
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    let mx = filter_valid(x.view(), &k);
    let my = filter_valid(y.view(), &k);
    let sxx = filter_valid((&x * &x).view(), &k) - &mx * &mx;
    let syy = filter_valid((&y * &y).view(), &k) - &my * &my;
    let sxy = filter_valid((&x * &y).view(), &k) - &mx * &my;
    let map = ((&mx * &my * 2.0 + c1) * (sxy * 2.0 + c2)) / ((&mx * &mx + &my * &my + c1) * (sxx + syy + c2));
    Ok(map.mean().expect("non-empty map"))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i.rem_euclid(period);
    (if r < n { r } else { period - r }) as usize
}

/// Map of `|ZNCC|` between `estimate` and `residual` over `window × window`
/// neighbourhoods (reflect padding at the borders). Windows in which either
/// patch is constant score 0.
pub fn local_similarity_map<F: Real>(estimate: &Gather<F>, residual: &Gather<F>, window: usize) -> Result<Array2<f64>> {
    same_shape(estimate, residual)?;
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("window {window} must be odd and >= 3")));
    }
    let (a, b) = (as_f64(estimate), as_f64(residual));
    let (h, w) = a.dim();
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut pa = vec![0.0; window * window];
    let mut pb = vec![0.0; window * window];
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let mut k = 0;
        for di in -r..=r {
            let ii = reflect(i as isize + di, h);
            for dj in -r..=r {
                let jj = reflect(j as isize + dj, w);
                pa[k] = a[[ii, jj]];
                pb[k] = b[[ii, jj]];
                k += 1;
            }
        }
        let ma = pa.iter().sum::<f64>() / n;
        let mb = pb.iter().sum::<f64>() / n;
        let (mut saa, mut sbb, mut sab, mut qa, mut qb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in pa.iter().zip(&pb) {
            let (dx, dy) = (x - ma, y - mb);
            saa += dx * dx;
            sbb += dy * dy;
            sab += dx * dy;
            qa += x * x;
            qb += y * y;
        }
        if saa <= 1e-12 * qa || sbb <= 1e-12 * qb {
            return 0.0;
        }
        (sab / (saa * sbb).sqrt()).abs().min(1.0)
    }))
}

/// Mean of [`local_similarity_map`]; lower means less signal in the residual.
pub fn local_similarity<F: Real>(estimate: &Gather<F>, residual: &Gather<F>, window: usize) -> Result<f64> {
    Ok(local_similarity_map(estimate, residual, window)?
        .mean()
        .expect("non-empty map"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport<F = f32> {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ls: f64,
    #[serde(skip)]
    pub residual: Gather<F>,
}

/// Scores `denoised` against `noisy`, and against `clean` when available.
pub fn evaluate<F: Real>(noisy: &Gather<F>, denoised: &Gather<F>, clean: Option<&Gather<F>>) -> Result<EvalReport<F>> {
    same_shape(noisy, denoised)?;
    let residual = Gather::from_trusted(&noisy.data() - &denoised.data());
    let ls = local_similarity(denoised, &residual, LS_WINDOW)?;
    let (psnr, ssim) = match clean {
        Some(c) => (Some(psnr(c, denoised)?), Some(ssim(c, denoised)?)),
        None => (None, None),
    };
    Ok(EvalReport { psnr, ssim, ls, residual })
}
