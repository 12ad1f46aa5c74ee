//! Bernoulli masks and masked training instances.

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{Gather, Mask, MaskMode, Real, RngStream};

pub const MAX_REDRAWS: usize = 1000;

/// A masked copy of the observation: `input = mask ⊙ y`. The loss is
/// supported on the complement of the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInstance<F = f32> {
    pub input: Gather<F>,
    pub mask: Mask,
}

/// Samples a mask whose units (columns, rows or elements, by `mode`) are
/// hidden independently with probability `mask_rate`. Draws that hide all
/// units or none are rejected and redrawn.
pub fn sample_mask(h: usize, w: usize, mode: MaskMode, mask_rate: f64, stream: RngStream) -> Result<Mask> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::BadSpec(format!("mask rate {mask_rate} must lie in (0, 1)")));
    }
    let units = match mode {
        MaskMode::Trace => w,
        MaskMode::Row => h,
        MaskMode::Element => h * w,
    };
    let mut rng = stream.rng();
    let mut keep = vec![0u8; units];
    for _ in 0..MAX_REDRAWS {
        for k in keep.iter_mut() {
            *k = u8::from(!rng.random_bool(mask_rate));
        }
        let kept = keep.iter().filter(|&&k| k == 1).count();
        if kept == 0 || kept == units {
            continue;
        }
        let data = match mode {
            MaskMode::Trace => Array2::from_shape_fn((h, w), |(_, j)| keep[j]),
            MaskMode::Row => Array2::from_shape_fn((h, w), |(i, _)| keep[i]),
            MaskMode::Element => Array2::from_shape_vec((h, w), keep).expect("h*w units"),
        };
        return Mask::new(data, mode);
    }
    Err(Error::RedrawExhausted {
        attempts: MAX_REDRAWS,
    })
}

pub fn make_instance<F: Real>(y: &Gather<F>, mask: &Mask) -> Result<MaskedInstance<F>> {
    y.check_shape(mask.shape())?;
    let mut input = y.data().to_owned();
    Zip::from(&mut input).and(mask.data()).for_each(|v, &m| {
        if m == 0 {
            *v = F::zero();
        }
    });
    Ok(MaskedInstance {
        input: Gather::from_trusted(input).with_sampling(y.dt, y.dx),
        mask: mask.clone(),
    })
}

/// `‖(y − prediction) ⊙ (1 − mask)‖²_F`: squared error on hidden entries.
pub fn masked_fidelity<F: Real>(y: &Gather<F>, prediction: &Gather<F>, mask: &Mask) -> Result<F> {
    y.check_shape(mask.shape())?;
    prediction.check_shape(mask.shape())?;
    let mut acc = F::zero();
    Zip::from(y.data())
        .and(prediction.data())
        .and(mask.data())
        .for_each(|&a, &b, &m| {
            if m == 0 {
                acc += (a - b) * (a - b);
            }
        });
    Ok(acc)
}

/// Squared error on the kept entries, the complement of [`masked_fidelity`].
pub fn kept_fidelity<F: Real>(y: &Gather<F>, prediction: &Gather<F>, mask: &Mask) -> Result<F> {
    y.check_shape(mask.shape())?;
    prediction.check_shape(mask.shape())?;
    let mut acc = F::zero();
    Zip::from(y.data())
        .and(prediction.data())
        .and(mask.data())
        .for_each(|&a, &b, &m| {
            if m == 1 {
                acc += (a - b) * (a - b);
            }
        });
    Ok(acc)
}
