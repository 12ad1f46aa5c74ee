//! Tensor kernels of the denoiser, each with its backward pass.
//!
//! Feature maps are `(channels, height, width)` arrays in standard layout.
//! Convolutions use zero padding ("same" output size) and are lowered to a
//! GEMM over an im2col buffer.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis, Zip};
use rand::Rng;

use crate::types::Real;

pub const LEAKY_SLOPE: f64 = 0.1;

/// `(C, H, W)` → `(C·9, H·W)` patches of a 3×3 zero-padded window.
pub fn im2col3<F: Real>(x: ArrayView3<'_, F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    let hw = h * w;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<F>::zeros((c * 9, hw));
    let out = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &xs[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut out[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto the map.
pub fn col2im3<F: Real>(cols: ArrayView2<'_, F>, c: usize, h: usize, w: usize) -> Array3<F> {
    let hw = h * w;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::<F>::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &mut xs[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cs[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
    x
}

/// Location of one convolution's tensors inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSlot {
    pub cin: usize,
    pub cout: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    /// 1×1 residual branch (no bias), present for mask-guided residual convs.
    pub residual: Option<Range<usize>>,
}

impl ConvSlot {
    pub fn new(offset: &mut usize, cin: usize, cout: usize, residual: bool) -> Self {
        let mut take = |n: usize| {
            let r = *offset..*offset + n;
            *offset += n;
            r
        };
        let weight = take(cout * cin * 9);
        let bias = take(cout);
        let residual = residual.then(|| take(cout * cin));
        ConvSlot {
            cin,
            cout,
            weight,
            bias,
            residual,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * 9
    }

    fn weight<'a, F: Real>(&self, params: &'a [F]) -> ArrayView2<'a, F> {
        ArrayView2::from_shape((self.cout, self.cin * 9), &params[self.weight.clone()]).expect("slot shape")
    }

    fn residual<'a, F: Real>(&self, params: &'a [F]) -> Option<ArrayView2<'a, F>> {
        self.residual
            .clone()
            .map(|r| ArrayView2::from_shape((self.cout, self.cin), &params[r]).expect("slot shape"))
    }
}

/// Mask statistics of a partial convolution at one resolution.
#[derive(Debug, Clone)]
pub struct MaskGeometry<F> {
    /// Input mask, `(H, W)`, entries 0/1.
    pub mask: Array2<F>,
    /// `valid_count / window_sum` where the window sees a kept entry, else 0.
    pub ratio: Array2<F>,
    /// 1 where the 3×3 window contains a kept entry.
    pub covered: Array2<F>,
}

impl<F: Real> MaskGeometry<F> {
    /// The renormalization is relative to the in-bounds window size, so an
    /// all-ones mask gives `ratio = 1` everywhere.
    pub fn new(mask: Array2<F>) -> Self {
        let (h, w) = mask.dim();
        let mut ratio = Array2::zeros((h, w));
        let mut covered = Array2::zeros((h, w));
        for y in 0..h {
            let ys = y.saturating_sub(1)..(y + 2).min(h);
            for x in 0..w {
                let xs = x.saturating_sub(1)..(x + 2).min(w);
                let valid = ys.len() * xs.len();
                let mut sum = F::zero();
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        sum += mask[[yy, xx]];
                    }
                }
                if sum > F::zero() {
                    ratio[[y, x]] = F::lit(valid as f64) / sum;
                    covered[[y, x]] = F::one();
                }
            }
        }
        MaskGeometry { mask, ratio, covered }
    }
}

pub struct ConvCache<F> {
    cols: Array2<F>,
    /// Masked input flattened to `(C, H·W)`, kept for the residual branch.
    masked_input: Option<Array2<F>>,
    dims: (usize, usize, usize),
}

/// Standard 3×3 convolution, or its mask-aware form when `geometry` is
/// given: `ratio ⊙ (K ∗ (x ⊙ m)) + b ⊙ covered [+ R (x ⊙ m)]`.
pub fn conv_forward<F: Real>(
    slot: &ConvSlot,
    params: &[F],
    x: ArrayView3<'_, F>,
    geometry: Option<&MaskGeometry<F>>,
) -> (Array3<F>, ConvCache<F>) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(c, slot.cin);
    let masked = geometry.map(|g| &x * &g.mask.view().insert_axis(Axis(0)));
    let input = masked.as_ref().map_or(x.view(), |m| m.view());
    let cols = im2col3(input);
    let mut out = Array2::<F>::zeros((slot.cout, h * w));
    general_mat_mul(F::one(), &slot.weight(params), &cols, F::zero(), &mut out);

    let bias = &params[slot.bias.clone()];
    let mut masked_input = None;
    match geometry {
        None => {
            for (mut row, &b) in out.outer_iter_mut().zip(bias) {
                row.mapv_inplace(|v| v + b);
            }
        }
        Some(g) => {
            let ratio = g.ratio.view().into_shape_with_order(h * w).expect("contiguous");
            let covered = g.covered.view().into_shape_with_order(h * w).expect("contiguous");
            for (mut row, &b) in out.outer_iter_mut().zip(bias) {
                Zip::from(&mut row)
                    .and(&ratio)
                    .and(&covered)
                    .for_each(|v, &r, &cv| *v = *v * r + b * cv);
            }
            if let Some(res) = slot.residual(params) {
                let xm = masked
                    .expect("geometry implies masked input")
                    .into_shape_with_order((c, h * w))
                    .expect("contiguous");
                general_mat_mul(F::one(), &res, &xm, F::one(), &mut out);
                masked_input = Some(xm);
            }
        }
    }
    let out = out.into_shape_with_order((slot.cout, h, w)).expect("contiguous");
    (
        out,
        ConvCache {
            cols,
            masked_input,
            dims: (c, h, w),
        },
    )
}

/// Accumulates parameter gradients into `grads` and returns the input
/// gradient when `input_grad` is set.
pub fn conv_backward<F: Real>(
    slot: &ConvSlot,
    params: &[F],
    cache: &ConvCache<F>,
    geometry: Option<&MaskGeometry<F>>,
    grad_out: ArrayView3<'_, F>,
    grads: &mut [F],
    input_grad: bool,
) -> Option<Array3<F>> {
    let (c, h, w) = cache.dims;
    let g = grad_out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((slot.cout, h * w))
        .expect("contiguous");

    // Gradient reaching the convolution term (before renormalization).
    let gz = match geometry {
        None => {
            let gb = &mut grads[slot.bias.clone()];
            for (b, row) in gb.iter_mut().zip(g.outer_iter()) {
                *b += row.sum();
            }
            None
        }
        Some(geo) => {
            let ratio = geo.ratio.view().into_shape_with_order(h * w).expect("contiguous");
            let covered = geo.covered.view().into_shape_with_order(h * w).expect("contiguous");
            let gb = &mut grads[slot.bias.clone()];
            for (b, row) in gb.iter_mut().zip(g.outer_iter()) {
                *b += Zip::from(&row).and(&covered).fold(F::zero(), |a, &v, &cv| a + v * cv);
            }
            let mut gz = g.clone();
            for mut row in gz.outer_iter_mut() {
                row *= &ratio;
            }
            Some(gz)
        }
    };
    let gz_ref = gz.as_ref().unwrap_or(&g);

    {
        let mut gw = ArrayViewMut2::from_shape((slot.cout, c * 9), &mut grads[slot.weight.clone()]).expect("slot shape");
        general_mat_mul(F::one(), gz_ref, &cache.cols.t(), F::one(), &mut gw);
    }
    if let (Some(range), Some(xm)) = (slot.residual.clone(), cache.masked_input.as_ref()) {
        let mut gr = ArrayViewMut2::from_shape((slot.cout, c), &mut grads[range]).expect("slot shape");
        general_mat_mul(F::one(), &g, &xm.t(), F::one(), &mut gr);
    }
    if !input_grad {
        return None;
    }

    let mut gcols = Array2::<F>::zeros((c * 9, h * w));
    general_mat_mul(F::one(), &slot.weight(params).t(), gz_ref, F::zero(), &mut gcols);
    let mut gx = col2im3(gcols.view(), c, h, w);
    if let Some(res) = slot.residual(params) {
        let mut gx2 = gx.view_mut().into_shape_with_order((c, h * w)).expect("contiguous");
        general_mat_mul(F::one(), &res.t(), &g, F::one(), &mut gx2);
    }
    if let Some(geo) = geometry {
        gx *= &geo.mask.view().insert_axis(Axis(0));
    }
    Some(gx)
}

pub fn leaky_relu_inplace<F: Real>(x: &mut Array3<F>) {
    let slope = F::lit(LEAKY_SLOPE);
    x.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
}

/// `activated` is the layer output; positive outputs mark the linear branch.
pub fn leaky_relu_backward<F: Real>(activated: &Array3<F>, grad: &mut Array3<F>) {
    let slope = F::lit(LEAKY_SLOPE);
    Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= F::zero() {
            *g *= slope;
        }
    });
}

pub struct PoolCache {
    argmax: Array3<u8>,
}

/// 2×2 max pooling with stride 2; spatial dims must be even.
pub fn maxpool2<F: Real>(x: ArrayView3<'_, F>) -> (Array3<F>, PoolCache) {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::<F>::zeros((c, ho, wo));
    let mut argmax = Array3::<u8>::zeros((c, ho, wo));
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = x[[ch, 2 * y, 2 * xx]];
                let mut arg = 0u8;
                for k in 1..4u8 {
                    let v = x[[ch, 2 * y + (k as usize >> 1), 2 * xx + (k as usize & 1)]];
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                out[[ch, y, xx]] = best;
                argmax[[ch, y, xx]] = arg;
            }
        }
    }
    (out, PoolCache { argmax })
}

pub fn maxpool2_backward<F: Real>(cache: &PoolCache, grad: ArrayView3<'_, F>) -> Array3<F> {
    let (c, ho, wo) = grad.dim();
    let mut gx = Array3::<F>::zeros((c, 2 * ho, 2 * wo));
    for ((ch, y, x), &k) in cache.argmax.indexed_iter() {
        gx[[ch, 2 * y + (k as usize >> 1), 2 * x + (k as usize & 1)]] = grad[[ch, y, x]];
    }
    gx
}

/// Max-pools a 0/1 mask: a coarse cell is kept if any child is kept.
pub fn maxpool_mask<F: Real>(m: &Array2<F>) -> Array2<F> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        m[[2 * y, 2 * x]]
            .max(m[[2 * y, 2 * x + 1]])
            .max(m[[2 * y + 1, 2 * x]])
            .max(m[[2 * y + 1, 2 * x + 1]])
    })
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<F: Real>(x: ArrayView3<'_, F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub fn upsample2_backward<F: Real>(grad: ArrayView3<'_, F>) -> Array3<F> {
    let (c, h, w) = grad.dim();
    let mut gx = Array3::<F>::zeros((c, h / 2, w / 2));
    for ((ch, y, x), &g) in grad.indexed_iter() {
        let cell = &mut gx[[ch, y / 2, x / 2]];
        *cell += g;
    }
    gx
}

/// Inverted dropout mask: entries are 0 with probability `rate`, else
/// `1 / (1 − rate)`.
pub fn dropout_mask<F: Real, R: Rng>(dims: (usize, usize, usize), rate: f64, rng: &mut R) -> Array3<F> {
    let keep = F::lit(1.0 / (1.0 - rate));
    Array3::from_shape_simple_fn(dims, || if rng.random_bool(rate) { F::zero() } else { keep })
}
