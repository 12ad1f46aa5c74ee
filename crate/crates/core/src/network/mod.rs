//! Dropout U-Net denoiser with hand-written backpropagation.
//!
//! Layout for depth `D` and width `C`:
//!
//! * encoder: `conv(1→C)`, then `D` blocks of `conv(C→C)` + 2×2 max-pool,
//!   then a bottleneck `conv(C→C)`;
//! * decoder, for level `l = D..1`: nearest ×2 upsampling, concatenation
//!   with the skip of level `l−1` (the masked input at `l = 1`), then
//!   `conv(·→2C)`, `conv(2C→2C)`; the last level instead runs
//!   `conv(·→⌊4C/3⌋)`, `conv(→⌊2C/3⌋)`, `conv(→1)` with a linear output.
//!
//! Every convolution is 3×3 followed by a leaky rectifier of slope 0.1.
//! Dropout precedes every decoder convolution and is always active.
//!
//! Parameter count: a 3×3 `conv(a→b)` holds `9ab + b` values; the
//! mask-guided residual variant adds a bias-free 1×1 branch of `ab` values
//! to each encoder convolution.

mod adam;
pub mod layers;

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, concatenate, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
use layers::{ConvCache, ConvSlot, MaskGeometry, PoolCache};

use crate::error::{Error, Result};
use crate::masking::MaskedInstance;
use crate::types::{Gather, Real, RngStream};
use crate::wtv::WtvState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvVariant {
    Standard,
    Partial,
    Mgrconv,
}

impl ConvVariant {
    pub const ALL: [ConvVariant; 3] = [ConvVariant::Standard, ConvVariant::Partial, ConvVariant::Mgrconv];

    pub fn name(self) -> &'static str {
        match self {
            ConvVariant::Standard => "standard",
            ConvVariant::Partial => "partial",
            ConvVariant::Mgrconv => "mgrconv",
        }
    }
}

impl fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConvVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown convolution variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub depth: usize,
    pub width: usize,
    pub conv: ConvVariant,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            depth: 5,
            width: 48,
            conv: ConvVariant::Mgrconv,
            dropout: 0.5,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.depth) {
            return Err(Error::BadArchitecture(format!("depth {} outside 1..=10", self.depth)));
        }
        if self.width < 2 {
            return Err(Error::BadArchitecture(format!("width {} must be >= 2", self.width)));
        }
        if !(self.dropout > 0.0 && self.dropout < 1.0) {
            return Err(Error::BadArchitecture(format!("dropout {} must lie in (0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this (`2^depth`).
    pub fn factor(&self) -> usize {
        1 << self.depth
    }

    /// Widths of the two hidden convolutions of the output level.
    pub fn head_widths(&self) -> (usize, usize) {
        ((4 * self.width / 3).max(1), (2 * self.width / 3).max(1))
    }

    pub fn param_count(&self) -> usize {
        Plan::new(self).len
    }
}

/// Forward-pass flavour. Dropout is active in both; they differ only in
/// intent (a training step versus one member of an inference ensemble).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    EvalSample,
}

/// Flat parameter vector θ together with the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F = f32> {
    arch: Architecture,
    values: Vec<F>,
}

impl<F: Real> DenoiserParams<F> {
    pub fn from_values(arch: Architecture, values: Vec<F>) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        if values.len() != n {
            return Err(Error::shape((n, 1), (values.len(), 1)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(DenoiserParams { arch, values })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<G: Real>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            arch: self.arch,
            values: self.values.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }

    /// Binary checkpoint: magic, little-endian header length, JSON
    /// architecture header, then the values as little-endian `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            architecture: self.arch,
            count: self.values.len(),
        })
        .expect("header serializes");
        let mut buf = Vec::with_capacity(16 + header.len() + 4 * self.values.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in &self.values {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::BadHeader {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if buf.len() < 12 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a parameter checkpoint"));
        }
        let hlen = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader = buf
            .get(12..12 + hlen)
            .and_then(|h| serde_json::from_slice(h).ok())
            .ok_or_else(|| bad("unreadable checkpoint header"))?;
        let body = &buf[12 + hlen..];
        if body.len() != 4 * header.count {
            return Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                expected: 4 * header.count as u64,
                actual: body.len() as u64,
            });
        }
        let values = body
            .chunks_exact(4)
            .map(|c| F::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        DenoiserParams::from_values(header.architecture, values)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"S2SWTVP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    count: usize,
}

/// Fan-in scaled uniform initialization: every weight and bias of a layer
/// with fan-in `n` is drawn from `U(−1/√n, 1/√n)`.
pub fn init_params<F: Real>(arch: &Architecture, stream: RngStream) -> Result<DenoiserParams<F>> {
    arch.validate()?;
    let plan = Plan::new(arch);
    let mut values = vec![F::zero(); plan.len];
    let mut rng = stream.rng();
    for slot in plan.slots() {
        let bound = 1.0 / (slot.fan_in() as f64).sqrt();
        for r in [slot.weight.clone(), slot.bias.clone()] {
            for v in &mut values[r] {
                *v = F::lit(rng.random_range(-bound..bound));
            }
        }
        if let Some(r) = slot.residual.clone() {
            let bound = 1.0 / (slot.cin as f64).sqrt();
            for v in &mut values[r] {
                *v = F::lit(rng.random_range(-bound..bound));
            }
        }
    }
    Ok(DenoiserParams { arch: *arch, values })
}

/// Layer slots of an architecture inside the flat parameter vector.
struct Plan {
    depth: usize,
    conv: ConvVariant,
    dropout: f64,
    /// `conv(1→C)`, the `D` block convolutions, then the bottleneck.
    enc: Vec<ConvSlot>,
    /// Decoder convolutions, outermost level first (`dec[l-1]` is level `l`).
    dec: Vec<Vec<ConvSlot>>,
    len: usize,
}

impl Plan {
    fn new(arch: &Architecture) -> Self {
        let (d, c) = (arch.depth, arch.width);
        let residual = arch.conv == ConvVariant::Mgrconv;
        let mut off = 0;
        let mut enc = vec![ConvSlot::new(&mut off, 1, c, residual)];
        for _ in 0..=d {
            enc.push(ConvSlot::new(&mut off, c, c, residual));
        }
        let (h1, h2) = arch.head_widths();
        let mut dec = Vec::with_capacity(d);
        for l in 1..=d {
            let up = if l == d { c } else { 2 * c };
            let skip = if l == 1 { 1 } else { c };
            let level = if l == 1 {
                vec![
                    ConvSlot::new(&mut off, up + skip, h1, false),
                    ConvSlot::new(&mut off, h1, h2, false),
                    ConvSlot::new(&mut off, h2, 1, false),
                ]
            } else {
                vec![
                    ConvSlot::new(&mut off, up + skip, 2 * c, false),
                    ConvSlot::new(&mut off, 2 * c, 2 * c, false),
                ]
            };
            dec.push(level);
        }
        Plan {
            depth: d,
            conv: arch.conv,
            dropout: arch.dropout,
            enc,
            dec,
            len: off,
        }
    }

    fn slots(&self) -> impl Iterator<Item = &ConvSlot> {
        self.enc.iter().chain(self.dec.iter().flatten())
    }
}

struct EncStep<F> {
    geometry: Option<MaskGeometry<F>>,
    cache: ConvCache<F>,
    activated: Array3<F>,
}

struct DecStep<F> {
    dropout: Array3<F>,
    cache: ConvCache<F>,
    /// `None` for the linear output convolution.
    activated: Option<Array3<F>>,
}

struct DecLevel<F> {
    up_channels: usize,
    steps: Vec<DecStep<F>>,
}

/// Intermediate values of one forward pass, kept for [`ForwardPass::backward`].
struct Tape<F> {
    enc: Vec<EncStep<F>>,
    pools: Vec<PoolCache>,
    /// Decoder levels in execution order (deepest first).
    dec: Vec<DecLevel<F>>,
}

/// Result of a recorded forward pass.
pub struct ForwardPass<F> {
    output: Gather<F>,
    tape: Tape<F>,
    padded: (usize, usize),
}

impl<F: Real> ForwardPass<F> {
    pub fn output(&self) -> &Gather<F> {
        &self.output
    }

    pub fn into_output(self) -> Gather<F> {
        self.output
    }

    /// Gradient of a scalar loss with respect to θ, given its gradient with
    /// respect to the (cropped) network output.
    pub fn backward(&self, params: &DenoiserParams<F>, grad_output: ArrayView2<'_, F>) -> Result<Vec<F>> {
        let shape = self.output.shape();
        if grad_output.dim() != shape {
            return Err(Error::shape(shape, grad_output.dim()));
        }
        let plan = Plan::new(&params.arch);
        let mut g = Array3::<F>::zeros((1, self.padded.0, self.padded.1));
        g.slice_mut(s![0, ..shape.0, ..shape.1]).assign(&grad_output);
        Ok(backward(&plan, &params.values, &self.tape, g))
    }
}

/// One stochastic forward pass. Inputs whose sides are not multiples of
/// `2^depth` are reflect-padded at the bottom and right, and the output is
/// cropped back.
pub fn forward<F: Real>(
    params: &DenoiserParams<F>,
    instance: &MaskedInstance<F>,
    mode: ForwardMode,
    stream: RngStream,
) -> Result<Gather<F>> {
    let _ = mode;
    run(params, instance, stream, false).map(ForwardPass::into_output)
}

/// Like [`forward`] but keeps the intermediate values needed for the gradient.
pub fn forward_recorded<F: Real>(
    params: &DenoiserParams<F>,
    instance: &MaskedInstance<F>,
    stream: RngStream,
) -> Result<ForwardPass<F>> {
    run(params, instance, stream, true)
}

/// [`forward`] without padding; the input must already be divisible.
pub fn forward_unpadded<F: Real>(
    params: &DenoiserParams<F>,
    instance: &MaskedInstance<F>,
    stream: RngStream,
) -> Result<Gather<F>> {
    let (h, w) = instance.input.shape();
    let k = params.arch.factor();
    if h % k != 0 || w % k != 0 {
        return Err(Error::ShapeNotDivisible {
            height: h,
            width: w,
            factor: k,
        });
    }
    forward(params, instance, ForwardMode::EvalSample, stream)
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn pad_reflect<F: Copy>(x: ArrayView2<'_, F>, hp: usize, wp: usize) -> Array2<F> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((hp, wp), |(i, j)| x[[reflect_index(i, h), reflect_index(j, w)]])
}

fn round_up(n: usize, k: usize) -> usize {
    n.div_ceil(k) * k
}

fn run<F: Real>(
    params: &DenoiserParams<F>,
    instance: &MaskedInstance<F>,
    stream: RngStream,
    record: bool,
) -> Result<ForwardPass<F>> {
    let (h, w) = instance.input.shape();
    if instance.mask.shape() != (h, w) {
        return Err(Error::shape((h, w), instance.mask.shape()));
    }
    let k = params.arch.factor();
    let (hp, wp) = (round_up(h, k), round_up(w, k));
    let x0 = pad_reflect(instance.input.data(), hp, wp).insert_axis(Axis(0));
    let m0 = pad_reflect(instance.mask.to_real::<F>().view(), hp, wp);

    let plan = Plan::new(&params.arch);
    let theta = &params.values[..];
    let mut rng = stream.rng();
    let mut tape = Tape {
        enc: Vec::new(),
        pools: Vec::new(),
        dec: Vec::new(),
    };

    let masked = plan.conv != ConvVariant::Standard;
    let mut mask = m0;
    let mut skips: Vec<Array3<F>> = Vec::with_capacity(plan.depth);
    let mut h_cur = x0.clone();
    for (i, slot) in plan.enc.iter().enumerate() {
        let geometry = masked.then(|| MaskGeometry::new(mask.clone()));
        let (mut out, cache) = layers::conv_forward(slot, theta, h_cur.view(), geometry.as_ref());
        layers::leaky_relu_inplace(&mut out);
        if let (ConvVariant::Partial, Some(g)) = (plan.conv, geometry.as_ref()) {
            mask = g.covered.clone();
        }
        let is_block = i >= 1 && i <= plan.depth;
        if is_block {
            let (pooled, pc) = layers::maxpool2(out.view());
            mask = layers::maxpool_mask(&mask);
            if record {
                tape.pools.push(pc);
            }
            h_cur = pooled;
            if i < plan.depth {
                skips.push(h_cur.clone());
            }
        } else {
            h_cur = out.clone();
        }
        if record {
            tape.enc.push(EncStep {
                geometry,
                cache,
                activated: out,
            });
        }
    }

    for l in (1..=plan.depth).rev() {
        let up = layers::upsample2(h_cur.view());
        let up_channels = up.dim().0;
        let skip = if l == 1 { x0.view() } else { skips[l - 2].view() };
        let mut cur = concatenate(Axis(0), &[up.view(), skip]).expect("matching spatial dims");
        let level = &plan.dec[l - 1];
        let mut steps = Vec::with_capacity(level.len());
        for (j, slot) in level.iter().enumerate() {
            let drop = layers::dropout_mask::<F, _>(cur.dim(), plan.dropout, &mut rng);
            cur *= &drop;
            let (mut out, cache) = layers::conv_forward(slot, theta, cur.view(), None);
            let linear = l == 1 && j + 1 == level.len();
            if !linear {
                layers::leaky_relu_inplace(&mut out);
            }
            if record {
                steps.push(DecStep {
                    dropout: drop,
                    cache,
                    activated: (!linear).then(|| out.clone()),
                });
            }
            cur = out;
        }
        if record {
            tape.dec.push(DecLevel { up_channels, steps });
        }
        h_cur = cur;
    }

    let out = h_cur.index_axis_move(Axis(0), 0).slice(s![..h, ..w]).to_owned();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let output = Gather::from_trusted(out).with_sampling(instance.input.dt, instance.input.dx);
    Ok(ForwardPass {
        output,
        tape,
        padded: (hp, wp),
    })
}

fn backward<F: Real>(plan: &Plan, theta: &[F], tape: &Tape<F>, grad_out: Array3<F>) -> Vec<F> {
    let mut grads = vec![F::zero(); plan.len];
    let d = plan.depth;
    // Gradients reaching the pooled skip tensors p_1..p_{D-1}.
    let mut skip_grads: Vec<Option<Array3<F>>> = (0..d).map(|_| None).collect();

    let mut g = grad_out;
    for (rev, level) in tape.dec.iter().rev().enumerate() {
        let l = rev + 1;
        let slots = &plan.dec[l - 1];
        for (slot, step) in slots.iter().zip(&level.steps).rev() {
            if let Some(act) = &step.activated {
                layers::leaky_relu_backward(act, &mut g);
            }
            let mut gx = layers::conv_backward(slot, theta, &step.cache, None, g.view(), &mut grads, true)
                .expect("input gradient requested");
            gx *= &step.dropout;
            g = gx;
        }
        let (gu, gskip) = g.view().split_at(Axis(0), level.up_channels);
        if l > 1 {
            skip_grads[l - 2] = Some(gskip.to_owned());
        }
        g = layers::upsample2_backward(gu);
    }

    // `g` is now the gradient of the bottleneck output.
    for i in (0..plan.enc.len()).rev() {
        let step = &tape.enc[i];
        let is_block = i >= 1 && i <= d;
        if is_block {
            if i < d {
                if let Some(sg) = skip_grads[i - 1].take() {
                    g += &sg;
                }
            }
            g = layers::maxpool2_backward(&tape.pools[i - 1], g.view());
        }
        layers::leaky_relu_backward(&step.activated, &mut g);
        let gx = layers::conv_backward(
            &plan.enc[i],
            theta,
            &step.cache,
            step.geometry.as_ref(),
            g.view(),
            &mut grads,
            i > 0,
        );
        if let Some(gx) = gx {
            g = gx;
        }
    }
    grads
}

/// Value of the θ-subproblem objective split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub fidelity: F,
    pub penalty: F,
}

impl<F: Real> LossBreakdown<F> {
    pub fn total(&self) -> F {
        self.fidelity + self.penalty
    }
}

/// Loss `Σ_{hidden} (y − f)² + (μ/2)‖∇ₕf + Λ/μ − V‖²` at a network output
/// `f`, and its gradient with respect to `f`.
pub fn theta_loss_at<F: Real>(
    output: &Gather<F>,
    instance: &MaskedInstance<F>,
    y: &Gather<F>,
    state: &WtvState<F>,
) -> Result<(LossBreakdown<F>, Array2<F>)> {
    y.check_shape(output.shape())?;
    if instance.mask.shape() != y.shape() {
        return Err(Error::shape(y.shape(), instance.mask.shape()));
    }
    let hidden = instance.mask.data().mapv(|m| if m == 0 { F::one() } else { F::zero() });
    let diff = (&output.data() - &y.data()) * &hidden;
    let fidelity = diff.iter().fold(F::zero(), |a, &v| a + v * v);
    let penalty = state.augmented_penalty(output.data())?;
    let grad = diff * F::lit(2.0) + state.penalty_gradient(output.data())?;
    Ok((LossBreakdown { fidelity, penalty }, grad))
}

/// θ-subproblem objective evaluated with one shared forward pass.
pub fn theta_loss<F: Real>(
    params: &DenoiserParams<F>,
    instance: &MaskedInstance<F>,
    y: &Gather<F>,
    state: &WtvState<F>,
    stream: RngStream,
) -> Result<F> {
    let f = forward(params, instance, ForwardMode::Train, stream)?;
    Ok(theta_loss_at(&f, instance, y, state)?.0.total())
}

/// [`theta_loss`] together with its gradient with respect to θ.
pub fn theta_loss_and_grad<F: Real>(
    params: &DenoiserParams<F>,
    instance: &MaskedInstance<F>,
    y: &Gather<F>,
    state: &WtvState<F>,
    stream: RngStream,
) -> Result<(LossBreakdown<F>, Vec<F>)> {
    let pass = forward_recorded(params, instance, stream)?;
    let (loss, g) = theta_loss_at(pass.output(), instance, y, state)?;
    let grads = pass.backward(params, g.view())?;
    Ok((loss, grads))
}

/// One Adam update of θ with gradient `grad`.
pub fn adam_step<F: Real>(params: &mut DenoiserParams<F>, grad: &[F], opt: &mut Adam<F>) -> Result<()> {
    opt.step(&mut params.values, grad)?;
    if params.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}
