//! Shared domain types: gathers, masks, the floating-point abstraction and
//! the deterministic random-stream contract.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of every grid and network tensor.
///
/// Training runs at `f32`; `f64` is used where numerics must be verified
/// tightly (finite-difference gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A 2-D seismic gather: rows are time samples, columns are traces.
#[derive(Debug, Clone, PartialEq)]
pub struct Gather<F = f32> {
    data: Array2<F>,
    /// Seconds per time sample.
    pub dt: Option<f64>,
    /// Meters per trace.
    pub dx: Option<f64>,
}

impl<F: Real> Gather<F> {
    /// Builds a gather, enforcing `H >= 2`, `W >= 2` and finite entries.
    pub fn new(data: Array2<F>) -> Result<Self> {
        validate_gather(Gather {
            data,
            dt: None,
            dx: None,
        })
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<F>) -> Result<Self> {
        let data = Array2::from_shape_vec((height, width), values)
            .map_err(|_| Error::BadSpec(format!("{height}x{width} grid needs {} values", height * width)))?;
        Self::new(data)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Array2::zeros((height, width)))
    }

    /// Wraps data produced internally from an already valid gather.
    pub(crate) fn from_trusted(data: Array2<F>) -> Self {
        Gather {
            data,
            dt: None,
            dx: None,
        }
    }

    pub fn with_sampling(mut self, dt: Option<f64>, dx: Option<f64>) -> Self {
        self.dt = dt;
        self.dx = dx;
        self
    }

    pub fn data(&self) -> ArrayView2<'_, F> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<F> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &v| m.max(v.abs()))
    }

    /// Returns the gather scaled to unit max-abs amplitude and the factor
    /// that restores the original scale. An all-zero gather has factor 1.
    pub fn normalized(&self) -> (Gather<F>, F) {
        let peak = self.max_abs();
        let scale = if peak > F::zero() { peak } else { F::one() };
        (self.scaled(F::one() / scale), scale)
    }

    pub fn scaled(&self, factor: F) -> Gather<F> {
        Gather {
            data: &self.data * factor,
            dt: self.dt,
            dx: self.dx,
        }
    }

    /// Converts to another precision.
    pub fn cast<G: Real>(&self) -> Gather<G> {
        Gather {
            data: self.data.mapv(|v| G::lit(v.as_f64())),
            dt: self.dt,
            dx: self.dx,
        }
    }

    pub(crate) fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(shape, self.shape()));
        }
        Ok(())
    }
}

/// Checks the gather invariants and hands the value back unchanged.
pub fn validate_gather<F: Real>(g: Gather<F>) -> Result<Gather<F>> {
    let (height, width) = g.data.dim();
    if height < 2 || width < 2 {
        return Err(Error::TooSmall { height, width });
    }
    if g.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(g)
}

/// Which axis a Bernoulli mask is constant along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Whole columns (traces) are kept or hidden.
    Trace,
    /// Whole rows (time samples) are kept or hidden.
    Row,
    /// Every element is drawn independently.
    Element,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Trace, MaskMode::Row, MaskMode::Element];

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Trace => "trace",
            MaskMode::Row => "row",
            MaskMode::Element => "element",
        }
    }
}

impl Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trace" => Ok(MaskMode::Trace),
            "row" => Ok(MaskMode::Row),
            "element" => Ok(MaskMode::Element),
            other => Err(Error::InvalidConfig(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Binary mask aligned with a gather; 1 keeps an element, 0 hides it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    data: Array2<u8>,
    mode: MaskMode,
}

impl Mask {
    /// Builds a mask, checking binarity and the constancy implied by `mode`.
    pub fn new(data: Array2<u8>, mode: MaskMode) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::BadSpec("mask entries must be 0 or 1".into()));
        }
        let constant = match mode {
            MaskMode::Trace => data.columns().into_iter().all(|c| c.iter().all(|&v| v == c[0])),
            MaskMode::Row => data.rows().into_iter().all(|r| r.iter().all(|&v| v == r[0])),
            MaskMode::Element => true,
        };
        if !constant {
            return Err(Error::BadSpec(format!("mask is not constant along its {mode} axis")));
        }
        Ok(Mask { data, mode })
    }

    pub fn ones(height: usize, width: usize, mode: MaskMode) -> Self {
        Mask {
            data: Array2::ones((height, width)),
            mode,
        }
    }

    pub fn data(&self) -> ArrayView2<'_, u8> {
        self.data.view()
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// The mask as 0/1 floats.
    pub fn to_real<F: Real>(&self) -> Array2<F> {
        self.data.mapv(|v| if v == 1 { F::one() } else { F::zero() })
    }

    /// Number of hidden (zero) entries.
    pub fn hidden_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }
}

/// Purposes that own an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Mask,
    Noise,
    Dropout,
    Init,
    Events,
    /// Masks and dropout of the final ensemble.
    Inference,
    /// Quality probes taken during training.
    Probe,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Mask => 1,
            Purpose::Noise => 2,
            Purpose::Dropout => 3,
            Purpose::Init => 4,
            Purpose::Events => 5,
            Purpose::Inference => 6,
            Purpose::Probe => 7,
        }
    }
}

const INDEX_BITS: u32 = 56;

/// A reproducible random stream: a ChaCha8 generator keyed by `seed` and
/// positioned on stream `stream_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// A fresh generator at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream number `index`, independent of the parent and of its
    /// other children.
    pub fn fork(&self, index: u64) -> RngStream {
        RngStream {
            seed: splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_f42d_4c95_7f2d))),
            stream_id: index,
        }
    }
}

/// Maps `(seed, purpose, index)` to a stream. Distinct `(purpose, index)`
/// pairs get distinct stream ids for `index < 2^56`.
pub fn derive_stream(seed: u64, purpose: Purpose, index: u64) -> RngStream {
    debug_assert!(index < (1 << INDEX_BITS), "stream index out of range");
    let index = index & ((1 << INDEX_BITS) - 1);
    RngStream {
        seed,
        stream_id: (purpose.code() << INDEX_BITS) | index,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
