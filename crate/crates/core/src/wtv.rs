//! Weighted total variation along the trace axis and the ADMM pieces that
//! handle it: the soft-threshold V-update, the multiplier ascent step, the
//! adaptive weight refresh and the augmented coupling penalty.
//!
//! Only horizontal (trace-to-trace) differences are used. One `(V, Λ)` pair
//! is shared by all masked instances.

use ndarray::{s, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::types::{Gather, Real};

/// `out(i, j) = x(i, j + 1) − x(i, j)`, shape `H × (W − 1)`.
pub fn horizontal_derivative<F: Real>(x: ArrayView2<'_, F>) -> Result<Array2<F>> {
    let (height, width) = x.dim();
    if width < 2 {
        return Err(Error::TooSmall { height, width });
    }
    Ok(&x.slice(s![.., 1..]) - &x.slice(s![.., ..width - 1]))
}

/// Adjoint of [`horizontal_derivative`]: maps `H × (W − 1)` back to `H × W`.
pub fn horizontal_derivative_adjoint<F: Real>(z: ArrayView2<'_, F>) -> Array2<F> {
    let (h, wm1) = z.dim();
    let mut out = Array2::zeros((h, wm1 + 1));
    {
        let mut right = out.slice_mut(s![.., 1..]);
        right += &z;
    }
    {
        let mut left = out.slice_mut(s![.., ..wm1]);
        left -= &z;
    }
    out
}

/// `‖weights ⊙ ∇ₕx‖₁`.
pub fn wtv_norm<F: Real>(x: &Gather<F>, weights: ArrayView2<'_, F>) -> Result<F> {
    let grad = horizontal_derivative(x.data())?;
    if weights.dim() != grad.dim() {
        return Err(Error::shape(grad.dim(), weights.dim()));
    }
    if weights.iter().any(|&w| w < F::zero()) {
        return Err(Error::NegativeWeight);
    }
    Ok(Zip::from(&grad)
        .and(&weights)
        .fold(F::zero(), |acc, &g, &w| acc + (w * g).abs()))
}

/// `sgn(y) · max(|y| − v, 0)`, the minimizer of `(y − x)² + 2v|x|`.
#[inline]
pub fn soft_threshold<F: Real>(y: F, v: F) -> F {
    let mag = y.abs() - v;
    if mag > F::zero() {
        mag.copysign(y)
    } else {
        F::zero()
    }
}

/// When the weight matrix is refreshed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSchedule {
    pub period: usize,
    pub freeze: usize,
    pub epsilon: f64,
    /// `false` pins the weights at 1 (unweighted TV).
    pub adaptive: bool,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule {
            period: 100,
            freeze: 3000,
            epsilon: 1e-8,
            adaptive: true,
        }
    }
}

impl WeightSchedule {
    pub fn is_due(&self, iteration: usize) -> bool {
        self.adaptive && iteration.is_multiple_of(self.period) && iteration < self.freeze
    }
}

/// ADMM state of the WTV splitting for one gather.
#[derive(Debug, Clone, PartialEq)]
pub struct WtvState<F = f32> {
    pub v: Array2<F>,
    pub lambda: Array2<F>,
    pub weights: Array2<F>,
    pub gamma: F,
    pub mu: F,
    pub iteration: usize,
    pub schedule: WeightSchedule,
}

impl<F: Real> WtvState<F> {
    /// `V = 0`, `Λ = 0`, `W = 1`, `t = 0` for an `h × w` gather.
    pub fn new(h: usize, w: usize, gamma: f64, mu: f64, schedule: WeightSchedule) -> Result<Self> {
        if w < 2 {
            return Err(Error::TooSmall { height: h, width: w });
        }
        if !(gamma >= 0.0 && mu >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma = {gamma} and mu = {mu} must be >= 0")));
        }
        Ok(WtvState {
            v: Array2::zeros((h, w - 1)),
            lambda: Array2::zeros((h, w - 1)),
            weights: Array2::ones((h, w - 1)),
            gamma: F::lit(gamma),
            mu: F::lit(mu),
            iteration: 0,
            schedule,
        })
    }

    fn gradient_of(&self, net_output: ArrayView2<'_, F>) -> Result<Array2<F>> {
        let (h, w) = net_output.dim();
        if (h, w.saturating_sub(1)) != self.v.dim() {
            return Err(Error::shape((self.v.nrows(), self.v.ncols() + 1), (h, w)));
        }
        horizontal_derivative(net_output)
    }

    /// `V ← Soft_{γW/μ}(∇ₕf + Λ/μ)`. With `μ = 0` the coupling is switched
    /// off and `V` stays zero.
    pub fn update_v(&mut self, net_output: ArrayView2<'_, F>) -> Result<()> {
        let grad = self.gradient_of(net_output)?;
        if self.mu == F::zero() {
            self.v.fill(F::zero());
            return Ok(());
        }
        let (gamma, mu) = (self.gamma, self.mu);
        Zip::from(&mut self.v)
            .and(&grad)
            .and(&self.lambda)
            .and(&self.weights)
            .for_each(|v, &g, &l, &w| *v = soft_threshold(g + l / mu, gamma * w / mu));
        Ok(())
    }

    /// `Λ ← Λ + μ(∇ₕf − V)`.
    pub fn update_lambda(&mut self, net_output: ArrayView2<'_, F>) -> Result<()> {
        let grad = self.gradient_of(net_output)?;
        let mu = self.mu;
        Zip::from(&mut self.lambda)
            .and(&grad)
            .and(&self.v)
            .for_each(|l, &g, &v| *l += mu * (g - v));
        Ok(())
    }

    /// Refreshes `W(i,j) = ‖y − f‖²_F / (2HW(|∇ₕf(i,j)| + ε))` when the
    /// schedule is due at the current iteration. Returns whether it did.
    pub fn update_weights(&mut self, y: ArrayView2<'_, F>, net_output: ArrayView2<'_, F>) -> Result<bool> {
        if y.dim() != net_output.dim() {
            return Err(Error::shape(y.dim(), net_output.dim()));
        }
        if !self.schedule.is_due(self.iteration) {
            return Ok(false);
        }
        let grad = self.gradient_of(net_output)?;
        let (h, w) = y.dim();
        let residual = Zip::from(&y)
            .and(&net_output)
            .fold(F::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
        let scale = residual / F::lit(2.0 * (h * w) as f64);
        let eps = F::lit(self.schedule.epsilon);
        Zip::from(&mut self.weights)
            .and(&grad)
            .for_each(|wt, &g| *wt = scale / (g.abs() + eps));
        Ok(true)
    }

    /// `∇ₕf + Λ/μ − V`, or `∇ₕf − V` when `μ = 0`.
    fn coupling_residual(&self, net_output: ArrayView2<'_, F>) -> Result<Array2<F>> {
        let mut r = self.gradient_of(net_output)?;
        if self.mu != F::zero() {
            let mu = self.mu;
            Zip::from(&mut r)
                .and(&self.lambda)
                .and(&self.v)
                .for_each(|r, &l, &v| *r = *r + l / mu - v);
        } else {
            r -= &self.v;
        }
        Ok(r)
    }

    /// `(μ/2)‖∇ₕf + Λ/μ − V‖²_F`.
    pub fn augmented_penalty(&self, net_output: ArrayView2<'_, F>) -> Result<F> {
        let r = self.coupling_residual(net_output)?;
        Ok(self.mu * F::lit(0.5) * r.iter().fold(F::zero(), |a, &v| a + v * v))
    }

    /// Gradient of [`Self::augmented_penalty`] with respect to `f`:
    /// `μ ∇ₕᵀ(∇ₕf + Λ/μ − V)`.
    pub fn penalty_gradient(&self, net_output: ArrayView2<'_, F>) -> Result<Array2<F>> {
        let r = self.coupling_residual(net_output)?;
        Ok(horizontal_derivative_adjoint(r.view()) * self.mu)
    }

    /// `γ‖W ⊙ V‖₁`, the split regularizer value.
    pub fn weighted_l1(&self) -> F {
        Zip::from(&self.v)
            .and(&self.weights)
            .fold(F::zero(), |a, &v, &w| a + (w * v).abs())
            * self.gamma
    }

    pub fn advance(&mut self) {
        self.iteration += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(a: Array2<f64>) -> Gather<f64> {
        Gather::new(a).unwrap()
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(horizontal_derivative(array![[1.0, 3.0], [2.0, 2.0]].view()).unwrap(), array![[2.0], [0.0]]);
        let c = Array2::from_elem((4, 5), 3.5);
        assert!(horizontal_derivative(c.view()).unwrap().iter().all(|&v| v == 0.0));
        let ramp = Array2::from_shape_fn((3, 6), |(_, j)| j as f64);
        assert!(horizontal_derivative(ramp.view()).unwrap().iter().all(|&v| v == 1.0));
        assert!(horizontal_derivative(Array2::<f64>::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn norm_examples() {
        let x = Gather::new(array![[1.0, 3.0, 2.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(wtv_norm(&x, Array2::ones((2, 2)).view()).unwrap(), 3.0);
        assert_eq!(wtv_norm(&x, Array2::zeros((2, 2)).view()).unwrap(), 0.0);
        let x = Gather::new(array![[0.0, 1.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(wtv_norm(&x, array![[2.0, 1.0], [0.0, 0.0]].view()).unwrap(), 4.0);
        assert!(matches!(wtv_norm(&x, Array2::ones((2, 3)).view()), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            wtv_norm(&x, array![[-1.0, 1.0], [0.0, 0.0]].view()),
            Err(Error::NegativeWeight)
        ));
    }

    #[test]
    fn unit_weights_give_plain_tv() {
        let x = g(Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) as f64).sin()));
        let tv: f64 = horizontal_derivative(x.data()).unwrap().iter().map(|v| v.abs()).sum();
        assert!((wtv_norm(&x, Array2::ones((5, 6)).view()).unwrap() - tv).abs() < 1e-12);
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(2.0f64, 0.5), 1.5);
        assert_eq!(soft_threshold(-0.3f64, 0.5), 0.0);
        assert_eq!(soft_threshold(-2.0f64, 0.5), -1.5);
    }

    /// Grid-search minimizer of `(y − x)² + 2v|x|` over `x ∈ [−5, 5]`.
    fn brute_prox(y: f64, v: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=100_000 {
            let x = -5.0 + k as f64 * 1e-4;
            let f = (y - x).powi(2) + 2.0 * v * x.abs();
            if f < best.0 {
                best = (f, x);
            }
        }
        best.1
    }

    #[test]
    fn soft_threshold_matches_grid_search() {
        for yi in 0..=12 {
            for vi in 0..=8 {
                let (y, v) = (-3.0 + 0.5 * yi as f64, 0.25 * vi as f64);
                let got = soft_threshold(y, v);
                assert!((got - brute_prox(y, v)).abs() < 1e-3, "y={y} v={v}");
            }
        }
    }

    fn schedule() -> WeightSchedule {
        WeightSchedule::default()
    }

    fn random(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_gamma_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = WtvState::<f64>::new(6, 5, 0.0, 0.1, schedule()).unwrap();
        st.lambda = random(6, 4, &mut rng);
        let f = random(6, 5, &mut rng);
        st.update_v(f.view()).unwrap();
        let expect = horizontal_derivative(f.view()).unwrap() + &st.lambda / 0.1;
        assert_eq!(st.v, expect);
    }

    #[test]
    fn constant_output_gives_zero_v() {
        let mut st = WtvState::<f64>::new(4, 4, 0.01, 0.1, schedule()).unwrap();
        st.update_v(Array2::from_elem((4, 4), 0.7).view()).unwrap();
        assert!(st.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn v_update_minimizes_each_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (gamma, mu) = (0.3, 0.7);
        let mut st = WtvState::<f64>::new(8, 8, gamma, mu, schedule()).unwrap();
        st.lambda = random(8, 7, &mut rng);
        st.weights = random(8, 7, &mut rng).mapv(f64::abs);
        let f = random(8, 8, &mut rng);
        st.update_v(f.view()).unwrap();
        let grad = horizontal_derivative(f.view()).unwrap();
        for ((i, j), &v) in st.v.indexed_iter() {
            let target = grad[[i, j]] + st.lambda[[i, j]] / mu;
            let obj = |x: f64| 0.5 * mu * (target - x).powi(2) + gamma * st.weights[[i, j]] * x.abs();
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=200_000 {
                let x = -5.0 + k as f64 * 5e-5;
                if obj(x) < best.0 {
                    best = (obj(x), x);
                }
            }
            assert!((v - best.1).abs() < 1e-4, "({i},{j}) {v} vs {}", best.1);
            assert!(obj(v) <= best.0 + 1e-9);
        }
    }

    #[test]
    fn lambda_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(5, 6, &mut rng);
        let mut st = WtvState::<f64>::new(5, 6, 0.01, 0.1, schedule()).unwrap();
        st.lambda = random(5, 5, &mut rng);
        st.v = horizontal_derivative(f.view()).unwrap();
        let before = st.lambda.clone();
        st.update_lambda(f.view()).unwrap();
        assert_eq!(st.lambda, before);

        // residual of all ones, twice
        let mut st = WtvState::<f64>::new(5, 6, 0.01, 0.1, schedule()).unwrap();
        st.v = horizontal_derivative(f.view()).unwrap() - 1.0;
        st.update_lambda(f.view()).unwrap();
        assert!(st.lambda.iter().all(|&l| (l - 0.1).abs() < 1e-12));
        st.update_lambda(f.view()).unwrap();
        assert!(st.lambda.iter().all(|&l| (l - 0.2).abs() < 1e-12));
    }

    #[test]
    fn weight_refresh_formula() {
        // ‖y − f‖² = 8 on a 2x2 grid, |∇ₕf| = 1 everywhere.
        let y = array![[f64::sqrt(2.0), 1.0 + f64::sqrt(2.0)], [f64::sqrt(2.0), 1.0 + f64::sqrt(2.0)]];
        let f = array![[0.0, 1.0], [0.0, 1.0]];
        let sched = WeightSchedule {
            epsilon: 1e-12,
            ..schedule()
        };
        let mut st = WtvState::<f64>::new(2, 2, 0.01, 0.1, sched).unwrap();
        assert!(st.update_weights(y.view(), f.view()).unwrap());
        assert!(st.weights.iter().all(|&w| (w - 1.0).abs() < 1e-9));

        let mut st = WtvState::<f64>::new(2, 2, 0.01, 0.1, sched).unwrap();
        st.update_weights(f.view(), f.view()).unwrap();
        assert!(st.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn weight_refresh_respects_schedule() {
        let y = array![[f64::sqrt(2.0), 1.0 + f64::sqrt(2.0)], [f64::sqrt(2.0), 1.0 + f64::sqrt(2.0)]];
        let f = array![[0.0, 1.0], [0.0, 1.0]];
        let sched = WeightSchedule {
            period: 10,
            freeze: 30,
            ..schedule()
        };
        let mut st = WtvState::<f64>::new(2, 2, 0.01, 0.1, sched).unwrap();
        let mut refreshed = Vec::new();
        for _ in 0..50 {
            if st.update_weights(y.view(), f.view()).unwrap() {
                refreshed.push(st.iteration);
            }
            st.advance();
        }
        assert_eq!(refreshed, vec![0, 10, 20]);

        let mut fixed = WtvState::<f64>::new(2, 2, 0.01, 0.1, WeightSchedule { adaptive: false, ..sched }).unwrap();
        assert!(!fixed.update_weights(y.view(), f.view()).unwrap());
        assert!(fixed.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn penalty_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(4, 4, &mut rng);
        let mut st = WtvState::<f64>::new(4, 4, 0.01, 0.1, schedule()).unwrap();
        st.v = horizontal_derivative(f.view()).unwrap();
        assert_eq!(st.augmented_penalty(f.view()).unwrap(), 0.0);

        let ramp = array![[0.0, 1.0, 2.0], [5.0, 6.0, 7.0]];
        let st = WtvState::<f64>::new(2, 3, 0.01, 0.1, schedule()).unwrap();
        assert!((st.augmented_penalty(ramp.view()).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn penalty_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, mu) = (7, 9, 0.37);
        let f = random(h, w, &mut rng);
        let mut st = WtvState::<f64>::new(h, w, 0.01, mu, schedule()).unwrap();
        st.v = random(h, w - 1, &mut rng);
        st.lambda = random(h, w - 1, &mut rng);
        let mut direct = 0.0;
        for i in 0..h {
            for j in 0..w - 1 {
                let r = (f[[i, j + 1]] - f[[i, j]]) + st.lambda[[i, j]] / mu - st.v[[i, j]];
                direct += r * r;
            }
        }
        direct *= mu / 2.0;
        assert!((st.augmented_penalty(f.view()).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (4, 5);
        let f = random(h, w, &mut rng);
        let mut st = WtvState::<f64>::new(h, w, 0.01, 0.3, schedule()).unwrap();
        st.v = random(h, w - 1, &mut rng);
        st.lambda = random(h, w - 1, &mut rng);
        let grad = st.penalty_gradient(f.view()).unwrap();
        for ((i, j), &g) in grad.indexed_iter() {
            let mut p = f.clone();
            p[[i, j]] += 1e-6;
            let mut m = f.clone();
            m[[i, j]] -= 1e-6;
            let fd = (st.augmented_penalty(p.view()).unwrap() - st.augmented_penalty(m.view()).unwrap()) / 2e-6;
            assert!((fd - g).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn prox_is_optimal(y in -3.0f64..3.0, v in 0.0f64..2.0, probe in -5.0f64..5.0) {
            let x = soft_threshold(y, v);
            let obj = |x: f64| (y - x).powi(2) + 2.0 * v * x.abs();
            prop_assert!(obj(x) <= obj(probe) + 1e-9);
        }

        #[test]
        fn adjoint_identity(seed in any::<u64>(), h in 1usize..8, w in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(h, w, &mut rng);
            let z = random(h, w - 1, &mut rng);
            let lhs: f64 = (horizontal_derivative(x.view()).unwrap() * &z).sum();
            let rhs: f64 = (&x * &horizontal_derivative_adjoint(z.view())).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + lhs.abs()));
        }

        #[test]
        fn weights_decrease_with_gradient(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random(6, 7, &mut rng);
            let f = random(6, 7, &mut rng);
            let mut st = WtvState::<f64>::new(6, 7, 0.01, 0.1, WeightSchedule::default()).unwrap();
            st.update_weights(y.view(), f.view()).unwrap();
            let grad = horizontal_derivative(f.view()).unwrap();
            let pairs: Vec<(f64, f64)> = grad.iter().map(|g| g.abs()).zip(st.weights.iter().cloned()).collect();
            for &(ga, wa) in &pairs {
                for &(gb, wb) in &pairs {
                    if ga < gb {
                        prop_assert!(wa > wb);
                    }
                }
            }
        }
    }
}
