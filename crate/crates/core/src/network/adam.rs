//! Adam over a flat parameter vector.

use crate::error::{Error, Result};
use crate::types::Real;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [F], grads: &[F]) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::shape((n, 1), (params.len().max(grads.len()), 1)));
        }
        self.t += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::lit(self.lr);
        let eps = F::lit(self.eps);
        let one = F::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let mut adam = Adam::new(3, 0.01);
        adam.step(&mut p, &[3.0, -0.2, 0.0]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut adam = Adam::<f64>::new(3, 0.01);
        assert!(matches!(adam.step(&mut [0.0; 3], &[0.0; 2]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn scalar_quadratic_matches_direct_recursion() {
        let mut x = vec![1.0f64];
        let mut adam = Adam::new(1, 0.1);
        let (mut m, mut v, mut xr) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=200 {
            let g = 2.0 * x[0];
            adam.step(&mut x, &[g]).unwrap();
            let gr = 2.0 * xr;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            xr -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((x[0] - xr).abs() < 1e-12);
        assert!(x[0].abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![5.0f64, -3.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            adam.step(&mut p, &g).unwrap();
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
