//! Diagonal Gaussians on the tape.
//!
//! Parameters are a mean and a natural-log variance of identical shape. A
//! batch of distributions is a `[n, d]` pair; densities and divergences
//! reduce over the last axis, giving one value per row (or a scalar for a
//! single `[d]` distribution).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// `0.5 * ln(2 pi)`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mu: Var,
    pub log_var: Var,
}

impl DiagGaussian {
    /// Pairs `mu` with `log_var`, clamping the latter to `[-10, 10]`.
    pub fn new(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Self> {
        if tape.shape(mu) != tape.shape(log_var) {
            return Err(Error::shape(
                "diag_gaussian",
                format!("mu {:?} vs log_var {:?}", tape.shape(mu), tape.shape(log_var)),
            ));
        }
        let log_var = tape.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(Self { mu, log_var })
    }

    pub fn from_tensors(tape: &mut Tape, mu: Tensor, log_var: Tensor, trainable: bool) -> Result<Self> {
        let mu = tape.leaf(mu, trainable);
        let log_var = tape.leaf(log_var, trainable);
        Self::new(tape, mu, log_var)
    }

    pub fn standard(tape: &mut Tape, shape: &[usize]) -> Result<Self> {
        Self::from_tensors(
            tape,
            Tensor::zeros(shape.to_vec()),
            Tensor::zeros(shape.to_vec()),
            false,
        )
    }

    pub fn shape<'t>(&self, tape: &'t Tape) -> &'t [usize] {
        tape.shape(self.mu)
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mu).last_dim()
    }

    /// Same parameters, cut off from the gradient graph.
    pub fn detach(&self, tape: &mut Tape) -> Self {
        Self {
            mu: tape.detach(self.mu),
            log_var: tape.detach(self.log_var),
        }
    }

    /// `mu + exp(log_var / 2) * noise`.
    pub fn sample_reparam(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        if tape.shape(noise) != self.shape(tape) {
            return Err(Error::shape(
                "sample_reparam",
                format!("noise {:?} vs distribution {:?}", tape.shape(noise), self.shape(tape)),
            ));
        }
        let half = tape.scale(self.log_var, 0.5)?;
        let std = tape.exp(half)?;
        let scaled = tape.mul(std, noise)?;
        tape.add(self.mu, scaled)
    }

    /// Log-density of `x`, summed over the last axis.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).last_dim() != self.dim(tape) {
            return Err(Error::shape(
                "log_prob",
                format!("x {:?} vs distribution {:?}", tape.shape(x), self.shape(tape)),
            ));
        }
        let diff = tape.sub(x, self.mu)?;
        let sq = tape.square(diff)?;
        let neg_lv = tape.neg(self.log_var)?;
        let precision = tape.exp(neg_lv)?;
        let maha = tape.mul(sq, precision)?;
        let per_dim = tape.add(maha, self.log_var)?;
        let per_dim = tape.scale(per_dim, -0.5)?;
        let per_dim = tape.add_scalar(per_dim, -HALF_LOG_2PI)?;
        tape.sum_last(per_dim)
    }

    /// `KL(self || N(0, I))`.
    pub fn kl_to_standard(&self, tape: &mut Tape) -> Result<Var> {
        let var = tape.exp(self.log_var)?;
        let mu2 = tape.square(self.mu)?;
        let s = tape.add(var, mu2)?;
        let s = tape.sub(s, self.log_var)?;
        let s = tape.add_scalar(s, -1.0)?;
        let s = tape.scale(s, 0.5)?;
        tape.sum_last(s)
    }

    /// `KL(self || other)`; `other` may be a single `[d]` distribution
    /// broadcast against a batch.
    pub fn kl_between(&self, tape: &mut Tape, other: &DiagGaussian) -> Result<Var> {
        if self.dim(tape) != other.dim(tape) {
            return Err(Error::shape(
                "kl_between",
                format!("{:?} vs {:?}", self.shape(tape), other.shape(tape)),
            ));
        }
        let lv_diff = tape.sub(other.log_var, self.log_var)?;
        let var1 = tape.exp(self.log_var)?;
        let dmu = tape.sub(self.mu, other.mu)?;
        let dmu2 = tape.square(dmu)?;
        let num = tape.add(var1, dmu2)?;
        let neg_lv2 = tape.neg(other.log_var)?;
        let inv_var2 = tape.exp(neg_lv2)?;
        let ratio = tape.mul(num, inv_var2)?;
        let s = tape.add(lv_diff, ratio)?;
        let s = tape.add_scalar(s, -1.0)?;
        let s = tape.scale(s, 0.5)?;
        tape.sum_last(s)
    }
}

/// Maps an unconstrained network output smoothly into `(-10, 10)`.
pub fn soft_clamp_log_var(tape: &mut Tape, raw: Var) -> Result<Var> {
    let scaled = tape.scale(raw, 1.0 / LOG_VAR_MAX)?;
    let t = tape.tanh(scaled)?;
    tape.scale(t, LOG_VAR_MAX)
}

/// Log-density of a 1-d Gaussian; plain-`f64` helper for oracles and reports.
pub fn normal_log_density(x: f64, mu: f64, log_var: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - 0.5 * log_var - (x - mu).powi(2) / (2.0 * log_var.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::rng::{normal_tensor, SeedStream};

    fn gauss(tape: &mut Tape, mu: &[f64], lv: &[f64]) -> DiagGaussian {
        DiagGaussian::from_tensors(
            tape,
            Tensor::vector(mu.to_vec()).unwrap(),
            Tensor::vector(lv.to_vec()).unwrap(),
            true,
        )
        .unwrap()
    }

    fn item(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn reparam_examples() {
        let mut tape = Tape::new();
        let g = gauss(&mut tape, &[0.0], &[0.0]);
        let n = tape.constant(Tensor::vector(vec![1.3]).unwrap());
        let s = g.sample_reparam(&mut tape, n).unwrap();
        assert_eq!(tape.value(s).data(), &[1.3]);

        let g = gauss(&mut tape, &[2.0], &[4f64.ln()]);
        let n = tape.constant(Tensor::vector(vec![1.0]).unwrap());
        let s = g.sample_reparam(&mut tape, n).unwrap();
        assert!((tape.value(s).data()[0] - 4.0).abs() < 1e-12);

        let zero = tape.constant(Tensor::vector(vec![0.0]).unwrap());
        let s = g.sample_reparam(&mut tape, zero).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0]);

        let bad = tape.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        assert!(matches!(g.sample_reparam(&mut tape, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_prob_at_mode() {
        let mut tape = Tape::new();
        let g = gauss(&mut tape, &[0.0], &[0.0]);
        let x = tape.constant(Tensor::vector(vec![0.0]).unwrap());
        let lp = g.log_prob(&mut tape, x).unwrap();
        // -0.5 ln(2 pi) = -0.91893853320467274178
        assert!((item(&tape, lp) + 0.918_938_533_204_672_7).abs() < 1e-15);

        let g2 = gauss(&mut tape, &[0.4, -1.0], &[0.0, 0.0]);
        let x2 = tape.constant(Tensor::vector(vec![0.4, -1.0]).unwrap());
        let lp2 = g2.log_prob(&mut tape, x2).unwrap();
        assert!((item(&tape, lp2) + 2.0 * 0.918_938_533_204_672_7).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        // Midpoint quadrature over [-12, 12] for N(0.3, e^0.5).
        let (mu, lv) = (0.3, 0.5);
        let n = 24_000;
        let h = 24.0 / n as f64;
        let mut tape = Tape::new();
        let g = gauss(&mut tape, &[mu], &[lv]);
        let xs: Vec<f64> = (0..n).map(|i| -12.0 + (i as f64 + 0.5) * h).collect();
        let x = tape.constant(Tensor::matrix(n, 1, xs).unwrap());
        let lp = g.log_prob(&mut tape, x).unwrap();
        let integral: f64 = tape.value(lp).data().iter().map(|v| v.exp() * h).sum();
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let g0 = gauss(&mut tape, &[0.0], &[0.0]);
        let k0 = g0.kl_to_standard(&mut tape).unwrap();
        assert_eq!(item(&tape, k0), 0.0);

        let g1 = gauss(&mut tape, &[1.0], &[0.0]);
        let k1 = g1.kl_to_standard(&mut tape).unwrap();
        assert!((item(&tape, k1) - 0.5).abs() < 1e-15);

        let wide = gauss(&mut tape, &[0.0], &[4f64.ln()]);
        let kw = g0.kl_between(&mut tape, &wide).unwrap();
        let expected = 0.5 * (0.25 - 1.0 + 4f64.ln());
        assert!((item(&tape, kw) - expected).abs() < 1e-15);
        assert!((item(&tape, kw) - 0.318_147).abs() < 1e-6);
    }

    #[test]
    fn kl_self_is_zero_and_consistent() {
        let mut rng = SeedStream::new(11).rng();
        for _ in 0..50 {
            let mut tape = Tape::new();
            let mu = normal_tensor(&mut rng, &[5]);
            let lv = normal_tensor(&mut rng, &[5]);
            let g = DiagGaussian::from_tensors(&mut tape, mu, lv, false).unwrap();
            let k = g.kl_between(&mut tape, &g).unwrap();
            assert!(item(&tape, k).abs() < 1e-14);
            let std = DiagGaussian::standard(&mut tape, &[5]).unwrap();
            let a = g.kl_between(&mut tape, &std).unwrap();
            let b = g.kl_to_standard(&mut tape).unwrap();
            assert!((item(&tape, a) - item(&tape, b)).abs() < 1e-12);
            assert!(item(&tape, a) >= -1e-12);
        }
    }

    #[test]
    fn log_var_is_clamped() {
        let mut tape = Tape::new();
        let g = gauss(&mut tape, &[0.0, 0.0], &[-30.0, 30.0]);
        assert_eq!(tape.value(g.log_var).data(), &[-10.0, 10.0]);
    }

    #[test]
    fn gradients_pass_check() {
        let mut rng = SeedStream::new(5).rng();
        let pts = vec![
            normal_tensor(&mut rng, &[3, 4]),
            normal_tensor(&mut rng, &[3, 4]),
            normal_tensor(&mut rng, &[3, 4]),
            normal_tensor(&mut rng, &[4]),
            normal_tensor(&mut rng, &[4]),
        ];
        let err = grad_check_many(
            |t, v| {
                let g = DiagGaussian::new(t, v[0], v[1])?;
                let other = DiagGaussian::new(t, v[3], v[4])?;
                let lp = g.log_prob(t, v[2])?;
                let k1 = g.kl_to_standard(t)?;
                let k2 = g.kl_between(t, &other)?;
                let s = t.add(lp, k1)?;
                let s = t.add(s, k2)?;
                t.sum(s)
            },
            &pts,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reparam_moments_match() {
        let n = 100_000;
        let (mu, lv) = (1.5, (0.64f64).ln());
        let mut rng = SeedStream::new(2).rng();
        let mut tape = Tape::new();
        let g = DiagGaussian::from_tensors(
            &mut tape,
            Tensor::filled(vec![n, 1], mu),
            Tensor::filled(vec![n, 1], lv),
            false,
        )
        .unwrap();
        let noise = tape.constant(normal_tensor(&mut rng, &[n, 1]));
        let s = g.sample_reparam(&mut tape, noise).unwrap();
        let d = tape.value(s).data();
        let m = d.iter().sum::<f64>() / n as f64;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let var = lv.exp();
        assert!((m - mu).abs() < 5.0 * (var / n as f64).sqrt());
        // SE of a sample variance for normal data: var * sqrt(2 / (n - 1)).
        assert!((v - var).abs() < 5.0 * var * (2.0 / (n - 1) as f64).sqrt());
    }
}
