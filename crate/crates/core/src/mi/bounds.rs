use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{DiagGaussian, HALF_LOG_2PI};
use crate::nn::GaussianMlp;
use crate::optim::OptState;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    LowerBound,
    UpperBound,
    Exact,
}

/// An MI value in nats, labelled with what it is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub value: f64,
    pub kind: BoundKind,
    pub estimator: String,
}

impl MIEstimate {
    pub fn upper(value: f64, estimator: &str) -> Self {
        Self {
            value,
            kind: BoundKind::UpperBound,
            estimator: estimator.into(),
        }
    }

    pub fn lower(value: f64, estimator: &str) -> Self {
        Self {
            value,
            kind: BoundKind::LowerBound,
            estimator: estimator.into(),
        }
    }

    pub fn exact(value: f64, estimator: &str) -> Self {
        Self {
            value,
            kind: BoundKind::Exact,
            estimator: estimator.into(),
        }
    }
}

/// MI of a bivariate Gaussian with correlation `rho`: `-0.5 ln(1 - rho^2)`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// A network mapping an input batch to a batch of Gaussians.
pub trait ConditionalGaussian {
    fn condition(&self, tape: &mut Tape, input: Var) -> Result<DiagGaussian>;
}

impl<F> ConditionalGaussian for F
where
    F: Fn(&mut Tape, Var) -> Result<DiagGaussian>,
{
    fn condition(&self, tape: &mut Tape, input: Var) -> Result<DiagGaussian> {
        self(tape, input)
    }
}

/// Batch mean of `log q(x | reps)`; the entropy of `x` is dropped.
pub fn recon_lower_bound(tape: &mut Tape, x: Var, reps: &[Var], decoder: &impl ConditionalGaussian) -> Result<Var> {
    if tape.value(x).outer() == 0 {
        return Err(Error::contract("recon_lower_bound needs a nonempty batch"));
    }
    let input = if reps.len() == 1 { reps[0] } else { tape.concat(reps)? };
    let q = decoder.condition(tape, input)?;
    if tape.shape(q.mu) != tape.shape(x) {
        return Err(Error::shape(
            "recon_lower_bound",
            format!("decoder gives {:?}, data is {:?}", tape.shape(q.mu), tape.shape(x)),
        ));
    }
    let lp = q.log_prob(tape, x)?;
    tape.mean(lp)
}

/// Batch mean of `log softmax(classifier(a))[label]`, i.e. minus the
/// cross-entropy; the label entropy is dropped.
pub fn class_lower_bound(
    tape: &mut Tape,
    a: Var,
    labels: &[usize],
    classifier: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let logits = classifier(tape, a)?;
    let xent = tape.softmax_cross_entropy(logits, labels)?;
    let m = tape.mean(xent)?;
    tape.neg(m)
}

/// vCLUB from the conditional `q(. | x_i)` already evaluated on the batch
/// and the paired samples `v`:
///
/// `(1/N) sum_i log q(v_i|x_i) - (1/N^2) sum_{i,j} log q(v_j|x_i)`.
///
/// The all-pairs term is computed in `O(N d)` using
/// `(1/N) sum_j (v_j - mu_i)^2 = var(v) + (mean(v) - mu_i)^2` per dimension.
pub fn vclub_from_conditional(tape: &mut Tape, q: &DiagGaussian, v: Var) -> Result<Var> {
    let n = tape.value(v).outer();
    if tape.value(v).rank() != 2 || n < 2 {
        return Err(Error::contract(format!(
            "vCLUB needs a batch of at least 2 pairs, got shape {:?}",
            tape.shape(v)
        )));
    }
    if tape.shape(q.mu) != tape.shape(v) {
        return Err(Error::shape(
            "vclub",
            format!("approximator {:?} vs samples {:?}", tape.shape(q.mu), tape.shape(v)),
        ));
    }
    let positive = q.log_prob(tape, v)?;
    let positive = tape.mean(positive)?;

    let v_mean = tape.mean_rows(v)?;
    let centered = tape.sub(v, v_mean)?;
    let centered_sq = tape.square(centered)?;
    let v_var = tape.mean_rows(centered_sq)?;
    let offset = tape.sub(q.mu, v_mean)?;
    let offset_sq = tape.square(offset)?;
    let spread = tape.add(offset_sq, v_var)?;
    let neg_lv = tape.neg(q.log_var)?;
    let precision = tape.exp(neg_lv)?;
    let maha = tape.mul(spread, precision)?;
    let per_dim = tape.add(maha, q.log_var)?;
    let per_dim = tape.scale(per_dim, -0.5)?;
    let per_dim = tape.add_scalar(per_dim, -HALF_LOG_2PI)?;
    let per_row = tape.sum_last(per_dim)?;
    let negative = tape.mean(per_row)?;

    tape.sub(positive, negative)
}

/// vCLUB upper bound on `I(X; V)` with `approximator` as `q(v | x)`.
pub fn vclub_upper_bound(tape: &mut Tape, x: Var, v: Var, approximator: &impl ConditionalGaussian) -> Result<Var> {
    let q = approximator.condition(tape, x)?;
    vclub_from_conditional(tape, &q, v)
}

/// `I(X;Z) <= E_x KL(p(z|x) || r(z))`, as a batch mean.
pub fn kl_marginal_upper_bound(tape: &mut Tape, encoded: &DiagGaussian, prior: &DiagGaussian) -> Result<Var> {
    let kl = encoded.kl_between(tape, prior)?;
    tape.mean(kl)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LlStep {
    /// Negative log-likelihood before the update.
    pub nll: f64,
    pub grad_norm: f64,
}

/// One Adam step maximizing `sum_i log q(v_i | x_i)` over the parameters of `net`.
pub fn approximator_ll_step(
    store: &mut ParamStore,
    net: &GaussianMlp,
    x: &Tensor,
    v: &Tensor,
    opt: &mut OptState,
) -> Result<LlStep> {
    if x.outer() == 0 || x.outer() != v.outer() {
        return Err(Error::contract(format!(
            "approximator step needs matching nonempty batches, got {} and {}",
            x.outer(),
            v.outer()
        )));
    }
    let ids = net.param_ids();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |id| ids.contains(&id));
    let xv = tape.constant(x.clone());
    let vv = tape.constant(v.clone());
    let q = net.forward(&mut tape, &bound, xv)?;
    let lp = q.log_prob(&mut tape, vv)?;
    let mean_lp = tape.mean(lp)?;
    let nll = tape.neg(mean_lp)?;
    let nll_value = tape.value(nll).item()?;
    let grads = tape.backward(nll)?;
    let pg = bound.grads(&grads, opt.ids());
    let grad_norm = pg.norm();
    opt.step(store, &pg)?;
    Ok(LlStep {
        nll: nll_value,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::normal_log_density;
    use crate::gradcheck::grad_check_many;
    use crate::optim::AdamConfig;
    use crate::rng::{normal_tensor, standard_normal, SeedStream};

    fn constant_gaussian(mu: Vec<f64>, lv: Vec<f64>) -> impl Fn(&mut Tape, Var) -> Result<DiagGaussian> {
        move |tape: &mut Tape, input: Var| {
            let n = tape.value(input).outer();
            let d = mu.len();
            let m: Vec<f64> = (0..n).flat_map(|_| mu.iter().copied()).collect();
            let l: Vec<f64> = (0..n).flat_map(|_| lv.iter().copied()).collect();
            DiagGaussian::from_tensors(
                tape,
                Tensor::matrix(n, d, m).unwrap(),
                Tensor::matrix(n, d, l).unwrap(),
                false,
            )
        }
    }

    #[test]
    fn recon_bound_with_mean_decoder() {
        let xs = vec![0.5, -1.0, 2.0, 0.1];
        let mean = xs.iter().sum::<f64>() / 4.0;
        let expected = xs.iter().map(|&x| normal_log_density(x, mean, 0.0)).sum::<f64>() / 4.0;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 1, xs).unwrap());
        let reps = tape.constant(Tensor::zeros(vec![4, 3]));
        let dec = constant_gaussian(vec![mean], vec![0.0]);
        let b = recon_lower_bound(&mut tape, x, &[reps], &dec).unwrap();
        assert!((tape.value(b).item().unwrap() - expected).abs() < 1e-14);
        let again = recon_lower_bound(&mut tape, x, &[reps], &dec).unwrap();
        assert_eq!(tape.value(b).data(), tape.value(again).data());
    }

    #[test]
    fn recon_bound_with_perfect_decoder() {
        let lv = (1e-4f64).ln();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 1, vec![0.3, -0.2, 1.7]).unwrap());
        let dec = move |tape: &mut Tape, input: Var| {
            let lvs = tape.constant(Tensor::filled(vec![3, 1], lv));
            DiagGaussian::new(tape, input, lvs)
        };
        let b = recon_lower_bound(&mut tape, x, &[x], &dec).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 1e-4).ln();
        assert!((tape.value(b).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn class_bound_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![3, 5]));
        let b = class_lower_bound(&mut tape, a, &[0, 4, 2], |_, a| Ok(a)).unwrap();
        assert!((tape.value(b).item().unwrap() + 5f64.ln()).abs() < 1e-15);

        let sharp = tape.constant(Tensor::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]).unwrap());
        let b = class_lower_bound(&mut tape, sharp, &[0, 1], |_, a| Ok(a)).unwrap();
        let v = tape.value(b).item().unwrap();
        assert!(v <= 0.0 && v > -1e-20);

        // Hand-computed scalar softmax oracle.
        let mut rng = SeedStream::new(0).rng();
        let logits = normal_tensor(&mut rng, &[4, 3]);
        let labels = [2, 0, 1, 1];
        let expected = (0..4)
            .map(|i| {
                let row = logits.row(i);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                (row[labels[i]].exp() / z).ln()
            })
            .sum::<f64>()
            / 4.0;
        let l = tape.constant(logits);
        let b = class_lower_bound(&mut tape, l, &labels, |_, a| Ok(a)).unwrap();
        assert!((tape.value(b).item().unwrap() - expected).abs() < 1e-14);

        assert!(matches!(
            class_lower_bound(&mut tape, l, &[0, 0, 0, 3], |_, a| Ok(a)),
            Err(Error::Contract(_))
        ));
    }

    /// Direct O(N^2 d) evaluation of the vCLUB formula.
    fn brute_force_vclub(mu: &Tensor, lv: &Tensor, v: &Tensor) -> f64 {
        let n = v.outer();
        let d = v.last_dim();
        let lq = |i: usize, j: usize| -> f64 {
            (0..d)
                .map(|k| normal_log_density(v.row(j)[k], mu.row(i)[k], lv.row(i)[k]))
                .sum()
        };
        let pos = (0..n).map(|i| lq(i, i)).sum::<f64>() / n as f64;
        let neg = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| lq(i, j))
            .sum::<f64>()
            / (n * n) as f64;
        pos - neg
    }

    #[test]
    fn vclub_matches_all_pairs_formula() {
        let mut rng = SeedStream::new(3).rng();
        for n in [2, 5, 17] {
            let mu = normal_tensor(&mut rng, &[n, 3]);
            let lv = normal_tensor(&mut rng, &[n, 3]);
            let v = normal_tensor(&mut rng, &[n, 3]);
            let expected = brute_force_vclub(&mu, &lv, &v);
            let mut tape = Tape::new();
            let q = DiagGaussian::from_tensors(&mut tape, mu, lv, false).unwrap();
            let vv = tape.constant(v);
            let c = vclub_from_conditional(&mut tape, &q, vv).unwrap();
            let got = tape.value(c).item().unwrap();
            assert!(
                (got - expected).abs() < 1e-10 * expected.abs().max(1.0),
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn vclub_degenerate_cases() {
        let mut rng = SeedStream::new(4).rng();
        let mut tape = Tape::new();
        let x = tape.constant(normal_tensor(&mut rng, &[8, 2]));
        let v = tape.constant(normal_tensor(&mut rng, &[8, 2]));
        let indep = constant_gaussian(vec![0.3, -0.1], vec![0.2, -0.4]);
        let c = vclub_upper_bound(&mut tape, x, v, &indep).unwrap();
        assert!(tape.value(c).item().unwrap().abs() < 1e-12);

        let same = tape.constant(Tensor::filled(vec![6, 2], 0.7));
        let dep = |tape: &mut Tape, input: Var| {
            let lv = tape.constant(Tensor::filled(vec![6, 2], -0.5));
            DiagGaussian::new(tape, input, lv)
        };
        let c = vclub_upper_bound(&mut tape, same, same, &dep).unwrap();
        assert!(tape.value(c).item().unwrap().abs() < 1e-12);

        let one = tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            vclub_upper_bound(&mut tape, one, one, &indep),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn vclub_of_true_conditional_matches_closed_form() {
        // With q(v|x) = N(rho x, 1 - rho^2) on standard bivariate Gaussian data,
        // E[vCLUB] = rho^2 / (1 - rho^2) (up to the O(1/N) diagonal term).
        let rho: f64 = 0.8;
        let n = 4000;
        let mut rng = SeedStream::new(9).rng();
        let mut xs = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            xs.push(x);
            vs.push(rho * x + (1.0 - rho * rho).sqrt() * standard_normal(&mut rng));
        }
        let lv = (1.0 - rho * rho).ln();
        let mut tape = Tape::new();
        let q = DiagGaussian::from_tensors(
            &mut tape,
            Tensor::matrix(n, 1, xs.iter().map(|x| rho * x).collect()).unwrap(),
            Tensor::filled(vec![n, 1], lv),
            false,
        )
        .unwrap();
        let v = tape.constant(Tensor::matrix(n, 1, vs).unwrap());
        let c = vclub_from_conditional(&mut tape, &q, v).unwrap();
        let got = tape.value(c).item().unwrap();
        let expected = rho * rho / (1.0 - rho * rho);
        assert!((got - expected).abs() < 0.15, "{got} vs {expected}");
        assert!(got > gaussian_mi(rho));
    }

    #[test]
    fn kl_marginal_examples() {
        let mut tape = Tape::new();
        let prior = DiagGaussian::standard(&mut tape, &[2]).unwrap();
        let collapsed = DiagGaussian::standard(&mut tape, &[4, 2]).unwrap();
        let k = kl_marginal_upper_bound(&mut tape, &collapsed, &prior).unwrap();
        assert_eq!(tape.value(k).item().unwrap(), 0.0);

        let prior1 = DiagGaussian::standard(&mut tape, &[1]).unwrap();
        let one = DiagGaussian::from_tensors(
            &mut tape,
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            false,
        )
        .unwrap();
        let k = kl_marginal_upper_bound(&mut tape, &one, &prior1).unwrap();
        assert!((tape.value(k).item().unwrap() - 0.5).abs() < 1e-15);

        let bad = DiagGaussian::standard(&mut tape, &[3]).unwrap();
        assert!(kl_marginal_upper_bound(&mut tape, &collapsed, &bad).is_err());
    }

    /// Exact I(X;Z) for X uniform over `means.len()` points and
    /// Z | X = i ~ N(means[i], exp(lvs[i])), by quadrature over Z.
    fn quantized_mi(means: &[f64], lvs: &[f64]) -> f64 {
        let k = means.len() as f64;
        let (lo, hi, steps) = (-25.0, 25.0, 100_000);
        let h = (hi - lo) / steps as f64;
        let mut mi = 0.0;
        for s in 0..steps {
            let z = lo + (s as f64 + 0.5) * h;
            let conds: Vec<f64> = means
                .iter()
                .zip(lvs)
                .map(|(&m, &l)| normal_log_density(z, m, l).exp())
                .collect();
            let marg = conds.iter().sum::<f64>() / k;
            for c in conds {
                if c > 0.0 && marg > 0.0 {
                    mi += h * (c / k) * (c / marg).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn kl_marginal_dominates_quantized_mi() {
        let mut rng = SeedStream::new(21).rng();
        for _ in 0..5 {
            let k = 4;
            let means: Vec<f64> = (0..k).map(|_| 2.0 * standard_normal(&mut rng)).collect();
            let lvs: Vec<f64> = (0..k).map(|_| 0.5 * standard_normal(&mut rng)).collect();
            let exact = quantized_mi(&means, &lvs);
            let mut tape = Tape::new();
            let enc = DiagGaussian::from_tensors(
                &mut tape,
                Tensor::matrix(k, 1, means.clone()).unwrap(),
                Tensor::matrix(k, 1, lvs.clone()).unwrap(),
                false,
            )
            .unwrap();
            let prior = DiagGaussian::standard(&mut tape, &[1]).unwrap();
            let kl = kl_marginal_upper_bound(&mut tape, &enc, &prior).unwrap();
            let bound = tape.value(kl).item().unwrap();
            assert!(bound >= exact - 1e-9, "{bound} < {exact}");
            assert!(exact >= 0.0 && exact <= (k as f64).ln() + 1e-9);
        }
    }

    #[test]
    fn bound_gradients_pass_check() {
        let mut rng = SeedStream::new(8).rng();
        let pts = vec![
            normal_tensor(&mut rng, &[4, 2]),
            normal_tensor(&mut rng, &[4, 2]),
            normal_tensor(&mut rng, &[4, 2]),
            normal_tensor(&mut rng, &[4, 3]),
        ];
        let err = grad_check_many(
            |t, v| {
                let q = DiagGaussian::new(t, v[0], v[1])?;
                let club = vclub_from_conditional(t, &q, v[2])?;
                let prior = DiagGaussian::standard(t, &[2])?;
                let kl = kl_marginal_upper_bound(t, &q, &prior)?;
                let cls = class_lower_bound(t, v[3], &[0, 2, 1, 1], |_, a| Ok(a))?;
                let dec = |t: &mut Tape, input: Var| {
                    let mu = t.slice(input, 0, 2)?;
                    let lv = t.slice(input, 2, 4)?;
                    DiagGaussian::new(t, mu, lv)
                };
                let rec = recon_lower_bound(t, v[2], &[v[0], v[1]], &dec)?;
                let s = t.add(club, kl)?;
                let s = t.add(s, cls)?;
                t.add(s, rec)
            },
            &pts,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn linear_gaussian_pairs(n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = SeedStream::new(seed).rng();
        let xs: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let vs: Vec<f64> = xs
            .iter()
            .map(|x| 0.7 * x + 0.3 + 0.5 * standard_normal(&mut rng))
            .collect();
        (Tensor::matrix(n, 1, xs).unwrap(), Tensor::matrix(n, 1, vs).unwrap())
    }

    #[test]
    fn approximator_steps_decrease_nll() {
        let (x, v) = linear_gaussian_pairs(256, 1);
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(0).rng();
        let net = GaussianMlp::new(&mut store, &mut rng, "q", 1, &[8], 1).unwrap();
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut opt = OptState::new(cfg, &store, &net.param_ids());
        let trace: Vec<f64> = (0..60)
            .map(|_| approximator_ll_step(&mut store, &net, &x, &v, &mut opt).unwrap().nll)
            .collect();
        assert!(trace.windows(2).all(|w| w[1] < w[0]), "{trace:?}");
    }

    #[test]
    fn approximator_step_is_deterministic() {
        let (x, v) = linear_gaussian_pairs(64, 2);
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = SeedStream::new(5).rng();
            let net = GaussianMlp::new(&mut store, &mut rng, "q", 1, &[4], 1).unwrap();
            let mut opt = OptState::new(AdamConfig::default(), &store, &net.param_ids());
            for _ in 0..5 {
                approximator_ll_step(&mut store, &net, &x, &v, &mut opt).unwrap();
            }
            store
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fitted_approximator_is_stationary() {
        // A single-layer head (no hidden layer) whose weights are zero and whose
        // biases equal the MLE of v: mean 0 and log-variance log(mean(v^2)).
        let xs = vec![1.0, 1.0, -1.0, -1.0];
        let vs = vec![1.0, -1.0, -1.0, 1.0];
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(0).rng();
        let net = GaussianMlp::new(&mut store, &mut rng, "q", 1, &[], 1).unwrap();
        let layer = &net.mlp().layers()[0];
        store.set(layer.weight, Tensor::zeros(vec![1, 2])).unwrap();
        // soft clamp: 10 tanh(raw / 10) = 0 for raw = 0, matching log var(v) = ln 1.
        store.set(layer.bias, Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        // x is orthogonal to v and to v^2 - 1, so the weight gradient vanishes too.
        let x = Tensor::matrix(4, 1, xs).unwrap();
        let v = Tensor::matrix(4, 1, vs).unwrap();
        let mut opt = OptState::new(AdamConfig::default(), &store, &net.param_ids());
        let step = approximator_ll_step(&mut store, &net, &x, &v, &mut opt).unwrap();
        assert!(step.grad_norm < 1e-6, "{}", step.grad_norm);
    }
}
