//! Built-in verification suites, run in a fixed order with fixed seeds.
//!
//! Every suite returns a [`SuiteReport`]; a failing suite carries the first
//! failing case as JSON.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;
use crate::gauss::{normal_log_density, DiagGaussian};
use crate::gradcheck::grad_check_many;
use crate::mi::{
    approximator_ll_step, chain_identity_residual, gaussian_mi, lemma2_slack, vclub_from_conditional, DiscreteJoint,
};
use crate::model::{DisGenModel, ModelDims, PriorTable};
use crate::nn::GaussianMlp;
use crate::objective::{evaluate, objective, Critic, LossInputs, Mode, Noise, ObjectiveConfig, XzBound};
use crate::optim::{AdamConfig, OptState};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal_tensor, standard_normal, Rng64, SeedStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Deliberate defects used to confirm that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Adds the all-pairs term of vCLUB instead of subtracting it.
    VclubNegativeSign,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest error or smallest margin seen, in the suite's own units.
    pub worst: f64,
    pub failing_case: Option<Value>,
    pub seconds: f64,
}

struct Suite {
    name: &'static str,
    cases: usize,
    worst: f64,
    failing_case: Option<Value>,
}

impl Suite {
    fn new(name: &'static str, worst: f64) -> Self {
        Self {
            name,
            cases: 0,
            worst,
            failing_case: None,
        }
    }

    fn record(&mut self, ok: bool, case: impl FnOnce() -> Value) {
        self.cases += 1;
        if !ok && self.failing_case.is_none() {
            self.failing_case = Some(case());
        }
    }

    fn finish(self, start: Instant) -> SuiteReport {
        SuiteReport {
            name: self.name,
            passed: self.failing_case.is_none(),
            cases: self.cases,
            worst: self.worst,
            failing_case: self.failing_case,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

type GradFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One finite-difference case per primitive: the primitive's output is
/// contracted with fixed weights so every output coordinate matters.
pub fn primitive_grad_cases(seed: u64) -> Vec<(&'static str, GradFn, Vec<Tensor>)> {
    let mut rng = SeedStream::new(seed).substream("primitives").rng();
    let mut g = |shape: &[usize]| normal_tensor(&mut rng, shape);
    let w43 = g(&[4, 3]);
    let w4 = g(&[4]);
    let w3 = g(&[3]);
    let w45 = g(&[4, 5]);
    let w42 = g(&[4, 2]);
    fn contract(t: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
        let wv = t.constant(w.clone());
        let p = t.mul(out, wv)?;
        t.sum(p)
    }
    let positive = g(&[4, 3]).map(|v| 0.5 + v.abs()).expect("finite");
    let away_from_kink = g(&[4, 3])
        .map(|v| if v.abs() < 0.1 { v + 0.3 } else { v })
        .expect("finite");
    let unary = |f: fn(&mut Tape, Var) -> Result<Var>, w: Tensor| -> GradFn {
        Box::new(move |t, v| {
            let o = f(t, v[0])?;
            contract(t, o, &w)
        })
    };
    let mut cases: Vec<(&'static str, GradFn, Vec<Tensor>)> = Vec::new();
    {
        let w = w42.clone();
        cases.push((
            "matmul",
            Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                contract(t, o, &w)
            }),
            vec![g(&[4, 3]), g(&[3, 2])],
        ));
    }
    for (name, f) in [
        ("add", Tape::add as fn(&mut Tape, Var, Var) -> Result<Var>),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
    ] {
        let w = w43.clone();
        cases.push((
            name,
            Box::new(move |t, v| {
                let o = f(t, v[0], v[1])?;
                contract(t, o, &w)
            }),
            vec![g(&[4, 3]), g(&[4, 3])],
        ));
        let w = w43.clone();
        cases.push((
            name,
            Box::new(move |t, v| {
                let o = f(t, v[0], v[1])?;
                contract(t, o, &w)
            }),
            vec![g(&[4, 3]), g(&[3])],
        ));
    }
    cases.push(("scale", unary(|t, a| t.scale(a, -1.7), w43.clone()), vec![g(&[4, 3])]));
    cases.push((
        "add_scalar",
        unary(|t, a| t.add_scalar(a, 0.4), w43.clone()),
        vec![g(&[4, 3])],
    ));
    cases.push(("tanh", unary(Tape::tanh, w43.clone()), vec![g(&[4, 3])]));
    cases.push(("relu", unary(Tape::relu, w43.clone()), vec![away_from_kink]));
    cases.push(("exp", unary(Tape::exp, w43.clone()), vec![g(&[4, 3])]));
    cases.push(("log", unary(Tape::log, w43.clone()), vec![positive]));
    cases.push(("square", unary(Tape::square, w43.clone()), vec![g(&[4, 3])]));
    cases.push((
        "sum",
        Box::new(|t, v| {
            let s = t.square(v[0])?;
            t.sum(s)
        }),
        vec![g(&[4, 3])],
    ));
    cases.push((
        "mean",
        Box::new(|t, v| {
            let s = t.tanh(v[0])?;
            t.mean(s)
        }),
        vec![g(&[4, 3])],
    ));
    cases.push(("sum_axis", unary(|t, a| t.sum_axis(a, 0), w3.clone()), vec![g(&[4, 3])]));
    cases.push(("sum_axis", unary(|t, a| t.sum_axis(a, 1), w4.clone()), vec![g(&[4, 3])]));
    {
        let w = w45.clone();
        cases.push((
            "concat",
            Box::new(move |t, v| {
                let o = t.concat(&[v[0], v[1]])?;
                contract(t, o, &w)
            }),
            vec![g(&[4, 3]), g(&[4, 2])],
        ));
    }
    cases.push(("slice", unary(|t, a| t.slice(a, 1, 3), w42.clone()), vec![g(&[4, 3])]));
    cases.push(("log_sum_exp", unary(Tape::log_sum_exp, w4.clone()), vec![g(&[4, 3])]));
    cases.push((
        "softmax_cross_entropy",
        unary(|t, a| t.softmax_cross_entropy(a, &[2, 0, 1, 1]), w4.clone()),
        vec![g(&[4, 3])],
    ));
    cases.push((
        "gather_rows",
        unary(|t, a| t.gather_rows(a, &[1, 0, 1, 1]), w43.clone()),
        vec![g(&[2, 3])],
    ));
    let spread = g(&[4, 3]).map(|v| 2.0 * v).expect("finite");
    let spread = spread
        .map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v })
        .expect("finite");
    cases.push(("clamp", unary(|t, a| t.clamp(a, -1.0, 1.0), w43.clone()), vec![spread]));
    cases
}

fn objective_dims() -> ModelDims {
    ModelDims {
        d_x: 3,
        d_a: 2,
        d_z: 2,
        hidden: 3,
        depth: 1,
        classes: 3,
    }
}

/// Every mode, xz bound and critic on a 4-row batch, as `(label, worst error)`.
pub fn objective_grad_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let model = DisGenModel::init(objective_dims(), 0.7, seed)?;
    let mut rng = SeedStream::new(seed).substream("objective batch").rng();
    let x = normal_tensor(&mut rng, &[4, 3]);
    let labels = vec![0, 2, 1, 1];
    let noise = Noise::draw(&mut rng, 4, &model.dims);
    let priors = PriorTable::new(normal_tensor(&mut rng, &[3, 2]), 0.3)?;
    let points: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let mut out = Vec::new();
    for mode in [
        Mode::Disgenib,
        Mode::DisgenibPrior,
        Mode::Cvae,
        Mode::Avae,
        Mode::Disenib,
    ] {
        for xz in [XzBound::Vclub, XzBound::Kl] {
            for critic in [Critic::Separate, Critic::Encoder] {
                let cfg = ObjectiveConfig {
                    mode,
                    xz_bound: xz,
                    critic,
                    ..ObjectiveConfig::default()
                };
                let err = grad_check_many(
                    |tape, vars| {
                        let bound = Bound::from_vars(vars.to_vec());
                        let frozen = model.store.bind_frozen(tape);
                        let xv = tape.constant(x.clone());
                        let inp = LossInputs {
                            model: &model,
                            bound: &bound,
                            critic: &frozen,
                            x: xv,
                            labels: &labels,
                            noise: &noise,
                            priors: Some(&priors),
                        };
                        Ok(objective(tape, &inp, &cfg)?.total)
                    },
                    &points,
                    1e-5,
                )?;
                out.push((format!("{mode:?}/{xz:?}/{critic:?}"), err));
            }
        }
    }
    Ok(out)
}

fn suite_gradients() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut s = Suite::new("gradients", 0.0);
    for (name, f, pts) in primitive_grad_cases(11) {
        let err = grad_check_many(f, &pts, 1e-5)?;
        s.worst = s.worst.max(err);
        s.record(err < 1e-4, || json!({"primitive": name, "max_rel_error": err}));
    }
    for (label, err) in objective_grad_errors(12)? {
        s.worst = s.worst.max(err);
        s.record(err < 1e-4, || json!({"objective": label, "max_rel_error": err}));
    }
    Ok(s.finish(start))
}

fn random_gaussian(rng: &mut Rng64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mu = (0..d).map(|_| standard_normal(rng)).collect();
    let lv = (0..d).map(|_| 0.8 * standard_normal(rng)).collect();
    (mu, lv)
}

fn closed_form_kl(tape: &mut Tape, p: &(Vec<f64>, Vec<f64>), q: Option<&(Vec<f64>, Vec<f64>)>) -> Result<f64> {
    let gp = DiagGaussian::from_tensors(tape, Tensor::vector(p.0.clone())?, Tensor::vector(p.1.clone())?, false)?;
    let k = match q {
        Some(q) => {
            let gq =
                DiagGaussian::from_tensors(tape, Tensor::vector(q.0.clone())?, Tensor::vector(q.1.clone())?, false)?;
            gp.kl_between(tape, &gq)?
        }
        None => gp.kl_to_standard(tape)?,
    };
    tape.value(k).item()
}

/// Monte-Carlo `E_p[log p - log q]` and its standard error.
pub fn monte_carlo_kl(
    p: &(Vec<f64>, Vec<f64>),
    q: &(Vec<f64>, Vec<f64>),
    samples: usize,
    rng: &mut Rng64,
) -> (f64, f64) {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut lr = 0.0;
        for k in 0..p.0.len() {
            let x = p.0[k] + (0.5 * p.1[k]).exp() * standard_normal(rng);
            lr += normal_log_density(x, p.0[k], p.1[k]) - normal_log_density(x, q.0[k], q.1[k]);
        }
        sum += lr;
        sum_sq += lr * lr;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

fn suite_gaussian_kl() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut s = Suite::new("gaussian_kl", 0.0);
    let mut rng = SeedStream::new(21).substream("kl").rng();
    for case in 0..10 {
        let d = 1 + case % 3;
        let p = random_gaussian(&mut rng, d);
        let q = random_gaussian(&mut rng, d);
        let std = (vec![0.0; d], vec![0.0; d]);
        let mut tape = Tape::new();
        for (which, target, closed) in [
            ("kl_to_standard", &std, closed_form_kl(&mut tape, &p, None)?),
            ("kl_between", &q, closed_form_kl(&mut tape, &p, Some(&q))?),
        ] {
            let (mc, se) = monte_carlo_kl(&p, target, 200_000, &mut rng);
            let z = (closed - mc).abs() / se.max(1e-12);
            s.worst = s.worst.max(z);
            s.record(
                z < 4.0,
                || json!({"case": case, "which": which, "closed": closed, "mc": mc, "se": se}),
            );
        }
    }
    Ok(s.finish(start))
}

fn random_weights(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..1.0)).collect()
}

/// A table over `(X, Y, Z)` built as `P(X) P(Y|X) P(Z|X)`.
pub fn random_markov_joint(rng: &mut Rng64) -> Result<DiscreteJoint> {
    let (nx, ny, nz) = (rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4));
    let px = random_weights(rng, nx);
    let py: Vec<Vec<f64>> = (0..nx).map(|_| random_weights(rng, ny)).collect();
    let pz: Vec<Vec<f64>> = (0..nx).map(|_| random_weights(rng, nz)).collect();
    let mut w = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        let sy: f64 = py[x].iter().sum();
        let sz: f64 = pz[x].iter().sum();
        for y in 0..ny {
            for z in 0..nz {
                w.push(px[x] * py[x][y] / sy * pz[x][z] / sz);
            }
        }
    }
    DiscreteJoint::from_weights(vec![nx, ny, nz], w)
}

/// A table over `(Y, A, Z)` with `Y = f(A)` for a random surjection `f`.
pub fn random_function_joint(rng: &mut Rng64) -> Result<DiscreteJoint> {
    let na = rng.gen_range(2..=4);
    let ny = rng.gen_range(1..=na);
    let nz = rng.gen_range(2..=4);
    let f: Vec<usize> = (0..na).map(|a| if a < ny { a } else { rng.gen_range(0..ny) }).collect();
    let paz = random_weights(rng, na * nz);
    let mut w = vec![0.0; ny * na * nz];
    for a in 0..na {
        for z in 0..nz {
            w[(f[a] * na + a) * nz + z] = paz[a * nz + z];
        }
    }
    DiscreteJoint::from_weights(vec![ny, na, nz], w)
}

fn suite_chain_identity() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut s = Suite::new("chain_identity", 0.0);
    let mut rng = SeedStream::new(31).substream("chain").rng();
    for case in 0..20 {
        let j = random_markov_joint(&mut rng)?;
        let r = chain_identity_residual(&j)?;
        s.worst = s.worst.max(r);
        s.record(
            r < 1e-12,
            || json!({"case": case, "dims": j.dims(), "probs": j.probs(), "residual": r}),
        );
    }
    Ok(s.finish(start))
}

fn suite_lemma2() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut s = Suite::new("lemma2", f64::INFINITY);
    let mut rng = SeedStream::new(41).substream("lemma2").rng();
    for case in 0..20 {
        let j = random_function_joint(&mut rng)?;
        let slack = lemma2_slack(&j)?;
        s.worst = s.worst.min(slack);
        s.record(
            slack >= -1e-12,
            || json!({"case": case, "dims": j.dims(), "probs": j.probs(), "slack": slack}),
        );
    }
    Ok(s.finish(start))
}

/// Draws `n` pairs of a standard bivariate Gaussian with correlation `rho`.
pub fn gaussian_pairs(rho: f64, n: usize, rng: &mut Rng64) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let s = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let x = standard_normal(rng);
        xs.push(x);
        vs.push(rho * x + s * standard_normal(rng));
    }
    Ok((Tensor::matrix(n, 1, xs)?, Tensor::matrix(n, 1, vs)?))
}

/// Trains a linear-Gaussian approximator `q(v | x)` by maximum likelihood
/// for `steps` Adam steps on fresh batches, then returns the vCLUB estimate
/// on a fresh batch of `batch` pairs.
pub fn vclub_gaussian_estimate(
    rho: f64,
    steps: usize,
    batch: usize,
    seed: u64,
    mutation: Option<Mutation>,
) -> Result<f64> {
    let stream = SeedStream::new(seed).substream("vclub gaussian");
    let mut store = ParamStore::new();
    let net = GaussianMlp::new(&mut store, &mut stream.substream("init").rng(), "q", 1, &[], 1)?;
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let mut opt = OptState::new(adam, &store, &net.param_ids());
    let mut rng = stream.substream("pairs").rng();
    for _ in 0..steps {
        let (x, v) = gaussian_pairs(rho, batch, &mut rng)?;
        approximator_ll_step(&mut store, &net, &x, &v, &mut opt)?;
    }
    let (x, v) = gaussian_pairs(rho, batch, &mut rng)?;
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let vv = tape.constant(v);
    let q = net.forward(&mut tape, &bound, xv)?;
    let club = vclub_from_conditional(&mut tape, &q, vv)?;
    let club = tape.value(club).item()?;
    Ok(match mutation {
        None => club,
        Some(Mutation::VclubNegativeSign) => {
            let lp = q.log_prob(&mut tape, vv)?;
            let positive = tape.value(lp).data().iter().sum::<f64>() / batch as f64;
            // positive - negative = club, so positive + negative = 2 positive - club.
            2.0 * positive - club
        }
    })
}

/// Limit of vCLUB with the true conditional: `rho^2 / (1 - rho^2)`.
pub fn gaussian_club_limit(rho: f64) -> f64 {
    rho * rho / (1.0 - rho * rho)
}

fn suite_vclub_gaussian(mutation: Option<Mutation>) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut s = Suite::new("vclub_gaussian", f64::INFINITY);
    for rho in [0.5, 0.8, 0.9] {
        let mi = gaussian_mi(rho);
        let limit = gaussian_club_limit(rho);
        for seed in 0..3 {
            let est = vclub_gaussian_estimate(rho, 1000, 512, seed, mutation)?;
            let margin = est - (mi - 0.05);
            s.worst = s.worst.min(margin);
            let near = (est - limit).abs() <= 0.25 * (1.0 + limit);
            s.record(
                margin >= 0.0 && near,
                || json!({"rho": rho, "seed": seed, "estimate": est, "mi": mi, "club_limit": limit}),
            );
        }
    }
    Ok(s.finish(start))
}

fn suite_reductions() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut s = Suite::new("reductions", 0.0);
    let dims = objective_dims();
    for case in 0..20u64 {
        let model = DisGenModel::init(dims, 0.6, 100 + case)?;
        let mut rng = SeedStream::new(case).substream("reductions").rng();
        let n = 4 + (case as usize % 5);
        let x = normal_tensor(&mut rng, &[n, 3]);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let noise = Noise::draw(&mut rng, n, &dims);
        let priors = PriorTable::new(normal_tensor(&mut rng, &[3, 2]), 0.0)?;
        let alpha = rng.gen_range(0.0..3.0);
        let cfg = |mode| ObjectiveConfig {
            mode,
            alpha,
            ..ObjectiveConfig::default()
        };
        let p = evaluate(&model, &x, &labels, &noise, Some(&priors), &cfg(Mode::DisgenibPrior))?;
        let a = evaluate(&model, &x, &labels, &noise, Some(&priors), &cfg(Mode::Avae))?;
        let diff = (p.total - a.total).abs();
        s.worst = s.worst.max(diff);
        s.record(
            diff < 1e-10,
            || json!({"case": case, "prior_total": p.total, "avae_total": a.total}),
        );
    }
    let r = ObjectiveConfig {
        mode: Mode::Disenib,
        ..ObjectiveConfig::default()
    }
    .resolve()?;
    s.record(
        r.alpha == 0.0 && r.beta == 1.0,
        || json!({"disenib_resolved": [r.alpha, r.beta]}),
    );
    Ok(s.finish(start))
}

/// Runs every suite in order. `mutation` injects a known defect.
pub fn run_selfcheck(mutation: Option<Mutation>) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        suite_gradients()?,
        suite_gaussian_kl()?,
        suite_chain_identity()?,
        suite_lemma2()?,
        suite_vclub_gaussian(mutation)?,
        suite_reductions()?,
    ])
}
