//! Training objectives and their reductions.
//!
//! Every objective is assembled as a weighted sum of loss-signed terms
//! (lower is better), so `total == sum_k weight_k * term_k` by construction:
//!
//! | mode             | recon_az | class | club_xa | xz term  | recon_yz |
//! |------------------|----------|-------|---------|----------|----------|
//! | `disgenib`       | 1        | 1     | beta    | 1 + alpha | 1 + alpha |
//! | `disgenib-prior` | 1        |       |         | alpha'   |          |
//! | `cvae`           |          |       |         | alpha'   | 1        |
//! | `avae`           | 1        |       |         | alpha'   |          |
//!
//! with `alpha' = (1 + alpha) / (2 + alpha)`. The xz term is either vCLUB on
//! `(x, z)` or the KL-marginal bound against `N(0, I)`.
//!
//! vCLUB terms read the conditional from a *critic* binding whose parameters
//! are constants on the tape, so their gradient reaches the encoders through
//! the samples only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::DiagGaussian;
use crate::mi::{class_lower_bound, kl_marginal_upper_bound, recon_lower_bound, vclub_from_conditional};
use crate::model::{DisGenModel, ModelDims, PriorTable};
use crate::params::Bound;
use crate::rng::normal_tensor;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Disgenib,
    DisgenibPrior,
    Cvae,
    Avae,
    /// Resolves to `disgenib` with `alpha = 0`, `beta = 1`.
    Disenib,
}

impl Mode {
    pub fn needs_prior(self) -> bool {
        matches!(self, Mode::DisgenibPrior | Mode::Avae)
    }
}

/// Which network plays `q(v | x)` in the vCLUB terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Critic {
    /// Dedicated approximators `club_a` and `club_z`.
    Separate,
    /// The encoders themselves.
    Encoder,
}

/// Which upper bound stands in for `I(X;Z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XzBound {
    /// vCLUB for `disgenib`, KL-marginal for every other mode.
    Auto,
    Vclub,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    /// Spread of the per-class prior `N(a_c, sigma_a^2 I)`.
    pub sigma_a: f64,
    pub approx_steps: usize,
    /// Ablation switch for the `beta` term.
    pub compression: bool,
    /// Ablation switch for the `1 + alpha` terms.
    pub disentangle: bool,
    pub xz_bound: XzBound,
    pub critic: Critic,
    /// Set when the configuration was produced from `disenib`.
    pub disenib: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Disgenib,
            alpha: 1.0,
            beta: 0.5,
            sigma_a: 0.1,
            approx_steps: 1,
            compression: true,
            disentangle: true,
            xz_bound: XzBound::Auto,
            critic: Critic::Separate,
            disenib: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("sigma_a", self.sigma_a)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!(
                    "objective.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.approx_steps == 0 {
            return Err(Error::config("objective.approx_steps must be >= 1"));
        }
        Ok(())
    }

    /// Validated copy with `disenib` expanded.
    pub fn resolve(&self) -> Result<Self> {
        self.validate()?;
        Ok(if self.mode == Mode::Disenib {
            configure_disenib(self)
        } else {
            self.clone()
        })
    }

    pub fn xz_kind(&self) -> XzBound {
        match (self.xz_bound, self.mode) {
            (XzBound::Auto, Mode::Disgenib | Mode::Disenib) => XzBound::Vclub,
            (XzBound::Auto, _) => XzBound::Kl,
            (kind, _) => kind,
        }
    }

    /// Whether training needs approximator steps for `(x, a)` and `(x, z)`.
    pub fn vclub_terms(&self) -> (bool, bool) {
        let disgen = matches!(self.mode, Mode::Disgenib | Mode::Disenib);
        let xa = disgen && self.compression;
        let xz = self.xz_kind() == XzBound::Vclub && (!disgen || self.disentangle);
        (xa, xz)
    }
}

/// `(1 + alpha) / (2 + alpha)`.
pub fn alpha_prime(alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::config(format!("alpha must be >= 0, got {alpha}")));
    }
    if alpha.is_infinite() {
        return Ok(1.0);
    }
    Ok((1.0 + alpha) / (2.0 + alpha))
}

/// The DisGenIB configuration that coincides with DisenIB.
pub fn configure_disenib(cfg: &ObjectiveConfig) -> ObjectiveConfig {
    ObjectiveConfig {
        mode: Mode::Disgenib,
        alpha: 0.0,
        beta: 1.0,
        disenib: true,
        ..cfg.clone()
    }
}

/// Standard-normal reparameterization noise for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub a: Tensor,
    pub z: Tensor,
}

impl Noise {
    pub fn draw<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, dims: &ModelDims) -> Self {
        let a = normal_tensor(rng, &[n, dims.d_a]);
        let z = normal_tensor(rng, &[n, dims.d_z]);
        Self { a, z }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub recon_az: f64,
    pub class_term: f64,
    pub club_xa: f64,
    pub club_xz: f64,
    pub kl_xz: f64,
    pub recon_yz: f64,
}

/// Loss-signed terms of one objective evaluation. Unused terms are 0 with
/// weight 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `-E log q(x | a, z)`.
    pub recon_az: f64,
    /// Cross-entropy of the classifier on `a`.
    pub class_term: f64,
    pub club_xa: f64,
    pub club_xz: f64,
    pub kl_xz: f64,
    /// `-E log q(x | y, z)`.
    pub recon_yz: f64,
    pub weights: TermWeights,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64, f64); 6] {
        let w = &self.weights;
        [
            ("recon_az", self.recon_az, w.recon_az),
            ("class_term", self.class_term, w.class_term),
            ("club_xa", self.club_xa, w.club_xa),
            ("club_xz", self.club_xz, w.club_xz),
            ("kl_xz", self.kl_xz, w.kl_xz),
            ("recon_yz", self.recon_yz, w.recon_yz),
        ]
    }

    /// `sum_k weight_k * term_k`, accumulated in the same order as the tape.
    pub fn recomputed_total(&self) -> f64 {
        let mut total = 0.0;
        for (_, v, w) in self.terms() {
            if w != 0.0 {
                total += w * v;
            }
        }
        total
    }

    /// Row-count weighted average of several breakdowns.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = parts.iter().map(|p| p.1).sum();
        let mut out = LossBreakdown {
            weights: parts.first().map(|p| p.0.weights).unwrap_or_default(),
            ..Default::default()
        };
        if n == 0 {
            return out;
        }
        for (b, k) in parts {
            let f = *k as f64 / n as f64;
            out.total += f * b.total;
            out.recon_az += f * b.recon_az;
            out.class_term += f * b.class_term;
            out.club_xa += f * b.club_xa;
            out.club_xz += f * b.club_xz;
            out.kl_xz += f * b.kl_xz;
            out.recon_yz += f * b.recon_yz;
        }
        out
    }
}

/// Everything an objective reads besides its configuration.
pub struct LossInputs<'a> {
    pub model: &'a DisGenModel,
    /// Trainable binding of the model parameters.
    pub bound: &'a Bound,
    /// Constant binding used as the vCLUB conditional.
    pub critic: &'a Bound,
    pub x: Var,
    pub labels: &'a [usize],
    pub noise: &'a Noise,
    pub priors: Option<&'a PriorTable>,
}

/// Tape output of an objective: the scalar to differentiate plus its terms.
#[derive(Clone, Copy, Debug)]
pub struct Assembled {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn tag(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{component} ({op})"),
        },
        other => other,
    }
}

#[derive(Default)]
struct Terms {
    items: Vec<(&'static str, Var, f64)>,
}

impl Terms {
    fn push(&mut self, name: &'static str, v: Var, w: f64) {
        self.items.push((name, v, w));
    }

    fn finish(self, tape: &mut Tape) -> Result<Assembled> {
        let mut b = LossBreakdown::default();
        let mut total: Option<Var> = None;
        for (name, v, w) in &self.items {
            let value = tape.value(*v).item()?;
            let (slot, wslot) = match *name {
                "recon_az" => (&mut b.recon_az, &mut b.weights.recon_az),
                "class_term" => (&mut b.class_term, &mut b.weights.class_term),
                "club_xa" => (&mut b.club_xa, &mut b.weights.club_xa),
                "club_xz" => (&mut b.club_xz, &mut b.weights.club_xz),
                "kl_xz" => (&mut b.kl_xz, &mut b.weights.kl_xz),
                "recon_yz" => (&mut b.recon_yz, &mut b.weights.recon_yz),
                _ => unreachable!("unknown term {name}"),
            };
            *slot = value;
            *wslot = *w;
        }
        // Accumulate in the canonical order used by `recomputed_total`.
        for (name, _, w) in b.terms() {
            if w == 0.0 {
                continue;
            }
            let v = self
                .items
                .iter()
                .find(|t| t.0 == name)
                .map(|t| t.1)
                .expect("term present");
            let weighted = tape.scale(v, w).map_err(tag(name))?;
            total = Some(match total {
                None => {
                    let zero = tape.constant(Tensor::scalar(0.0)?);
                    tape.add(zero, weighted)?
                }
                Some(t) => tape.add(t, weighted).map_err(tag(name))?,
            });
        }
        let total = match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(0.0)?),
        };
        b.total = tape.value(total).item()?;
        Ok(Assembled { total, breakdown: b })
    }
}

fn check_batch(tape: &Tape, inp: &LossInputs) -> Result<usize> {
    let x = tape.value(inp.x);
    let n = x.outer();
    let dims = &inp.model.dims;
    if x.rank() != 2 || x.last_dim() != dims.d_x {
        return Err(Error::shape(
            "objective",
            format!("batch {:?}, expected width {}", x.shape(), dims.d_x),
        ));
    }
    if inp.labels.len() != n {
        return Err(Error::shape(
            "objective",
            format!("{} labels for {n} rows", inp.labels.len()),
        ));
    }
    if inp.noise.a.shape() != [n, dims.d_a] || inp.noise.z.shape() != [n, dims.d_z] {
        return Err(Error::shape("objective", "noise does not match the batch"));
    }
    Ok(n)
}

fn neg_recon(tape: &mut Tape, inp: &LossInputs, dec: &crate::nn::Mlp, reps: &[Var], name: &'static str) -> Result<Var> {
    let (model, bound) = (inp.model, inp.bound);
    let decoder = |t: &mut Tape, input: Var| -> Result<DiagGaussian> {
        let mean = dec.forward(t, bound, input)?;
        model.recon_gaussian(t, mean)
    };
    let lb = recon_lower_bound(tape, inp.x, reps, &decoder).map_err(tag(name))?;
    tape.neg(lb)
}

fn sample_z(tape: &mut Tape, inp: &LossInputs) -> Result<(DiagGaussian, Var)> {
    let qz = inp.model.encode_z(tape, inp.bound, inp.x).map_err(tag("enc_z"))?;
    let ez = tape.constant(inp.noise.z.clone());
    let z = qz.sample_reparam(tape, ez).map_err(tag("enc_z"))?;
    Ok((qz, z))
}

/// The xz term of `kind` and its name.
/// The vCLUB conditional for `a` (or `z` when `for_z`), read through the
/// constant critic binding.
fn critic_conditional(tape: &mut Tape, inp: &LossInputs, critic: Critic, for_z: bool) -> Result<DiagGaussian> {
    let m = inp.model;
    match (critic, for_z) {
        (Critic::Encoder, false) => m.encode_a(tape, inp.critic, inp.x),
        (Critic::Encoder, true) => m.encode_z(tape, inp.critic, inp.x),
        (Critic::Separate, false) => m.club_a.forward(tape, inp.critic, inp.x),
        (Critic::Separate, true) => m.club_z.forward(tape, inp.critic, inp.x),
    }
}

fn xz_term(
    tape: &mut Tape,
    inp: &LossInputs,
    cfg: &ObjectiveConfig,
    qz: &DiagGaussian,
    z: Var,
) -> Result<(&'static str, Var)> {
    match cfg.xz_kind() {
        XzBound::Vclub => {
            let q = critic_conditional(tape, inp, cfg.critic, true)?;
            let v = vclub_from_conditional(tape, &q, z).map_err(tag("club_xz"))?;
            Ok(("club_xz", v))
        }
        XzBound::Kl | XzBound::Auto => {
            let prior = DiagGaussian::standard(tape, &[inp.model.dims.d_z])?;
            let v = kl_marginal_upper_bound(tape, qz, &prior).map_err(tag("kl_xz"))?;
            Ok(("kl_xz", v))
        }
    }
}

/// Full objective: reconstruction, classification, compression and
/// disentanglement terms.
pub fn loss_disgenib(tape: &mut Tape, inp: &LossInputs, cfg: &ObjectiveConfig) -> Result<Assembled> {
    check_batch(tape, inp)?;
    let model = inp.model;
    let mut terms = Terms::default();

    let qa = model.encode_a(tape, inp.bound, inp.x).map_err(tag("enc_a"))?;
    let ea = tape.constant(inp.noise.a.clone());
    let a = qa.sample_reparam(tape, ea).map_err(tag("enc_a"))?;
    let (qz, z) = sample_z(tape, inp)?;

    let r = neg_recon(tape, inp, &model.dec_az, &[a, z], "recon_az")?;
    terms.push("recon_az", r, 1.0);

    let bound = inp.bound;
    let cls = class_lower_bound(tape, a, inp.labels, |t, a| model.classify(t, bound, a)).map_err(tag("class_term"))?;
    let cls = tape.neg(cls)?;
    terms.push("class_term", cls, 1.0);

    if cfg.compression {
        let q = critic_conditional(tape, inp, cfg.critic, false)?;
        let v = vclub_from_conditional(tape, &q, a).map_err(tag("club_xa"))?;
        terms.push("club_xa", v, cfg.beta);
    }
    if cfg.disentangle {
        let w = 1.0 + cfg.alpha;
        let (name, v) = xz_term(tape, inp, cfg, &qz, z)?;
        terms.push(name, v, w);
        let e = model.embed_labels(tape, inp.bound, inp.labels)?;
        let r = neg_recon(tape, inp, &model.dec_yz, &[e, z], "recon_yz")?;
        terms.push("recon_yz", r, w);
    }
    terms.finish(tape)
}

fn require_priors<'a>(inp: &LossInputs<'a>) -> Result<&'a PriorTable> {
    let p = inp
        .priors
        .ok_or_else(|| Error::contract("this objective needs a prior table"))?;
    if p.dim() != inp.model.dims.d_a {
        return Err(Error::shape(
            "objective",
            format!("prior width {} vs d_A {}", p.dim(), inp.model.dims.d_a),
        ));
    }
    Ok(p)
}

/// `A ~ N(a_y, sigma_A^2 I)` from the prior; reconstruction plus the
/// `alpha'`-weighted xz bound.
pub fn loss_disgenib_prior(tape: &mut Tape, inp: &LossInputs, cfg: &ObjectiveConfig) -> Result<Assembled> {
    check_batch(tape, inp)?;
    let priors = require_priors(inp)?;
    let a = tape.constant(priors.sample(inp.labels, &inp.noise.a)?);
    let (qz, z) = sample_z(tape, inp)?;
    let mut terms = Terms::default();
    let r = neg_recon(tape, inp, &inp.model.dec_az, &[a, z], "recon_az")?;
    terms.push("recon_az", r, 1.0);
    let (name, v) = xz_term(tape, inp, cfg, &qz, z)?;
    terms.push(name, v, alpha_prime(cfg.alpha)?);
    terms.finish(tape)
}

/// Conditional VAE: the `(y, z)` decoder with `A := label_embed(y)` and the
/// `alpha'`-weighted xz bound.
pub fn loss_cvae(tape: &mut Tape, inp: &LossInputs, cfg: &ObjectiveConfig) -> Result<Assembled> {
    check_batch(tape, inp)?;
    let (qz, z) = sample_z(tape, inp)?;
    let e = inp.model.embed_labels(tape, inp.bound, inp.labels)?;
    let mut terms = Terms::default();
    let r = neg_recon(tape, inp, &inp.model.dec_yz, &[e, z], "recon_yz")?;
    terms.push("recon_yz", r, 1.0);
    let (name, v) = xz_term(tape, inp, cfg, &qz, z)?;
    terms.push(name, v, alpha_prime(cfg.alpha)?);
    terms.finish(tape)
}

/// Attribute-conditioned VAE: `A` is the class attribute row itself.
pub fn loss_avae(tape: &mut Tape, inp: &LossInputs, cfg: &ObjectiveConfig) -> Result<Assembled> {
    check_batch(tape, inp)?;
    let priors = require_priors(inp)?;
    let table = tape.constant(priors.attributes().clone());
    if let Some(&bad) = inp.labels.iter().find(|&&y| y >= priors.classes()) {
        return Err(Error::contract(format!("no prior for class {bad}")));
    }
    let a = tape.gather_rows(table, inp.labels)?;
    let (qz, z) = sample_z(tape, inp)?;
    let mut terms = Terms::default();
    let r = neg_recon(tape, inp, &inp.model.dec_az, &[a, z], "recon_az")?;
    terms.push("recon_az", r, 1.0);
    let (name, v) = xz_term(tape, inp, cfg, &qz, z)?;
    terms.push(name, v, alpha_prime(cfg.alpha)?);
    terms.finish(tape)
}

/// Dispatches on `cfg.mode`, expanding `disenib` first.
pub fn objective(tape: &mut Tape, inp: &LossInputs, cfg: &ObjectiveConfig) -> Result<Assembled> {
    let cfg = cfg.resolve()?;
    match cfg.mode {
        Mode::Disgenib | Mode::Disenib => loss_disgenib(tape, inp, &cfg),
        Mode::DisgenibPrior => loss_disgenib_prior(tape, inp, &cfg),
        Mode::Cvae => loss_cvae(tape, inp, &cfg),
        Mode::Avae => loss_avae(tape, inp, &cfg),
    }
}

/// Evaluates the objective on a plain batch without gradients.
pub fn evaluate(
    model: &DisGenModel,
    x: &Tensor,
    labels: &[usize],
    noise: &Noise,
    priors: Option<&PriorTable>,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let inp = LossInputs {
        model,
        bound: &bound,
        critic: &bound,
        x: xv,
        labels,
        noise,
        priors,
    };
    Ok(objective(&mut tape, &inp, cfg)?.breakdown)
}

/// vCLUB estimate of `I(X;Z)` minus the `(y, z)` reconstruction bound: the
/// quantity the disentanglement term minimizes, as a loss-signed value.
pub fn iyz_surrogate(model: &DisGenModel, x: &Tensor, labels: &[usize], noise: &Noise) -> Result<f64> {
    let cfg = ObjectiveConfig {
        compression: false,
        xz_bound: XzBound::Vclub,
        alpha: 0.0,
        ..ObjectiveConfig::default()
    };
    let b = evaluate(model, x, labels, noise, None, &cfg)?;
    Ok(b.club_xz + b.recon_yz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::rng::SeedStream;

    fn dims() -> ModelDims {
        ModelDims {
            d_x: 3,
            d_a: 2,
            d_z: 2,
            hidden: 3,
            depth: 1,
            classes: 3,
        }
    }

    struct Fixture {
        model: DisGenModel,
        x: Tensor,
        labels: Vec<usize>,
        noise: Noise,
        priors: PriorTable,
    }

    fn fixture(seed: u64, n: usize) -> Fixture {
        let model = DisGenModel::init(dims(), 0.7, seed).unwrap();
        let mut rng = SeedStream::new(seed).substream("batch").rng();
        let x = normal_tensor(&mut rng, &[n, 3]);
        let labels = (0..n).map(|i| i % 3).collect();
        let noise = Noise::draw(&mut rng, n, &model.dims);
        let priors = PriorTable::new(normal_tensor(&mut rng, &[3, 2]), 0.3).unwrap();
        Fixture {
            model,
            x,
            labels,
            noise,
            priors,
        }
    }

    fn eval(f: &Fixture, cfg: &ObjectiveConfig) -> LossBreakdown {
        evaluate(&f.model, &f.x, &f.labels, &f.noise, Some(&f.priors), cfg).unwrap()
    }

    #[test]
    fn alpha_prime_values() {
        assert_eq!(alpha_prime(0.0).unwrap(), 0.5);
        assert_eq!(alpha_prime(1.0).unwrap(), 2.0 / 3.0);
        assert!(matches!(alpha_prime(-0.1), Err(Error::Config(_))));
        assert!(alpha_prime(1e12).unwrap() < 1.0);
    }

    #[test]
    fn totals_match_recomputation_in_every_mode() {
        let f = fixture(1, 6);
        for mode in [
            Mode::Disgenib,
            Mode::DisgenibPrior,
            Mode::Cvae,
            Mode::Avae,
            Mode::Disenib,
        ] {
            for xz in [XzBound::Auto, XzBound::Vclub, XzBound::Kl] {
                let cfg = ObjectiveConfig {
                    mode,
                    xz_bound: xz,
                    ..Default::default()
                };
                let b = eval(&f, &cfg);
                assert!((b.total - b.recomputed_total()).abs() < 1e-10, "{mode:?} {xz:?}");
                assert!(b.total.is_finite());
            }
        }
    }

    #[test]
    fn disgenib_weights() {
        let f = fixture(2, 6);
        let cfg = ObjectiveConfig {
            alpha: 2.0,
            beta: 0.25,
            ..Default::default()
        };
        let b = eval(&f, &cfg);
        let w = b.weights;
        assert_eq!((w.recon_az, w.class_term, w.club_xa), (1.0, 1.0, 0.25));
        assert_eq!((w.club_xz, w.kl_xz, w.recon_yz), (3.0, 0.0, 3.0));

        let ablated = eval(
            &f,
            &ObjectiveConfig {
                compression: false,
                disentangle: false,
                ..cfg
            },
        );
        assert_eq!(ablated.club_xa, 0.0);
        assert_eq!(ablated.weights.recon_yz, 0.0);
        assert!((ablated.total - (b.recon_az + b.class_term)).abs() < 1e-12);
    }

    #[test]
    fn disenib_resolves() {
        let cfg = ObjectiveConfig {
            mode: Mode::Disenib,
            alpha: 3.0,
            beta: 0.1,
            ..Default::default()
        };
        let r = cfg.resolve().unwrap();
        assert_eq!((r.mode, r.alpha, r.beta, r.disenib), (Mode::Disgenib, 0.0, 1.0, true));
        assert_eq!(alpha_prime(r.alpha).unwrap(), 0.5);
    }

    #[test]
    fn prior_with_zero_spread_equals_avae() {
        let mut f = fixture(3, 8);
        f.priors = f.priors.with_sigma(0.0).unwrap();
        for alpha in [0.0, 1.0, 4.0] {
            let p = eval(
                &f,
                &ObjectiveConfig {
                    mode: Mode::DisgenibPrior,
                    alpha,
                    ..Default::default()
                },
            );
            let a = eval(
                &f,
                &ObjectiveConfig {
                    mode: Mode::Avae,
                    alpha,
                    ..Default::default()
                },
            );
            assert_eq!(p, a);
        }
    }

    #[test]
    fn missing_prior_is_contract_error() {
        let f = fixture(4, 4);
        let cfg = ObjectiveConfig {
            mode: Mode::DisgenibPrior,
            ..Default::default()
        };
        let err = evaluate(&f.model, &f.x, &f.labels, &f.noise, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let short = PriorTable::new(Tensor::zeros(vec![2, 2]), 0.1).unwrap();
        let err = evaluate(&f.model, &f.x, &f.labels, &f.noise, Some(&short), &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn cvae_gives_enc_a_exactly_zero_gradient() {
        let f = fixture(5, 4);
        let mut tape = Tape::new();
        let bound = f.model.bind(&mut tape);
        let critic = f.model.store.bind_frozen(&mut tape);
        let x = tape.constant(f.x.clone());
        let inp = LossInputs {
            model: &f.model,
            bound: &bound,
            critic: &critic,
            x,
            labels: &f.labels,
            noise: &f.noise,
            priors: None,
        };
        let cfg = ObjectiveConfig {
            mode: Mode::Cvae,
            ..Default::default()
        };
        let out = objective(&mut tape, &inp, &cfg).unwrap();
        let grads = tape.backward(out.total).unwrap();
        for id in f.model.enc_a_ids() {
            assert!(grads.wrt(bound.var(id)).data().iter().all(|&g| g == 0.0));
        }
        let touched: f64 = f
            .model
            .enc_z_ids()
            .iter()
            .flat_map(|&id| grads.wrt(bound.var(id)).into_data())
            .map(|g| g * g)
            .sum();
        assert!(touched > 0.0);
    }

    #[test]
    fn single_class_batch_is_accepted() {
        let mut f = fixture(6, 4);
        f.labels = vec![1; 4];
        let b = eval(&f, &ObjectiveConfig::default());
        assert!(b.class_term.is_finite());
    }

    #[test]
    fn non_finite_input_names_component() {
        let f = fixture(7, 4);
        let mut model = f.model.clone();
        let id = model.dec_az.layers().last().unwrap().weight;
        let w = model.store.get(id).map(|_| 1e200).unwrap();
        model.store.set(id, w).unwrap();
        let err = evaluate(&model, &f.x, &f.labels, &f.noise, None, &ObjectiveConfig::default()).unwrap_err();
        match err {
            Error::NonFinite { op } => assert!(op.starts_with("recon_az"), "{op}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_objective_passes_grad_check() {
        let f = fixture(8, 4);
        let snapshot = f.model.store.clone();
        let points: Vec<Tensor> = f.model.store.iter().map(|(_, t)| t.clone()).collect();
        for mode in [Mode::Disgenib, Mode::DisgenibPrior, Mode::Cvae, Mode::Avae] {
            for xz in [XzBound::Vclub, XzBound::Kl] {
                let cfg = ObjectiveConfig {
                    mode,
                    xz_bound: xz,
                    ..Default::default()
                };
                let err = grad_check_many(
                    |tape, vars| {
                        let bound = Bound::from_vars(vars.to_vec());
                        let critic = snapshot.bind_frozen(tape);
                        let x = tape.constant(f.x.clone());
                        let inp = LossInputs {
                            model: &f.model,
                            bound: &bound,
                            critic: &critic,
                            x,
                            labels: &f.labels,
                            noise: &f.noise,
                            priors: Some(&f.priors),
                        };
                        Ok(objective(tape, &inp, &cfg)?.total)
                    },
                    &points,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{mode:?} {xz:?}: {err}");
            }
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: ObjectiveConfig = serde_json::from_str(r#"{"mode":"disgenib-prior","alpha":2}"#).unwrap();
        assert_eq!(ok.mode, Mode::DisgenibPrior);
        assert_eq!(ok.beta, 0.5);
        assert!(serde_json::from_str::<ObjectiveConfig>(r#"{"alpah":2}"#).is_err());
    }
}
