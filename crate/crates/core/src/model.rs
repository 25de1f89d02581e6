//! The five networks: two Gaussian encoders, two decoders and a classifier.
//!
//! ```text
//!            enc_a ──► A ──► classifier ──► logits over base classes
//!   x ──┤                 ╲
//!            enc_z ──► Z ──► dec_az(A ⊕ Z) ──► x̂
//!                        ╲
//!          label_embed(y) ──► dec_yz(e_y ⊕ Z) ──► x̂
//! ```
//!
//! Decoders predict the mean of `x`; the log-variance is the fixed
//! `2 ln sigma_rec`, so reconstruction log-likelihood is a scaled squared
//! error plus a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::DiagGaussian;
use crate::nn::{init_bound, GaussianMlp, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeedStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_x: usize,
    pub d_a: usize,
    pub d_z: usize,
    pub hidden: usize,
    /// Number of hidden layers in every network.
    pub depth: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let ModelDims {
            d_x,
            d_a,
            d_z,
            hidden,
            depth,
            classes,
        } = *self;
        if [d_x, d_a, d_z, hidden, depth, classes].contains(&0) {
            return Err(Error::config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn hidden_layers(&self) -> Vec<usize> {
        vec![self.hidden; self.depth]
    }
}

/// Per-class label-related priors `N(a_c, sigma_A^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTable {
    attributes: Tensor,
    sigma: f64,
}

impl PriorTable {
    pub fn new(attributes: Tensor, sigma: f64) -> Result<Self> {
        if attributes.rank() != 2 || attributes.outer() == 0 {
            return Err(Error::shape(
                "prior_table",
                "attributes must be a nonempty [C, d_A] matrix",
            ));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::config(format!(
                "prior spread must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(Self { attributes, sigma })
    }

    pub fn classes(&self) -> usize {
        self.attributes.outer()
    }

    pub fn dim(&self) -> usize {
        self.attributes.last_dim()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.attributes.clone(), sigma)
    }

    /// Rows `a_{y_i} + sigma * noise_i`, as a constant `[n, d_A]` tensor.
    pub fn sample(&self, labels: &[usize], noise: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if noise.shape() != [labels.len(), d] {
            return Err(Error::shape(
                "prior_sample",
                format!("noise {:?} for {} labels of width {d}", noise.shape(), labels.len()),
            ));
        }
        let mut out = Vec::with_capacity(labels.len() * d);
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.classes() {
                return Err(Error::contract(format!(
                    "no prior for class {y} (table has {} rows)",
                    self.classes()
                )));
            }
            out.extend(
                self.attributes
                    .row(y)
                    .iter()
                    .zip(noise.row(i))
                    .map(|(a, e)| a + self.sigma * e),
            );
        }
        Tensor::matrix(labels.len(), d, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisGenModel {
    pub dims: ModelDims,
    pub sigma_rec: f64,
    pub store: ParamStore,
    pub enc_a: GaussianMlp,
    pub enc_z: GaussianMlp,
    pub dec_az: Mlp,
    pub dec_yz: Mlp,
    pub classifier: Mlp,
    pub label_embed: ParamId,
    /// Separate vCLUB approximators `q(a | x)` and `q(z | x)`.
    pub club_a: GaussianMlp,
    pub club_z: GaussianMlp,
}

impl DisGenModel {
    pub fn init(dims: ModelDims, sigma_rec: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        if !(sigma_rec > 0.0) || !sigma_rec.is_finite() {
            return Err(Error::config(format!("sigma_rec must be positive, got {sigma_rec}")));
        }
        let mut rng = SeedStream::new(seed).substream("init").rng();
        let mut store = ParamStore::new();
        let hidden = dims.hidden_layers();
        let enc_a = GaussianMlp::new(&mut store, &mut rng, "enc_a", dims.d_x, &hidden, dims.d_a)?;
        let enc_z = GaussianMlp::new(&mut store, &mut rng, "enc_z", dims.d_x, &hidden, dims.d_z)?;
        let dec_sizes: Vec<usize> = std::iter::once(dims.d_a + dims.d_z)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(dims.d_x))
            .collect();
        let dec_az = Mlp::new(&mut store, &mut rng, "dec_az", &dec_sizes)?;
        let dec_yz = Mlp::new(&mut store, &mut rng, "dec_yz", &dec_sizes)?;
        let cls_sizes: Vec<usize> = std::iter::once(dims.d_a)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(dims.classes))
            .collect();
        let classifier = Mlp::new(&mut store, &mut rng, "classifier", &cls_sizes)?;
        let bound = init_bound(1);
        let embed: Vec<f64> = (0..dims.classes * dims.d_a)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound))
            .collect();
        let label_embed = store.insert("label_embed", Tensor::matrix(dims.classes, dims.d_a, embed)?);
        let club_a = GaussianMlp::new(&mut store, &mut rng, "club_a", dims.d_x, &hidden, dims.d_a)?;
        let club_z = GaussianMlp::new(&mut store, &mut rng, "club_z", dims.d_x, &hidden, dims.d_z)?;
        Ok(Self {
            dims,
            sigma_rec,
            store,
            enc_a,
            enc_z,
            dec_az,
            dec_yz,
            classifier,
            label_embed,
            club_a,
            club_z,
        })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// the architecture implied by `dims` exactly.
    pub fn from_store(dims: ModelDims, sigma_rec: f64, store: ParamStore) -> Result<Self> {
        let mut model = Self::init(dims, sigma_rec, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::shape(
                "model_load",
                format!("expected {} tensors, got {}", model.store.len(), store.len()),
            ));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = store
                .find(&name)
                .ok_or_else(|| Error::shape("model_load", format!("missing tensor {name}")))?;
            model.store.set(id, store.get(src).clone())?;
        }
        Ok(model)
    }

    pub fn enc_a_ids(&self) -> Vec<ParamId> {
        self.enc_a.param_ids()
    }

    pub fn enc_z_ids(&self) -> Vec<ParamId> {
        self.enc_z.param_ids()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn club_ids(&self) -> Vec<ParamId> {
        let mut ids = self.club_a.param_ids();
        ids.extend(self.club_z.param_ids());
        ids
    }

    /// Everything except the separate approximators.
    pub fn main_ids(&self) -> Vec<ParamId> {
        let club = self.club_ids();
        self.store.ids().filter(|id| !club.contains(id)).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind_all(tape)
    }

    fn check_width(tape: &Tape, v: Var, width: usize, op: &'static str) -> Result<()> {
        let t = tape.value(v);
        if t.rank() != 2 || t.last_dim() != width {
            return Err(Error::shape(
                op,
                format!("input {:?}, expected width {width}", t.shape()),
            ));
        }
        Ok(())
    }

    pub fn encode_a(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<DiagGaussian> {
        Self::check_width(tape, x, self.dims.d_x, "encode_a")?;
        self.enc_a.forward(tape, bound, x)
    }

    pub fn encode_z(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<DiagGaussian> {
        Self::check_width(tape, x, self.dims.d_x, "encode_z")?;
        self.enc_z.forward(tape, bound, x)
    }

    /// Gaussian over `x` with the given mean and the fixed reconstruction scale.
    pub fn recon_gaussian(&self, tape: &mut Tape, mean: Var) -> Result<DiagGaussian> {
        let lv = 2.0 * self.sigma_rec.ln();
        let log_var = tape.constant(Tensor::filled(tape.shape(mean).to_vec(), lv));
        DiagGaussian::new(tape, mean, log_var)
    }

    /// Mean of `x` given `(a, z)` through `dec_az`.
    pub fn decode_az_mean(&self, tape: &mut Tape, bound: &Bound, a: Var, z: Var) -> Result<Var> {
        Self::check_width(tape, a, self.dims.d_a, "decode_az")?;
        Self::check_width(tape, z, self.dims.d_z, "decode_az")?;
        let input = tape.concat(&[a, z])?;
        self.dec_az.forward(tape, bound, input)
    }

    pub fn decode_az(&self, tape: &mut Tape, bound: &Bound, a: Var, z: Var) -> Result<DiagGaussian> {
        let mean = self.decode_az_mean(tape, bound, a, z)?;
        self.recon_gaussian(tape, mean)
    }

    /// Label embedding rows for `labels`.
    pub fn embed_labels(&self, tape: &mut Tape, bound: &Bound, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.dims.classes) {
            return Err(Error::contract(format!(
                "unknown label {bad} (model has {} classes)",
                self.dims.classes
            )));
        }
        tape.gather_rows(bound.var(self.label_embed), labels)
    }

    /// `dec_yz` applied to an already-embedded label and `z`.
    pub fn decode_embedded(&self, tape: &mut Tape, bound: &Bound, e: Var, z: Var) -> Result<DiagGaussian> {
        Self::check_width(tape, e, self.dims.d_a, "decode_yz")?;
        Self::check_width(tape, z, self.dims.d_z, "decode_yz")?;
        let input = tape.concat(&[e, z])?;
        let mean = self.dec_yz.forward(tape, bound, input)?;
        self.recon_gaussian(tape, mean)
    }

    pub fn decode_yz(&self, tape: &mut Tape, bound: &Bound, labels: &[usize], z: Var) -> Result<DiagGaussian> {
        let e = self.embed_labels(tape, bound, labels)?;
        self.decode_embedded(tape, bound, e, z)
    }

    pub fn classify(&self, tape: &mut Tape, bound: &Bound, a: Var) -> Result<Var> {
        Self::check_width(tape, a, self.dims.d_a, "classify")?;
        self.classifier.forward(tape, bound, a)
    }

    /// Encoder means and log-variances for a plain feature matrix (no gradients).
    pub fn encode_tensors(&self, x: &Tensor) -> Result<Encoded> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let ga = self.encode_a(&mut tape, &bound, xv)?;
        let gz = self.encode_z(&mut tape, &bound, xv)?;
        Ok(Encoded {
            a_mu: tape.value(ga.mu).clone(),
            a_log_var: tape.value(ga.log_var).clone(),
            z_mu: tape.value(gz.mu).clone(),
            z_log_var: tape.value(gz.log_var).clone(),
        })
    }

    /// `dec_az` means for plain `(a, z)` matrices (no gradients).
    pub fn decode_az_tensors(&self, a: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let av = tape.constant(a.clone());
        let zv = tape.constant(z.clone());
        let mean = self.decode_az_mean(&mut tape, &bound, av, zv)?;
        Ok(tape.value(mean).clone())
    }

    pub fn classify_tensors(&self, a: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let av = tape.constant(a.clone());
        let logits = self.classify(&mut tape, &bound, av)?;
        Ok(tape.value(logits).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub a_mu: Tensor,
    pub a_log_var: Tensor,
    pub z_mu: Tensor,
    pub z_log_var: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{LOG_VAR_MAX, LOG_VAR_MIN};
    use crate::rng::normal_tensor;

    fn dims() -> ModelDims {
        ModelDims {
            d_x: 32,
            d_a: 4,
            d_z: 3,
            hidden: 64,
            depth: 2,
            classes: 5,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = DisGenModel::init(dims(), 0.5, 3).unwrap();
        let b = DisGenModel::init(dims(), 0.5, 3).unwrap();
        assert_eq!(a.store, b.store);
        let c = DisGenModel::init(dims(), 0.5, 4).unwrap();
        assert_ne!(a.store, c.store);
        let w = a.store.get(a.enc_a.mlp().layers()[0].weight);
        assert_eq!(w.shape(), &[32, 64]);
        assert_eq!(a.dec_az.in_dim(), 7);
        assert_eq!(a.dec_yz.in_dim(), 7);
        assert_eq!(a.classifier.out_dim(), 5);
        assert!(a.store.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn first_layer_weight_magnitude_matches_uniform_mean() {
        // |U(-b, b)| has mean b / 2.
        let m = DisGenModel::init(dims(), 0.5, 0).unwrap();
        let w = m.store.get(m.enc_a.mlp().layers()[0].weight);
        let mean_abs = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.numel() as f64;
        let expected = init_bound(32) / 2.0;
        assert!((mean_abs - expected).abs() < 0.1 * expected, "{mean_abs} vs {expected}");
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut d = dims();
        d.d_a = 0;
        assert!(matches!(DisGenModel::init(d, 0.5, 0), Err(Error::Config(_))));
        assert!(matches!(DisGenModel::init(dims(), 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn encoders_are_row_independent_and_clamped() {
        let m = DisGenModel::init(dims(), 0.5, 1).unwrap();
        let mut rng = SeedStream::new(2).rng();
        let x = normal_tensor(&mut rng, &[8, 32]);
        let full = m.encode_tensors(&x).unwrap();
        for i in [0, 5] {
            let one = m.encode_tensors(&x.select_rows(&[i]).unwrap()).unwrap();
            assert_eq!(one.a_mu.data(), full.a_mu.row(i));
            assert_eq!(one.z_log_var.data(), full.z_log_var.row(i));
        }
        for t in [&full.a_log_var, &full.z_log_var] {
            assert!(t.data().iter().all(|v| (LOG_VAR_MIN..=LOG_VAR_MAX).contains(v)));
        }
        let bad = normal_tensor(&mut rng, &[2, 31]);
        assert!(matches!(m.encode_tensors(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_reach_every_encoder_layer() {
        let m = DisGenModel::init(dims(), 0.5, 1).unwrap();
        let mut rng = SeedStream::new(3).rng();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.constant(normal_tensor(&mut rng, &[4, 32]));
        let ga = m.encode_a(&mut tape, &bound, x).unwrap();
        let gz = m.encode_z(&mut tape, &bound, x).unwrap();
        let w = tape.constant(normal_tensor(&mut rng, &[4, 4]));
        let s1 = tape.mul(ga.mu, w).unwrap();
        let s1 = tape.sum(s1).unwrap();
        let s2 = tape.sum(ga.log_var).unwrap();
        let s3 = tape.square(gz.mu).unwrap();
        let s3 = tape.sum(s3).unwrap();
        let s4 = tape.sum(gz.log_var).unwrap();
        let s = tape.add(s1, s2).unwrap();
        let s = tape.add(s, s3).unwrap();
        let s = tape.add(s, s4).unwrap();
        let grads = tape.backward(s).unwrap();
        for id in m.enc_a_ids().into_iter().chain(m.enc_z_ids()) {
            let g = grads.wrt(bound.var(id));
            let norm: f64 = g.data().iter().map(|v| v * v).sum();
            // Output biases of the log-variance head get gradient through tanh
            // only, still nonzero.
            assert!(norm > 0.0, "{} has zero gradient", m.store.name(id));
        }
    }

    #[test]
    fn decoders_and_classifier() {
        let m = DisGenModel::init(dims(), 0.5, 1).unwrap();
        let mut rng = SeedStream::new(4).rng();
        let z = normal_tensor(&mut rng, &[1, 3]);
        let a1 = normal_tensor(&mut rng, &[1, 4]);
        let a2 = normal_tensor(&mut rng, &[1, 4]);
        let x1 = m.decode_az_tensors(&a1, &z).unwrap();
        let x2 = m.decode_az_tensors(&a2, &z).unwrap();
        assert_eq!(x1.shape(), &[1, 32]);
        assert_ne!(x1, x2);

        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let g = m.decode_yz(&mut tape, &bound, &[2], zv).unwrap();
        assert_eq!(tape.shape(g.mu), &[1, 32]);
        assert!((tape.value(g.log_var).data()[0] - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            m.decode_yz(&mut tape, &bound, &[5], zv),
            Err(Error::Contract(_))
        ));

        let logits = m.classify_tensors(&normal_tensor(&mut rng, &[6, 4])).unwrap();
        assert_eq!(logits.shape(), &[6, 5]);
        for i in 0..6 {
            let row = logits.row(i);
            let mx = row.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - mx).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn from_store_round_trips() {
        let m = DisGenModel::init(dims(), 0.5, 9).unwrap();
        let back = DisGenModel::from_store(dims(), 0.5, m.store.clone()).unwrap();
        assert_eq!(back, m);
        let mut other = dims();
        other.hidden = 8;
        assert!(DisGenModel::from_store(other, 0.5, m.store.clone()).is_err());
    }

    #[test]
    fn prior_sampling() {
        let attrs = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let p = PriorTable::new(attrs, 0.0).unwrap();
        let noise = Tensor::from_rows(&[vec![3.0, 3.0], vec![-2.0, 1.0]]).unwrap();
        let s = p.sample(&[1, 0], &noise).unwrap();
        assert_eq!(s.data(), &[-1.0, 0.5, 1.0, 2.0]);
        assert!(matches!(p.sample(&[2, 0], &noise), Err(Error::Contract(_))));
        assert!(PriorTable::new(Tensor::zeros(vec![2, 2]), -1.0).is_err());
    }
}
