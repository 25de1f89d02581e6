//! Tanh MLPs and Gaussian heads over a [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::{soft_clamp_log_var, DiagGaussian};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Half-width of the uniform initializer: `sqrt(3 / fan_in)`, i.e. unit
/// variance times `1 / fan_in`.
pub fn init_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = init_bound(fan_in);
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.insert(format!("{name}.weight"), Tensor::from_parts(vec![fan_in, fan_out], w));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.weight))?;
        tape.add(h, bound.var(self.bias))
    }
}

/// Fully connected network with tanh between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width from input to output.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("{name}: invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let width = tape.value(x).last_dim();
        if tape.value(x).rank() != 2 || width != self.in_dim() {
            return Err(Error::shape(
                "mlp",
                format!("input {:?}, expected width {}", tape.shape(x), self.in_dim()),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// MLP whose output is split into a mean and a soft-clamped log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMlp {
    mlp: Mlp,
    dim: usize,
}

impl GaussianMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        dim: usize,
    ) -> Result<Self> {
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * dim);
        Ok(Self {
            mlp: Mlp::new(store, rng, name, &sizes)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.param_ids()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<DiagGaussian> {
        let out = self.mlp.forward(tape, bound, x)?;
        let mu = tape.slice(out, 0, self.dim)?;
        let raw = tape.slice(out, self.dim, 2 * self.dim)?;
        let log_var = soft_clamp_log_var(tape, raw)?;
        DiagGaussian::new(tape, mu, log_var)
    }
}
