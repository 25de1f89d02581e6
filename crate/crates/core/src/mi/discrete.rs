use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability table over up to three finite alphabets, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    dims: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let joint = Self { dims, probs };
        joint.validate()?;
        Ok(joint)
    }

    /// Normalizes non-negative weights into a table.
    pub fn from_weights(dims: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::contract("weights must be non-negative with a positive sum"));
        }
        Self::new(dims, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() > 3 || self.dims.contains(&0) {
            return Err(Error::contract(format!("invalid alphabet sizes {:?}", self.dims)));
        }
        let n: usize = self.dims.iter().product();
        if n != self.probs.len() {
            return Err(Error::contract(format!(
                "table has {} entries, alphabets need {n}",
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract("negative or non-finite probability"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, coords: &[usize]) -> f64 {
        self.probs[self.flat(coords)]
    }

    fn flat(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.dims).fold(0, |acc, (c, d)| acc * d + c)
    }

    fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for k in (0..self.dims.len()).rev() {
            out[k] = flat % self.dims[k];
            flat /= self.dims[k];
        }
        out
    }

    /// Marginal table over `vars` (in the given order).
    pub fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let size: usize = vars.iter().map(|&v| self.dims[v]).product();
        let mut out = vec![0.0; size];
        for (i, &p) in self.probs.iter().enumerate() {
            out[self.key(&self.coords(i), vars)] += p;
        }
        out
    }

    fn key(&self, coords: &[usize], vars: &[usize]) -> usize {
        vars.iter().fold(0, |acc, &v| acc * self.dims[v] + coords[v])
    }
}

/// Exact `I(U;V)` in nats, where `U` and `V` are tuples of variable indices.
pub fn discrete_mi(joint: &DiscreteJoint, u: &[usize], v: &[usize]) -> Result<f64> {
    joint.validate()?;
    let nvars = joint.dims.len();
    let bad = |s: &[usize]| s.is_empty() || s.iter().any(|&i| i >= nvars);
    if bad(u) || bad(v) || u.iter().any(|i| v.contains(i)) {
        return Err(Error::contract(format!("invalid variable split {u:?} / {v:?}")));
    }
    let both: Vec<usize> = u.iter().chain(v).copied().collect();
    let puv = joint.marginal(&both);
    let pu = joint.marginal(u);
    let pv = joint.marginal(v);
    let nv: usize = v.iter().map(|&i| joint.dims[i]).product();
    let mut mi = 0.0;
    for (k, &p) in puv.iter().enumerate() {
        if p > 0.0 {
            let (iu, iv) = (k / nv, k % nv);
            mi += p * (p / (pu[iu] * pv[iv])).ln();
        }
    }
    Ok(mi)
}

/// `|I(Y;Z) - I(X;Z) - I(X;Y) + I(X;Y,Z)|` for a table over `(X, Y, Z)`
/// that factorizes as `P(X) P(Y|X) P(Z|X)`.
pub fn chain_identity_residual(joint: &DiscreteJoint) -> Result<f64> {
    joint.validate()?;
    if joint.dims.len() != 3 {
        return Err(Error::contract("chain identity needs a table over (X, Y, Z)"));
    }
    let (nx, ny, nz) = (joint.dims[0], joint.dims[1], joint.dims[2]);
    let px = joint.marginal(&[0]);
    let pxy = joint.marginal(&[0, 1]);
    let pxz = joint.marginal(&[0, 2]);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let lhs = joint.prob(&[x, y, z]) * px[x];
                let rhs = pxy[x * ny + y] * pxz[x * nz + z];
                if (lhs - rhs).abs() > 1e-10 {
                    return Err(Error::contract(format!(
                        "table is not Markov through X at ({x}, {y}, {z})"
                    )));
                }
            }
        }
    }
    let i_yz = discrete_mi(joint, &[1], &[2])?;
    let i_xz = discrete_mi(joint, &[0], &[2])?;
    let i_xy = discrete_mi(joint, &[0], &[1])?;
    let i_x_yz = discrete_mi(joint, &[0], &[1, 2])?;
    Ok((i_yz - i_xz - i_xy + i_x_yz).abs())
}

/// `I(A;Z) - I(Y;Z)` for a table over `(Y, A, Z)` where `Y` is a function of `A`.
pub fn lemma2_slack(joint: &DiscreteJoint) -> Result<f64> {
    joint.validate()?;
    if joint.dims.len() != 3 {
        return Err(Error::contract("slack needs a table over (Y, A, Z)"));
    }
    let (ny, na) = (joint.dims[0], joint.dims[1]);
    let pya = joint.marginal(&[0, 1]);
    for a in 0..na {
        let support = (0..ny).filter(|&y| pya[y * na + a] > 0.0).count();
        if support > 1 {
            return Err(Error::contract(format!("Y is not a function of A at a = {a}")));
        }
    }
    Ok(discrete_mi(joint, &[1], &[2])? - discrete_mi(joint, &[0], &[2])?)
}
