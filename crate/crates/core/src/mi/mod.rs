//! Mutual-information bounds and exact discrete oracles.

mod bounds;
mod discrete;

pub use bounds::{
    approximator_ll_step, class_lower_bound, gaussian_mi, kl_marginal_upper_bound, recon_lower_bound,
    vclub_from_conditional, vclub_upper_bound, BoundKind, ConditionalGaussian, LlStep, MIEstimate,
};
pub use discrete::{chain_identity_residual, discrete_mi, lemma2_slack, DiscreteJoint};
