//! Gaussian-mixture belief over kernel hyper-parameters and its sequential
//! Monte Carlo adaptation.

mod adapt;
mod mixture;
mod particles;

pub(crate) use adapt::mcmc_hyperparams_multi;
pub use adapt::{
    adapt_belief, adapt_belief_with, mcmc_hyperparams, pooled_mixture, AdaptationConfig,
    AdaptationDiagnostics, LogBounds, McmcDraw, ParticleSource,
};
pub use mixture::{
    fit_gm, fit_gm_traced, floor_eigenvalues, gm_density, gm_sample, init_gm, Component,
    ComponentDocument, EmFit, GaussianMixture, GmDocument,
};
pub use particles::{
    batches_log_likelihood, conditional_entropy_gm, effective_particle_pct, ode_log_weight,
    ode_weights, resample_systematic, resample_systematic_to, sde_pool_sample, weigh_particles,
    weigh_particles_multi, ParticleSet,
};
