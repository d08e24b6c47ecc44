//! Persistent monitoring of stochastic spatio-temporal fields with a small
//! team of mobile sensors.
//!
//! The field is modelled as a Gaussian process whose kernel hyper-parameters
//! drift over time. A Gaussian-mixture belief over those hyper-parameters is
//! adapted after every sensing cycle with particle weighting, Metropolis-
//! Hastings rejuvenation and EM refitting ([`belief`]). Each robot samples
//! one hyper-parameter point from the belief and greedily places informative
//! regions in continuous space by MCMC over a location likelihood
//! ([`sensing`]), then tours the sampled sites ([`planning`]) in a simulated
//! world ([`world`]) driven by a deterministic discrete-event loop ([`sim`]).
//! [`eval`] implements the metrics used to score runs.

pub mod belief;
pub mod error;
pub mod eval;
pub mod gp;
pub mod mcmc;
pub mod observation;
pub mod planning;
pub mod seed;
pub mod selftest;
pub mod sensing;
pub mod sim;
pub mod world;

pub use belief::{AdaptationConfig, GaussianMixture, ParticleSet};
pub use error::{Error, Result};
pub use gp::{CovMatrix, HyperParams, Location};
pub use observation::ObservationBatch;
