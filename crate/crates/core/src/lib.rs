//! Off-policy correction for continuous-control actor-critic learning.
//!
//! The library is split into small, independently testable layers:
//!
//! * [`gaussian`]: multivariate Gaussians, fitting and divergences.
//! * [`offpoc`]: the importance weights derived from those divergences.
//! * [`nn`]: dense networks with analytic backprop, Adam and Polyak averaging.
//! * [`replay`]: FIFO experience replay with uniform, CER and PER samplers.
//! * [`envs`]: desk-scale continuous-control environments.
//! * [`agents`]: deterministic and stochastic actor-critic learners plus the training loop.
//! * [`tabular`]: exact finite-MDP verification of the one-step correction operator.
//! * [`metrics`]: the JSONL record schema shared by training and the CLI.


pub mod agents;
pub mod envs;
pub mod gaussian;
pub mod metrics;
pub mod nn;
pub mod offpoc;
pub mod replay;
pub mod stats;
pub mod tabular;
