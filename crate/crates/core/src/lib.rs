//! Goal-conditioned visuomotor policy: a flow-matching world model imagines
//! a multi-scale latent trajectory toward a goal image, an action expert
//! turns the imagined features into dense near-term and sparse far-term
//! actions, and a hindsight-relabeling loop adapts the policy online through
//! low-rank adapters.

pub mod actex;
pub mod error;
pub mod flow;
pub mod gcwm;
pub mod harness;
pub mod layers;
pub mod msth;
pub mod onlinehpr;
pub mod rng;
pub mod simenv;
pub mod tensorcore;
pub mod trainkit;

pub use error::{Error, Result};
