pub mod baselines;
pub mod compositor;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod metrics;
pub mod motion;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod training;

pub use error::{ElpError, Result};
