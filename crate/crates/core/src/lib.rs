//! Multi-source population synthesis with a dual-critic Wasserstein GAN.

pub mod autodiff;
pub mod harness;
pub mod learners;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod schema;
pub mod trainer;
pub mod truthsim;
