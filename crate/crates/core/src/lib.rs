pub mod backend;
pub mod config;
pub mod criterion;
pub mod image;
pub mod metrics;
pub mod prior;
pub mod runner;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod verification;
