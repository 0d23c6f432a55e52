//! Differentiable architecture search for image restoration.

pub mod cells;
pub mod ckpt;
pub mod compact;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod genotype;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod run;
pub mod scalar;
pub mod supernet;
pub mod tensor;
