//! Synthetic data, training, ablation and attention export for `fat-core` models.

pub mod ablation;
pub mod check;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod export;
pub mod optim;
pub mod sampler;
pub mod synth;
pub mod train;
