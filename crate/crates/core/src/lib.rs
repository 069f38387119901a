//! Sparse autoencoders trained on the residual stream of a small byte-level
//! transformer, with MSE pretraining, KL+MSE fine-tuning, end-to-end
//! training, lightweight adapters, and the evaluation harness that compares
//! them.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod evaluation;
pub mod gradcheck;
pub mod lm;
pub mod optim;
pub mod params;
pub mod sae;
pub mod tensor;
pub mod training;
