//! Selective partial domain adaptation on dense feature vectors: a
//! Gumbel-Softmax source-sample selector, soft pseudo-labelling and mixup
//! regularization trained jointly with a domain-adversarial network, on top
//! of a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod label;
pub mod mix;
pub mod models;
pub mod objective;
pub mod select;
pub mod trainer;
pub mod verify;
