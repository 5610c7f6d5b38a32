pub mod cli;
pub mod error;
pub mod evalkit;
pub mod feat_mod;
pub mod geo_fusion;
pub mod geodesy;
pub mod micronet;
pub mod spatial_priors;
pub mod synthworld;

pub use error::{Error, Result};
