//! Fault-signature GAN: learns domain-independent spectral fault signatures
//! from a source domain and synthesizes unseen fault classes for a target
//! domain from its healthy data.

pub mod classifier;
pub mod config;
pub mod data;
pub mod experiments;
pub mod gan;
mod error;
pub mod nn;
pub mod rig;
pub mod spectral;
pub mod synthesis;

pub use error::{Error, Result};
