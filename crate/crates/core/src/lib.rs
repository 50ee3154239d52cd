//! Dependency suppression for a binary sensitive label.
//!
//! Stage one trains a variational autoencoder whose prior mean carries the
//! sensitive label in latent dimension 0. Stage two masks that dimension and
//! trains one small encoder per remaining latent dimension against a
//! nearest-neighbor estimate of the density ratio `p(z|s)/p(z)`.

pub mod diffnet;
pub mod density;
pub mod miloss;
pub mod data;
pub mod vae;
pub mod pipeline;
pub mod eval;
pub mod cli;
