//! Private estimation of how often each training sample occurs across a
//! federation, and frequency-aware sample reweighting for federated
//! training of a small character-level language model.
//!
//! Pipeline: [`corpus`] builds deduplicated client shards, [`scheduler`]
//! arranges all client pairs into parallel rounds, [`protocol`] runs the
//! pairwise [`psi`]-based frequency exchange over a [`transport`], and
//! [`reweight`] turns the resulting global counts into loss weights that
//! [`trainer`] applies during federated training.

pub mod bench;
pub mod cli;
pub mod corpus;
pub mod protocol;
pub mod psi;
pub mod reweight;
pub mod scheduler;
pub mod trainer;
pub mod transport;
