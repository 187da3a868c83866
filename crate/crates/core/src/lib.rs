//! Membership-inference auditing toolkit for image autoregressive models.
//!
//! Per-sample traces go in, scores and metrics come out. The [`sim`] module
//! provides a seedable toy model that makes every attack testable end to end.

pub mod attacks;
pub mod defense;
pub mod di;
pub mod extraction;
pub mod metrics;
pub mod oracle;
pub mod rng;
mod serde_float;
pub mod sim;
pub mod trace;
