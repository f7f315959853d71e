//! Asynchronous action-chunk inference runtime.
//!
//! A policy server hosts small diffusion / flow-matching chunk generators, a
//! robot client runs the asynchronous control loop against a simulated planar
//! arm, and episodes are stored in a chunked columnar dataset. The replay
//! buffer bridge carries transitions and parameters between an actor and a
//! learner over the same wire protocol.

pub mod kinematics;
pub mod dataset;
pub mod genmodel;
pub mod chunking;
pub mod protocol;
pub mod rlbridge;
pub mod server;
pub mod client;
pub mod workflow;
