//! Experiment runtime and command-line surface for the hierarchical
//! KL-regularized RL workspace: configuration, the actor/learner loop,
//! checkpoints, transfer wirings, the KL-reward field dump, and the oracle
//! verification report.

pub mod assemble;
pub mod checkpoint;
pub mod config;
pub mod klfield;
pub mod runtime;
pub mod verify;
