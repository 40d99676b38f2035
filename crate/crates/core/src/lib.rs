//! Blockage-robust, latency-constrained CoMP downlink beamforming.
//!
//! The crate simulates a drift-plus-penalty controller that, every slot,
//! designs joint-transmission beamformers against the worst surviving subset
//! of each user's serving RRUs, then serves queues with the rate the realized
//! (possibly blocked) channel supports.

pub mod blockage;
pub mod channel;
pub mod config;
pub mod geometry;
pub mod queueing;
pub mod rng;
pub mod serving;
pub mod sim;
pub mod solver;
pub mod validate;
