//! Device-free multi-target localization from OFDM radar echoes.

pub mod association;
pub mod config;
pub mod harness;
pub mod localization;
pub mod ofdm;
pub mod ranging;
pub mod scenario;
