//! Stance classification for (source, reply) text pairs.

pub mod tensor;
pub mod embedding;
pub mod attention;
pub mod affect;
pub mod fusion;
pub mod rng;
pub mod data;
pub mod eval;
pub mod checkpoint;
pub mod model;
pub mod train;
pub mod config;
pub mod cli;
