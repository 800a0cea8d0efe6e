//! Library surface of the experiment runner, exposed so integration tests
//! drive the same code paths as the binary.

pub mod commands;
pub mod config;
pub mod pipeline;
