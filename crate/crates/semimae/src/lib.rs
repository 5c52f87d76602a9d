//! File formats, data loaders, the training driver and the command-line
//! front end around [`semimae_core`].

pub mod checkpoint;
pub mod cli;
pub mod config_io;
pub mod datasets;
pub mod metrics;
pub mod reconstruct;
pub mod runner;

pub use semimae_core as core;
