//! File formats, pipeline stages and the command-line driver built on
//! `fusenet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod provenance;
pub mod report;
pub mod vgr;

pub use error::{Error, Result};
