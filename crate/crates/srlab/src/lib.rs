//! IO companion to `srlab-core`: container and token file formats, run
//! reports, SVG plots, configuration, and the command-line front end.

pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod plot;
pub mod report;
pub mod runner;
pub mod tokenfile;

pub use error::{Error, Result};
