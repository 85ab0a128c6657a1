//! Library surface of the command line front end. The binary in main.rs is a
//! thin clap wrapper; everything it does lives here so the config parser and
//! command implementations can be driven from tests and fuzz targets.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
