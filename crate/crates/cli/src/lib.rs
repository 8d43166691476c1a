//! Library side of the `tssl` binary: experiment configs, run manifests
//! and the subcommand bodies.

pub mod commands;
pub mod config;
pub mod manifest;

/// A usage or configuration problem (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
