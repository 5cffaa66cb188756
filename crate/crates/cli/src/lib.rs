//! Command-line pipeline and HTTP service for gradient-based attribution.
//!
//! Subcommands produce artifacts in a cache directory, one stage at a time:
//! `gen-data`, `train`, `estimate-hessian`, `build-index`, then `eval`.
//! `retrieve`, `tailpatch` and `serve` read those artifacts.

pub mod artifacts;
pub mod commands;
pub mod service;
pub mod session;

use anyhow::{Context as _, Result};
use trackstar::config::RunConfig;

/// Config from an optional TOML file, dotted overrides and an optional
/// global seed, validated.
pub fn load_config(path: Option<&std::path::Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}
