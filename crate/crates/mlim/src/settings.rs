//! Strict JSON run configuration and seed resolution.

use std::fs;
use std::path::Path;

use mlim_core::config::RunConfig;

use crate::error::{AppError, AppResult};

pub const SEED_ENV: &str = "MLIM_SEED";

/// Parses a config; unknown keys are rejected at every level.
pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

pub fn load_config(path: &Path) -> AppResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Config(format!("cannot read config file {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

/// Flag, then environment, then config file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> AppResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| AppError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(config),
    }
}

/// Loads (or defaults) the config, applies the seed precedence and validates.
pub fn resolve(path: Option<&Path>, seed_flag: Option<u64>) -> AppResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.seed = resolve_seed(seed_flag, env.as_deref(), cfg.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_pretty_json(cfg: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}
