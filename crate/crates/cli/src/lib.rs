//! Command-line front end for `gnc-core`: config loading with overrides,
//! the threaded control loop, the operator API and log plotting.

pub mod api;
pub mod plot;
pub mod service;

use std::path::Path;

use gnc_core::config::{load, parse_mission, stock, ConfigError, System, STOCK_NAMES};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Validation = 1,
    Fault = 2,
}

/// Loads `config`, which is either a runner file path or a stock name, and
/// optionally replaces its mission with the file at `mission`.
pub fn load_system(config: &str, mission: Option<&Path>) -> Result<System, ConfigError> {
    let path = Path::new(config);
    let mut system = if path.exists() {
        load(path)?
    } else if STOCK_NAMES.contains(&config) {
        let mut s = stock(config)?;
        // Stock configs do not write a log unless asked to.
        s.runner.log = None;
        s
    } else {
        return Err(ConfigError::Io {
            file: config.to_string(),
            message: format!("no such file, and not a stock config ({})", STOCK_NAMES.join(", ")),
        });
    };
    if let Some(m) = mission {
        let text = std::fs::read_to_string(m).map_err(|e| ConfigError::Io {
            file: m.display().to_string(),
            message: e.to_string(),
        })?;
        system.mission = parse_mission(&text, &m.display().to_string())?;
    }
    Ok(system)
}
