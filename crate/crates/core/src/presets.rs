//! Built-in scenarios.

use std::path::Path;

use crate::config::{ScenarioFile, Setup};
use crate::error::{Error, Result};

/// Static clap source in a 7 × 7 × 3 m room.
pub const STATIC: &str = include_str!("../presets/static.toml");
/// L-shaped source route with a corner noise emitter.
pub const MOVING: &str = include_str!("../presets/moving.toml");
/// Source occluded mid-route by a box, plus a corner noise emitter.
pub const DECOY: &str = include_str!("../presets/decoy.toml");

pub const NAMES: [&str; 3] = ["static", "moving", "decoy"];

pub fn text(name: &str) -> Option<&'static str> {
    match name {
        "static" => Some(STATIC),
        "moving" => Some(MOVING),
        "decoy" => Some(DECOY),
        _ => None,
    }
}

/// Builds a preset with `key=value` overrides applied.
pub fn load(name: &str, overrides: &[(String, String)]) -> Result<Setup> {
    let t = text(name).ok_or_else(|| {
        Error::Config(format!("unknown preset `{name}` (have {})", NAMES.join(", ")))
    })?;
    ScenarioFile::parse(t, &format!("preset:{name}"), overrides)?.build(Path::new("."))
}

/// Loads `preset:<name>` or a scenario file path.
pub fn resolve(spec: &str, overrides: &[(String, String)]) -> Result<Setup> {
    match spec.strip_prefix("preset:") {
        Some(name) => load(name, overrides),
        None => {
            let (f, base) = ScenarioFile::load(Path::new(spec), overrides)?;
            f.build(&base)
        }
    }
}
