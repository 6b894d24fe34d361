//! Configuration loading and output-path resolution.

use std::path::{Path, PathBuf};

use fedkrso::config::RunConfig;
use fedkrso::error::{Error, Result};
use fedkrso::report;

/// Root for all outputs when no explicit directory is given.
pub const OUTPUT_ROOT_ENV: &str = "FEDKRSO_OUTPUT_ROOT";

/// Load a run configuration from a TOML file, or from a previously written
/// `manifest.json` (detected by extension) for exact replay.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(report::read_manifest(path)?.config);
    }
    let raw = std::fs::read_to_string(path)?;
    let config: RunConfig = toml::from_str(&raw)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    Ok(config)
}

/// Resolve the output directory: an explicit path wins (relative paths are
/// rooted at `$FEDKRSO_OUTPUT_ROOT`); otherwise `<root>/<config stem><suffix>`.
pub fn resolve_out_dir(explicit: Option<&Path>, config_path: &Path, suffix: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    match explicit {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => root.join(p),
        None => {
            let stem = config_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".to_string());
            root.join(format!("{stem}{suffix}"))
        }
    }
}
