//! Pipeline driver: data generation, training, curvature collection, band
//! analysis, editing, evaluation, sweeps and reporting over one workdir.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::{Path, PathBuf};

pub use config::{RunConfig, Task};
pub use error::CliError;
pub use manifest::Manifest;
pub use stages::{run_pipeline, run_stage, Context, Stage};

pub const WORKDIR_ENV: &str = "CURVEDIT_WORKDIR";
pub const DEFAULT_WORKDIR: &str = "curvedit-run";

/// How the caller chose a config.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub config_file: Option<PathBuf>,
    pub preset: Option<Task>,
    pub workdir: Option<PathBuf>,
    pub overrides: Vec<String>,
}

/// Resolves the config and workdir.
///
/// The config comes from `--config`, else `--preset`, else the
/// `config.json` left in the workdir by `gen-data`, else the LM preset.
/// The workdir comes from `--workdir`, else `paths.workdir`, else
/// `$CURVEDIT_WORKDIR`, else `./curvedit-run`.
pub fn resolve(src: &ConfigSource) -> Result<(RunConfig, PathBuf), CliError> {
    let env_dir = std::env::var_os(WORKDIR_ENV).map(PathBuf::from);
    let fallback_dir = src.workdir.clone().or_else(|| env_dir.clone()).unwrap_or_else(|| DEFAULT_WORKDIR.into());
    let base = match (&src.config_file, src.preset) {
        (Some(f), _) => RunConfig::load(f)?,
        (None, Some(t)) => RunConfig::preset(t),
        (None, None) => {
            let saved = fallback_dir.join("config.json");
            if saved.is_file() {
                RunConfig::load(&saved)?
            } else {
                RunConfig::lm()
            }
        }
    };
    let config = base.with_overrides(&src.overrides)?;
    let workdir = src
        .workdir
        .clone()
        .or_else(|| config.paths.workdir.clone())
        .or(env_dir)
        .unwrap_or_else(|| DEFAULT_WORKDIR.into());
    config.validate()?;
    Ok((config, workdir))
}

pub fn context(src: &ConfigSource) -> Result<Context, CliError> {
    let (config, workdir) = resolve(src)?;
    Ok(Context::new(config, workdir))
}

/// Writes `config` as pretty JSON.
pub fn write_config(path: &Path, config: &RunConfig) -> Result<(), CliError> {
    curvedit::io::write_atomic(path, config.to_json().as_bytes())?;
    Ok(())
}
