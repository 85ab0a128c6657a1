//! Subcommand implementations and the plumbing they share.

pub mod evaluate;
pub mod fit;
pub mod ingest;
pub mod simulate;

use std::fs;
use std::path::{Path, PathBuf};

use bbfit::datastore::ColumnStore;

use crate::config::RunConfig;
use crate::error::CliError;

/// Flag (which already absorbed the environment variable) beats config;
/// the current directory is the last resort.
pub fn out_dir(flag: Option<&Path>, config: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = flag.or(config).unwrap_or(Path::new(".")).to_path_buf();
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Open whatever data source the config names. Stores stay file-backed;
/// CSV and simulated scenarios materialize in memory.
pub fn open_data(config: &RunConfig) -> Result<ColumnStore, CliError> {
    if let Some(path) = &config.data.store {
        return Ok(ColumnStore::open(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?);
    }
    if let Some(path) = &config.data.csv {
        return Ok(bbfit::datastore::ingest_csv(
            path,
            config.data.csv_columns.as_deref(),
        )
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?);
    }
    let scenario = config
        .data
        .simulate
        .as_ref()
        .expect("validation leaves exactly one source");
    Ok(bbfit::simgen::simulate(scenario)?.train)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
