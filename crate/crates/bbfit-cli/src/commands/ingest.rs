//! ingest: turn a CSV file into the binary column store the fitter reads.

use std::path::Path;

use serde_json::json;

use crate::error::CliError;
use crate::manifest::write_manifest;

pub fn run(csv: &Path, columns: Option<&[String]>, out: &Path) -> Result<(), CliError> {
    let store = bbfit::datastore::ingest_csv(csv, columns)
        .map_err(|e| CliError::Io(format!("{}: {e}", csv.display())))?;
    let target = out.join("data.bbfc");
    store.write_file(&target)?;
    write_manifest(
        out,
        "ingest",
        &json!({ "csv": csv.display().to_string(), "columns": columns }),
        &[],
    )?;
    println!(
        "ingested {} rows, {} columns -> {}",
        store.n_rows(),
        store.column_names().len(),
        target.display()
    );
    Ok(())
}
