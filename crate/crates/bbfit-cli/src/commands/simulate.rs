//! simulate: draw one synthetic scenario, write the train and validation
//! stores plus the generating truth.

use std::path::Path;

use crate::commands::write_text;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::write_manifest;

pub fn run(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scenario = config.data.simulate.as_ref().ok_or_else(|| {
        CliError::Config("config data.simulate: the simulate command needs a scenario".into())
    })?;
    let sim = bbfit::simgen::simulate(scenario)?;
    sim.train.write_file(&out.join("train.bbfc"))?;
    if scenario.n_validation > 0 {
        sim.validation.write_file(&out.join("validation.bbfc"))?;
    }
    write_text(
        &out.join("truth.json"),
        &(serde_json::to_string_pretty(&sim.truth)? + "\n"),
    )?;
    write_manifest(out, "simulate", config, &[("scenario", scenario.seed)])?;
    println!(
        "simulated {} train + {} validation rows, {} columns, seed {} -> {}",
        scenario.n,
        scenario.n_validation,
        sim.train.column_names().len(),
        scenario.seed,
        out.display()
    );
    Ok(())
}
