//! How the similarity threshold trades reliability against locality.

use hice::pipeline::{make_backend, run_pipeline, sweep, sweep_table, RunConfig, SWEEP_THRESHOLDS};
use hice::synthetic::{build_fixture, write_fixture, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    write_fixture(&build_fixture(FixtureKind::Sweep, 7)?, dir.path(), 7)?;
    let cfg = RunConfig::load(&dir.path().join("config.toml"))?;
    let backend = make_backend(&cfg)?;
    run_pipeline(&cfg, backend.as_ref(), None)?;
    let rows = sweep(&cfg, backend.as_ref(), &SWEEP_THRESHOLDS)?;
    print!("{}", sweep_table(&rows));
    Ok(())
}
