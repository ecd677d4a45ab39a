//! Component ablation, with an intact and a label-swapped scope classifier.

use hice::pipeline::{ablation_matrix, ablation_table, make_backend, run_pipeline, RunConfig};
use hice::synthetic::{build_fixture, write_fixture, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    write_fixture(&build_fixture(FixtureKind::EndToEnd, 7)?, dir.path(), 7)?;
    let cfg = RunConfig::load(&dir.path().join("config.toml"))?;
    let backend = make_backend(&cfg)?;
    run_pipeline(&cfg, backend.as_ref(), None)?;
    for corrupt in [false, true] {
        println!("{}", if corrupt { "\nswapped classifier labels" } else { "intact classifier" });
        print!("{}", ablation_table(&ablation_matrix(&cfg, backend.as_ref(), corrupt)?));
    }
    Ok(())
}
