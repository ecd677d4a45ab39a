//! Every pipeline stage on the synthetic benchmark, from manifests to report.
//!
//! Pass a directory to keep the artifacts: `cargo run --example end_to_end -- out/`.

use hice::pipeline::{make_backend, run_pipeline, RunConfig};
use hice::synthetic::{build_fixture, write_fixture, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().to_path_buf());
    write_fixture(&build_fixture(FixtureKind::EndToEnd, 7)?, &dir, 7)?;
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let backend = make_backend(&cfg)?;
    let start = std::time::Instant::now();
    let report = run_pipeline(&cfg, backend.as_ref(), None)?;
    println!("{}", report.to_markdown());
    println!("{} edits in {:.2?}", report.edits, start.elapsed());
    for f in ["report.json", "evidence.jsonl", "decisions.jsonl"] {
        println!("  {}", cfg.report_dir().join(f).display());
    }
    Ok(())
}
