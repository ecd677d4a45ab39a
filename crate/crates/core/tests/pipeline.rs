use std::fs;

use hice::pipeline::{ablation_matrix, make_backend, run_pipeline, sweep, RunConfig, SWEEP_THRESHOLDS};
use hice::synthetic::{build_fixture, write_fixture, FixtureKind};
use hice::Error;

fn fixture(kind: FixtureKind) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let bundle = build_fixture(kind, 7).unwrap();
    write_fixture(&bundle, dir.path(), 7).unwrap();
    let cfg = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    (dir, cfg)
}

#[test]
fn end_to_end_scores_and_artifacts() {
    let (_dir, cfg) = fixture(FixtureKind::EndToEnd);
    let backend = make_backend(&cfg).unwrap();
    let report = run_pipeline(&cfg, backend.as_ref(), None).unwrap();
    println!("{}", report.to_markdown());
    assert_eq!(report.rel, 1.0);
    assert_eq!(report.t_g, 1.0);
    assert_eq!(report.t_l, 1.0);
    assert_eq!(report.m_l, 1.0);
    assert!(report.values().iter().all(Option::is_some));

    let dir = cfg.report_dir();
    for f in ["report.json", "report.md", "evidence.jsonl", "decisions.jsonl", "stamp.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let first = fs::read(dir.join("report.json")).unwrap();
    run_pipeline(&cfg, backend.as_ref(), None).unwrap();
    assert_eq!(first, fs::read(dir.join("report.json")).unwrap());
}

#[test]
fn stale_classifier_is_rejected() {
    let (_dir, mut cfg) = fixture(FixtureKind::EndToEnd);
    let backend = make_backend(&cfg).unwrap();
    run_pipeline(&cfg, backend.as_ref(), None).unwrap();
    cfg.seed = Some(8);
    let err = hice::pipeline::build_memories(&cfg).unwrap_err();
    match err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "build-memory");
            assert!(matches!(*source, Error::StaleArtifact { .. }));
        }
        other => panic!("{other}"),
    }
}

#[test]
fn sweep_trends() {
    let (_dir, cfg) = fixture(FixtureKind::Sweep);
    let backend = make_backend(&cfg).unwrap();
    run_pipeline(&cfg, backend.as_ref(), None).unwrap();
    let rows = sweep(&cfg, backend.as_ref(), &SWEEP_THRESHOLDS).unwrap();
    print!("{}", hice::pipeline::sweep_table(&rows));
    for w in rows.windows(2) {
        assert!(w[1].edited_routes >= w[0].edited_routes);
        assert!(w[1].metrics.rel >= w[0].metrics.rel);
        assert!(w[1].metrics.m_l <= w[0].metrics.m_l);
    }
    assert!(rows[3].edited_routes > rows[0].edited_routes);
}

#[test]
fn ablation_rows() {
    let (_dir, cfg) = fixture(FixtureKind::EndToEnd);
    let backend = make_backend(&cfg).unwrap();
    run_pipeline(&cfg, backend.as_ref(), None).unwrap();
    let rows = ablation_matrix(&cfg, backend.as_ref(), false).unwrap();
    print!("{}", hice::pipeline::ablation_table(&rows));
    assert!(rows[1].metrics.t_g > rows[0].metrics.t_g);
    let bad = ablation_matrix(&cfg, backend.as_ref(), true).unwrap();
    print!("{}", hice::pipeline::ablation_table(&bad));
    assert!(bad[3].metrics.m_l > bad[1].metrics.m_l);
}
