//! Routing individual queries with one edit installed and showing the
//! prompts sent to the edited path.

use hice::backends::ScriptedBackend;
use hice::pipeline::{build_memories, fit_classifiers, RunConfig};
use hice::router::{EditPair, Query, Router};
use hice::synthetic::{build_fixture, write_fixture, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let bundle = build_fixture(FixtureKind::EndToEnd, 7)?;
    write_fixture(&bundle, dir.path(), 7)?;
    let cfg = RunConfig::load(&dir.path().join("config.toml"))?;
    hice::pipeline::ingest(&cfg, None)?;
    let classifiers = fit_classifiers(&cfg)?;
    let memories = build_memories(&cfg)?;
    let backend = ScriptedBackend::new(bundle.behavior.clone());

    let router = Router {
        classifier: classifiers.for_router(&cfg.router),
        m1: &memories.m1,
        m2: memories.m2_for(&cfg.router),
        config: &cfg.router,
    };
    let s = &bundle.test.samples()[1];
    let edit = EditPair {
        question: &s.question,
        answer: &s.target_answer,
    };
    let feature_of = |suffix: &str| bundle.test_questions.require(&format!("{}/{suffix}", s.id));
    let queries = [
        ("edit", s.image_ref.as_str(), s.question.as_str(), feature_of("edit")?),
        ("rephrase", s.image_ref.as_str(), s.rephrased_question.as_str(), feature_of("rephrase")?),
        ("text locality", "", s.text_locality.question.as_str(), feature_of("loc")?),
        ("image locality", s.mm_locality.image_ref.as_str(), s.mm_locality.question.as_str(), feature_of("mloc")?),
    ];
    println!("edit: {} -> {}\n", s.question, s.target_answer);
    for (name, image, question, feature) in queries {
        let query = Query {
            id: name,
            image_ref: image,
            question,
            feature,
        };
        let (answer, d) = router.edit_infer(edit, &query, &backend)?;
        println!(
            "[{name}] route={} sim={:.3} margin={:+.3} answer={answer}",
            d.route, d.max_m2_similarity, d.margin
        );
        if d.prompt != question {
            println!("{}\n", d.prompt);
        }
    }
    Ok(())
}
