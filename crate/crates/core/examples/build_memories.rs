//! Clustering training edits into the exemplar memory and mining hard
//! negatives for the similarity gate.

use hice::classifier::{build_demonstrations, fit_classifier, ClassifierConfig};
use hice::memory::{build_m1, build_m2, kmeans, m1_size, ExemplarSelection, M2Selection};
use hice::pipeline::{edit_features_by_id, m2_candidates};
use hice::synthetic::{build_fixture, FixtureKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for n in [200, 13_450] {
        println!("k for {n} training edits at ratio 0.05: {}", m1_size(0.05, n));
    }

    let bundle = build_fixture(FixtureKind::EndToEnd, 7)?;
    let features = edit_features_by_id(&bundle.train, &bundle.train_questions)?;
    let points: Vec<&[f32]> = features.rows().map(|(_, r)| r).collect();
    let km = kmeans(&points, 4, 7, 100, 1e-6)?;
    println!(
        "k-means on {} edits: {} iterations, inertia {:?}",
        points.len(),
        km.iterations,
        km.inertia_history.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>()
    );

    let m1 = build_m1(
        bundle.train.samples(),
        &features,
        &features,
        0.1,
        7,
        ExemplarSelection::NearestToCentroid,
    )?;
    println!("M1 holds {} exemplars:", m1.entries.len());
    for e in &m1.entries {
        println!("  {}", e.demonstration.text.replace('\n', " | "));
    }

    let demos: Vec<_> = bundle
        .train
        .samples()
        .iter()
        .map(build_demonstrations)
        .collect::<hice::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let model = fit_classifier(
        &bundle.train_demonstrations,
        &demos,
        &ClassifierConfig {
            projection_dim: Some(512),
            seed: 7,
            ..ClassifierConfig::default()
        },
    )?;
    let candidates = m2_candidates(&bundle.train, &bundle.train_questions)?;
    let m2 = build_m2(&candidates, &model, M2Selection::Budget(5))?;
    println!("M2 keeps the {} hardest of {} out-of-scope questions:", m2.len(), candidates.len());
    for e in &m2.entries {
        println!("  margin {:+.3}  {}", e.margin, e.question);
    }
    Ok(())
}
