//! Answer normalization, locality-as-consistency, and neighbor-based
//! generalization and preservation scoring.

use hice::embeddings::EmbeddingMatrix;
use hice::metrics::{
    answers_match, locality, nested_mean, normalize_answer, sample_neighbors, split_kgi_kpi, BaselineBitmap,
    BaselineEntry, FeatureKind, LocalityObservation, PoolKind,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (a, r) in [("  The Eiffel   Tower. ", "the eiffel tower"), ("Yes", "true"), ("yes", "blue")] {
        println!("{a:?} vs {r:?}: normalized {:?}, match {}", normalize_answer(a), answers_match(a, r));
    }

    let obs = vec![
        LocalityObservation {
            id: "a".into(),
            pre: Some("Sydney".into()),
            post: "sydney".into(),
        },
        LocalityObservation {
            id: "b".into(),
            pre: Some("4".into()),
            post: "5".into(),
        },
    ];
    // The pre-edit answer "Sydney" is wrong, yet unchanged, so it counts.
    println!("locality = {}", locality(&obs)?);

    let mut bitmap = BaselineBitmap::default();
    for (i, correct) in [true, false, false, true, true, false].into_iter().enumerate() {
        bitmap.entries.insert(
            format!("s{i}"),
            BaselineEntry {
                original_answer: String::new(),
                correct,
            },
        );
    }
    let pool: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
    let (kgi, kpi) = split_kgi_kpi(&bitmap, "s0", &pool)?;
    println!("edit s0: generalization pool {kgi:?}, preservation pool {kpi:?}");

    let features = EmbeddingMatrix::from_rows(
        pool.clone(),
        (0..6).map(|i| vec![i as f32, 0.0]).collect(),
        "toy",
    )?;
    let n = sample_neighbors("s0", &kgi, &features, 1, PoolKind::Kgi, FeatureKind::Image)?;
    println!("nearest {:?} farthest {:?}", n.near_ids, n.far_ids);

    let per_edit = vec![
        ("s0".to_string(), vec![true, false]),
        ("s1".to_string(), vec![true]),
        ("s2".to_string(), vec![]),
    ];
    let (score, skipped) = nested_mean(&per_edit);
    println!("nested mean {score:?} with {skipped} edit skipped");
    Ok(())
}
