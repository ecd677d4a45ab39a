//! Dataset preparation rules on small in-memory record sets.

use std::collections::BTreeMap;

use hice::dataset::prep::{
    balance_boolean_answers, capped_per_answer_split, filter_by_annotation_consistency,
    split_by_answer_frequency, AnnotationRecord,
};
use hice::dataset::{make_fixture, write_manifest, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let answers = ["red", "red", "red", "blue", "blue", "green", "white", "red", "blue"];
    let (train, test) = split_by_answer_frequency(answers.to_vec(), 2, |a| a)?;
    println!("frequency split  train={train:?} test={test:?}");

    let booleans = vec!["yes", "yes", "yes", "yes", "no", "no", "true", "false"];
    let balanced = balance_boolean_answers(booleans, 3, |a| a)?;
    println!("balanced         {balanced:?}");

    let records: Vec<AnnotationRecord> = (0..4)
        .map(|i| AnnotationRecord {
            question: format!("what color is sign {i}?"),
            annotations: (0..10)
                .map(|j| if j < 6 + i { "red" } else { "blue" }.to_string())
                .collect(),
            answer_type: "other".into(),
            image_ref: format!("images/{i}.jpg"),
        })
        .collect();
    for kept in filter_by_annotation_consistency(records, 0.7)? {
        println!("consistent       {} -> {} ({:.1})", kept.record.question, kept.answer, kept.agreement);
    }

    let typed: Vec<(u32, &str)> = (0..12).map(|i| (i, if i % 3 == 0 { "number" } else { "other" })).collect();
    let (train, test) = capped_per_answer_split(typed, 2, 3, 11, |r| r.1)?;
    println!("capped split     train={train:?}\n                 test={test:?}");

    let counts = BTreeMap::from([(Task::ObjectCounting, 3), (Task::SceneInformation, 2)]);
    let ds = make_fixture(&counts, 5);
    let dir = std::env::temp_dir().join("hice-prep-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("fixture.jsonl");
    write_manifest(&ds, &path)?;
    println!("wrote {} samples to {}", ds.len(), path.display());
    Ok(())
}
