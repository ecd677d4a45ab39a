use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, EditSample, ImageProbe, Source, Split, Task, TextProbe};

const OBJECTS: &[&str] = &[
    "cup", "dog", "bicycle", "lamp", "umbrella", "bench", "kite", "clock", "horse", "vase",
    "laptop", "boat", "giraffe", "bottle", "chair", "train", "sign", "truck", "bowl", "sheep",
];
const COLORS: &[&str] = &["red", "blue", "green", "white", "black", "yellow", "brown", "gray"];
const SCENES: &[&str] = &["kitchen", "beach", "street", "park", "office", "farm", "airport"];
const RELATIONS: &[&str] = &["on", "under", "next to", "behind", "in front of", "above"];
const WORDS: &[&str] = &["stop", "exit", "sale", "open", "finnair", "taxi", "coffee", "hotel"];
const BOOKS: &[(&str, &str)] = &[
    ("hamlet", "shakespeare"),
    ("war and peace", "tolstoy"),
    ("the odyssey", "homer"),
    ("moby dick", "melville"),
    ("emma", "austen"),
    ("dracula", "stoker"),
];
const SPORTS: &[(&str, &str)] = &[
    ("racket", "tennis"),
    ("bat", "baseball"),
    ("board", "surfing"),
    ("club", "golf"),
    ("net", "volleyball"),
];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap()
}

/// `(question, rephrase, target, original)` for one task.
fn task_qa<R: Rng>(task: Task, rng: &mut R) -> (String, String, String, String) {
    let obj = pick(rng, OBJECTS);
    match task {
        Task::ObjectExistence => {
            let yes = rng.random_bool(0.5);
            (
                format!("Is there a {obj} in the image?"),
                format!("Does the picture contain a {obj}?"),
                yes.to_string(),
                (!yes).to_string(),
            )
        }
        Task::ObjectRecognition => {
            let place = pick(rng, SCENES);
            (
                format!("What is the object near the {place} entrance?"),
                format!("Which object can be seen by the {place} entrance?"),
                obj.to_string(),
                pick(rng, OBJECTS).to_string(),
            )
        }
        Task::ObjectAttributes => (
            format!("What color is the {obj}?"),
            format!("What is the color of the {obj}?"),
            pick(rng, COLORS).to_string(),
            pick(rng, COLORS).to_string(),
        ),
        Task::ObjectCounting => {
            let n = rng.random_range(0..10);
            (
                format!("How many {obj}s are there?"),
                format!("What is the number of {obj}s in the photo?"),
                n.to_string(),
                ((n + 1) % 10).to_string(),
            )
        }
        Task::SceneInformation => (
            format!("Where is the {obj} located?"),
            format!("In what kind of place is the {obj}?"),
            pick(rng, SCENES).to_string(),
            pick(rng, SCENES).to_string(),
        ),
        Task::SpatialRelationship => {
            let rel = pick(rng, RELATIONS);
            let other = pick(rng, OBJECTS);
            let yes = rng.random_bool(0.5);
            (
                format!("The {obj} is {rel} the {other}."),
                format!("Is the {obj} {rel} the {other}?"),
                yes.to_string(),
                (!yes).to_string(),
            )
        }
        Task::TextRecognition => (
            format!("What word is written on the {obj}?"),
            format!("Which word appears on the {obj}?"),
            pick(rng, WORDS).to_string(),
            pick(rng, WORDS).to_string(),
        ),
        Task::NumericalInference => {
            let a = rng.random_range(1..20);
            let b = rng.random_range(1..20);
            (
                format!("What is the sum of the {obj} bar and the next bar if they are {a} and {b}?"),
                format!("Add the {obj} bar value {a} to the other bar value {b}."),
                (a + b).to_string(),
                (a + b + 1).to_string(),
            )
        }
    }
}

/// Deterministic synthetic dataset with `counts[task]` samples per task.
///
/// Every sample carries a rephrase and both locality probes. Ids are
/// `<task>-<index>`; the split is `Train`.
pub fn make_fixture(counts: &BTreeMap<Task, usize>, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (&task, &n) in counts {
        for i in 0..n {
            let (question, rephrase, target, original) = task_qa(task, &mut rng);
            let (book, author) = *BOOKS.choose(&mut rng).unwrap();
            let (item, sport) = *SPORTS.choose(&mut rng).unwrap();
            samples.push(EditSample {
                id: format!("{}-{i}", task.as_str()),
                image_ref: format!("images/{}/{i}.jpg", task.as_str()),
                question,
                target_answer: target,
                original_answer: Some(original),
                rephrased_question: rephrase,
                text_locality: TextProbe {
                    question: format!("who wrote {book}?"),
                    answer: author.to_string(),
                },
                mm_locality: ImageProbe {
                    image_ref: format!("okvqa/{}/{i}.jpg", task.as_str()),
                    question: format!("What sport can you play with this {item}?"),
                    answer: sport.to_string(),
                },
                task,
                source: Source::Synthetic,
            });
        }
    }
    Dataset::new(samples, Split::Train).expect("fixture samples are valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic() {
        let spec = BTreeMap::from([(Task::ObjectCounting, 4)]);
        let a = make_fixture(&spec, 1);
        let b = make_fixture(&spec, 1);
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn fixture_covers_all_tasks() {
        let spec: BTreeMap<_, _> = Task::ALL.iter().map(|&t| (t, 2)).collect();
        let ds = make_fixture(&spec, 3);
        assert_eq!(ds.len(), 16);
        assert_eq!(ds.counts_by_task().len(), 8);
        assert!(ds.counts_by_task().values().all(|&c| c == 2));
    }

    #[test]
    fn seeds_change_questions() {
        let spec: BTreeMap<_, _> = Task::ALL.iter().map(|&t| (t, 3)).collect();
        let a = make_fixture(&spec, 1);
        let b = make_fixture(&spec, 2);
        let qa: Vec<_> = a.samples().iter().map(|s| &s.question).collect();
        let qb: Vec<_> = b.samples().iter().map(|s| &s.question).collect();
        assert_ne!(qa, qb);
    }
}
