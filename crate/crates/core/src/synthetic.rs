//! Self-contained synthetic benchmark: manifests, feature files and a
//! scripted model whose answers are fully determined, so every metric of a
//! run can be predicted exactly.
//!
//! Question features put the domain on the first axis (`+A` for a sample's
//! own questions, `-A` for locality probes) and a text-seeded residual of
//! norm `R` on the rest, so identical texts get identical vectors.
//! Demonstration features use a much smaller residual, which keeps the fitted
//! gate aligned with the domain axis.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::backends::ScriptedBehavior;
use crate::classifier::{build_demonstrations, feature_key, DemoKind, Label};
use crate::dataset::{make_fixture, write_manifest, Dataset, EditSample, ImageProbe, Split, Task, TextProbe};
use crate::embeddings::{write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::memory::M2Selection;
use crate::pipeline::{BackendSpec, RunConfig, NO_IMAGE};

pub const QUESTION_DIM: usize = 32;
pub const IMAGE_DIM: usize = 16;
pub const DOMAIN_OFFSET: f64 = 1.0;
pub const QUESTION_RESIDUAL: f64 = 8.0;
pub const DEMO_RESIDUAL: f64 = 0.5;

/// M2 similarities given to the graded queries of the sweep fixture.
pub const GRADES: [f64; 4] = [0.78, 0.83, 0.88, 0.93];

pub const TRAIN_SAMPLES: usize = 40;
pub const TEST_SAMPLES: usize = 20;

/// `(question, ground truth, what the unedited model says)`.
const TEXT_PROBES: [(&str, &str, &str); 10] = [
    ("who wrote hamlet?", "shakespeare", "shakespeare"),
    ("who wrote war and peace?", "tolstoy", "tolstoy"),
    ("who wrote emma?", "austen", "bronte"),
    ("what is the capital of france?", "paris", "paris"),
    ("what is the capital of australia?", "canberra", "sydney"),
    ("how many legs does a spider have?", "8", "8"),
    ("which planet is closest to the sun?", "mercury", "mercury"),
    ("what gas do plants absorb?", "carbon dioxide", "carbon dioxide"),
    ("who painted the mona lisa?", "da vinci", "da vinci"),
    ("what is the boiling point of water in celsius?", "100", "100"),
];

/// `(item, ground truth, what the unedited model says)`.
const IMAGE_PROBES: [(&str, &str, &str); 10] = [
    ("racket", "tennis", "tennis"),
    ("bat", "baseball", "cricket"),
    ("board", "surfing", "surfing"),
    ("club", "golf", "golf"),
    ("net", "volleyball", "volleyball"),
    ("glove", "boxing", "boxing"),
    ("paddle", "kayaking", "rowing"),
    ("stick", "hockey", "hockey"),
    ("saddle", "polo", "polo"),
    ("puck", "hockey", "hockey"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Every query is either clearly in scope or an exact copy of a stored
    /// hard negative.
    EndToEnd,
    /// Sixteen edits and eight misjudged image probes sit at graded
    /// similarities to the hard-negative memory.
    Sweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureBundle {
    pub kind: FixtureKind,
    pub train: Dataset,
    pub test: Dataset,
    pub train_questions: EmbeddingMatrix,
    pub train_demonstrations: EmbeddingMatrix,
    pub test_questions: EmbeddingMatrix,
    pub test_images: EmbeddingMatrix,
    pub behavior: ScriptedBehavior,
}

fn unit_vector(key: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(key.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn domain_sign(label: Label) -> f64 {
    match label {
        Label::InDomain => 1.0,
        Label::OutOfDomain => -1.0,
    }
}

/// Feature of a question text under the fixture's encoder.
pub fn question_feature(text: &str, label: Label) -> Vec<f32> {
    std::iter::once(domain_sign(label) * DOMAIN_OFFSET)
        .chain(unit_vector(text, QUESTION_DIM - 1).into_iter().map(|x| x * QUESTION_RESIDUAL))
        .map(|x| x as f32)
        .collect()
}

pub fn demonstration_feature(text: &str, label: Label) -> Vec<f32> {
    std::iter::once(domain_sign(label) * DOMAIN_OFFSET)
        .chain(unit_vector(text, QUESTION_DIM - 1).into_iter().map(|x| x * DEMO_RESIDUAL))
        .map(|x| x as f32)
        .collect()
}

pub fn image_feature(image_ref: &str) -> Vec<f32> {
    unit_vector(image_ref, IMAGE_DIM).into_iter().map(|x| x as f32).collect()
}

/// An in-domain question feature whose cosine similarity to `target` (an
/// out-of-domain question feature) is exactly `cos`, up to f32 rounding.
pub fn graded_feature(target: &[f32], cos: f64, salt: &str) -> Vec<f32> {
    let a2 = DOMAIN_OFFSET * DOMAIN_OFFSET;
    let r2 = QUESTION_RESIDUAL * QUESTION_RESIDUAL;
    let alpha = (cos * (a2 + r2) + a2) / r2;
    assert!(alpha.abs() <= 1.0, "cosine {cos} is out of reach");
    let u: Vec<f64> = target[1..].iter().map(|&x| x as f64 / QUESTION_RESIDUAL).collect();
    let mut v = unit_vector(salt, QUESTION_DIM - 1);
    let proj: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
    for (vi, ui) in v.iter_mut().zip(&u) {
        *vi -= proj * ui;
    }
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let beta = (1.0 - alpha * alpha).sqrt();
    std::iter::once(DOMAIN_OFFSET)
        .chain(
            u.iter()
                .zip(&v)
                .map(|(ui, vi)| QUESTION_RESIDUAL * (alpha * ui + beta * vi / vn)),
        )
        .map(|x| x as f32)
        .collect()
}

fn text_probe(j: usize) -> TextProbe {
    let (q, a, _) = TEXT_PROBES[j % TEXT_PROBES.len()];
    TextProbe {
        question: q.to_string(),
        answer: a.to_string(),
    }
}

fn image_probe(j: usize) -> ImageProbe {
    let j = j % IMAGE_PROBES.len();
    let (item, sport, _) = IMAGE_PROBES[j];
    ImageProbe {
        image_ref: format!("images/okvqa/{j}.jpg"),
        question: format!("What sport can you play with this {item}?"),
        answer: sport.to_string(),
    }
}

/// Samples with pairwise distinct questions and rephrases, tasks interleaved.
fn distinct_samples(n: usize, seed: u64) -> Vec<EditSample> {
    let per_task = n;
    let counts: BTreeMap<Task, usize> = Task::ALL.iter().map(|&t| (t, per_task)).collect();
    let pool = make_fixture(&counts, seed);
    let mut by_task: BTreeMap<Task, Vec<EditSample>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for s in pool.samples() {
        let q = s.question.to_lowercase();
        let r = s.rephrased_question.to_lowercase();
        if seen.contains(&q) || seen.contains(&r) {
            continue;
        }
        seen.insert(q);
        seen.insert(r);
        by_task.entry(s.task).or_default().push(s.clone());
    }
    let mut out = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        let before = out.len();
        for list in by_task.values() {
            if out.len() < n {
                if let Some(s) = list.get(round) {
                    out.push(s.clone());
                }
            }
        }
        assert!(out.len() > before, "fixture pool exhausted");
        round += 1;
    }
    out
}

pub fn build_fixture(kind: FixtureKind, seed: u64) -> Result<FixtureBundle> {
    let drawn = distinct_samples(TRAIN_SAMPLES + TEST_SAMPLES, seed);
    let (test_src, train_src) = drawn.split_at(TEST_SAMPLES);

    let relabel = |s: &EditSample, prefix: &str, i: usize| {
        let mut s = s.clone();
        s.id = format!("{prefix}-{i:02}");
        s.image_ref = format!("images/{prefix}/{i:02}.jpg");
        s.text_locality = text_probe(i);
        s.mm_locality = image_probe(i);
        if s.original_answer.as_deref().map(str::to_lowercase) == Some(s.target_answer.to_lowercase()) {
            s.original_answer = Some("none".to_string());
        }
        s
    };
    let train: Vec<EditSample> = train_src.iter().enumerate().map(|(i, s)| relabel(s, "train", i)).collect();
    let mut test: Vec<EditSample> = test_src.iter().enumerate().map(|(i, s)| relabel(s, "test", i)).collect();
    for (i, s) in test.iter_mut().enumerate() {
        // a quarter of the edits are already answered correctly
        if i % 4 == 0 {
            s.original_answer = Some(s.target_answer.clone());
        }
    }
    let unique_mloc = kind == FixtureKind::Sweep;
    if unique_mloc {
        for (i, s) in test.iter_mut().enumerate().take(8) {
            let (item, sport, _) = IMAGE_PROBES[i];
            s.mm_locality = ImageProbe {
                image_ref: format!("images/okvqa/unique-{i}.jpg"),
                question: format!("Which sport uses the {item} in photo {i}?"),
                answer: sport.to_string(),
            };
        }
    }

    let mut behavior = ScriptedBehavior {
        interference: true,
        ..ScriptedBehavior::default()
    };
    for (i, s) in test.iter().enumerate() {
        let original = s.original_answer.clone().expect("set above");
        behavior.insert_base(&s.image_ref, &s.question, &original);
        behavior.insert_base(&s.image_ref, &s.rephrased_question, &original);
        behavior
            .aliases
            .insert(s.rephrased_question.clone(), s.question.clone());
        let j = i % TEXT_PROBES.len();
        behavior.insert_base(NO_IMAGE, &s.text_locality.question, TEXT_PROBES[j].2);
        behavior.insert_base(&s.mm_locality.image_ref, &s.mm_locality.question, IMAGE_PROBES[j].2);
    }
    behavior.base_table.sort_by(|a, b| (&a.image, &a.question).cmp(&(&b.image, &b.question)));
    behavior.base_table.dedup();

    let train = Dataset::new(train, Split::Train)?;
    let test = Dataset::new(test, Split::Test)?;

    let question_rows = |ds: &Dataset| -> (Vec<String>, Vec<Vec<f32>>) {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for s in ds.samples() {
            for (kind, text) in [
                (DemoKind::Edit, &s.question),
                (DemoKind::Rephrase, &s.rephrased_question),
                (DemoKind::TextLocality, &s.text_locality.question),
                (DemoKind::MmLocality, &s.mm_locality.question),
            ] {
                ids.push(feature_key(&s.id, kind));
                rows.push(question_feature(text, kind.label()));
            }
        }
        (ids, rows)
    };
    let (ids, rows) = question_rows(&train);
    let train_questions = EmbeddingMatrix::from_rows(ids, rows, "fixture-text")?;
    let (ids, mut rows) = question_rows(&test);

    if kind == FixtureKind::Sweep {
        for (i, s) in test.samples().iter().enumerate().take(16) {
            let grade = GRADES[i / 4];
            let target = question_feature(&text_probe(i).question, Label::OutOfDomain);
            rows[4 * i] = graded_feature(&target, grade, &s.question);
            rows[4 * i + 1] = graded_feature(&target, grade, &s.rephrased_question);
            if i < 8 {
                let target = question_feature(&image_probe(i).question, Label::OutOfDomain);
                rows[4 * i + 3] = graded_feature(&target, GRADES[i % 4], &s.mm_locality.question);
            }
        }
    }
    let test_questions = EmbeddingMatrix::from_rows(ids, rows, "fixture-text")?;

    let mut demo_ids = Vec::new();
    let mut demo_rows = Vec::new();
    for s in train.samples() {
        for d in build_demonstrations(s)? {
            demo_ids.push(d.feature_key());
            demo_rows.push(demonstration_feature(&d.text, d.label));
        }
    }
    let train_demonstrations = EmbeddingMatrix::from_rows(demo_ids, demo_rows, "fixture-text")?;
    let test_images = EmbeddingMatrix::from_rows(
        test.samples().iter().map(|s| s.id.clone()).collect(),
        test.samples().iter().map(|s| image_feature(&s.image_ref)).collect(),
        "fixture-image",
    )?;

    Ok(FixtureBundle {
        kind,
        train,
        test,
        train_questions,
        train_demonstrations,
        test_questions,
        test_images,
        behavior,
    })
}

/// Writes the bundle under `dir` with a `config.toml` that runs it, and
/// returns that configuration.
pub fn write_fixture(bundle: &FixtureBundle, dir: &Path, seed: u64) -> Result<RunConfig> {
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let cfg = RunConfig {
        seed: Some(seed),
        backend: BackendSpec {
            scripted: Some("scripted.json".into()),
            ..BackendSpec::default()
        },
        sampling: crate::pipeline::SamplingConfig {
            m2_selection: M2Selection::Fraction(1.0),
            ..Default::default()
        },
        root: dir.to_path_buf(),
        ..RunConfig::default()
    };
    let p = &cfg.paths;
    write_manifest(&bundle.train, &cfg.resolve(&p.train_manifest))?;
    write_manifest(&bundle.test, &cfg.resolve(&p.test_manifest))?;
    write_embeddings(&bundle.train_questions, &cfg.resolve(&p.train_questions))?;
    write_embeddings(&bundle.train_demonstrations, &cfg.resolve(&p.train_demonstrations))?;
    write_embeddings(&bundle.test_questions, &cfg.resolve(&p.test_questions))?;
    write_embeddings(&bundle.test_images, &cfg.resolve(&p.test_images))?;
    bundle.behavior.save(&dir.join("scripted.json"))?;
    cfg.save(&dir.join("config.toml"))?;
    Ok(cfg)
}
