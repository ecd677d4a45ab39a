//! Construction procedures that turn source VQA datasets into editing tasks:
//! frequency-based answer splits, boolean balancing, annotation-consistency
//! filtering, relation flipping, and per-answer capped splits.
//!
//! Every seeded operation uses `ChaCha8Rng::seed_from_u64(seed)`.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{knn, EmbeddingMatrix, Metric, Order};
use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

/// Answers ranked by frequency, most frequent first; ties by answer string.
fn answers_by_frequency<T>(records: &[T], answer_of: impl Fn(&T) -> &str) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(answer_of(r)).or_insert(0) += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(a, c)| (a.to_string(), c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Records whose answer is among the `train_answer_count` most frequent answers
/// go to train, the rest to test. Answer sets of the two sides are disjoint.
pub fn split_by_answer_frequency<T>(
    records: Vec<T>,
    train_answer_count: usize,
    answer_of: impl Fn(&T) -> &str,
) -> Result<(Vec<T>, Vec<T>)> {
    if train_answer_count == 0 {
        return Err(Error::invalid("train_answer_count must be at least 1"));
    }
    let ranked = answers_by_frequency(&records, &answer_of);
    if ranked.len() < train_answer_count {
        return Err(Error::invalid(format!(
            "only {} distinct answers, cannot select {train_answer_count} for training",
            ranked.len()
        )));
    }
    let train_answers: std::collections::HashSet<&str> = ranked[..train_answer_count]
        .iter()
        .map(|(a, _)| a.as_str())
        .collect();
    let (train, test): (Vec<T>, Vec<T>) = records
        .into_iter()
        .partition(|r| train_answers.contains(answer_of(r)));
    Ok((train, test))
}

fn boolean_label(answer: &str) -> Option<bool> {
    match normalize_answer(answer).as_str() {
        "true" | "yes" => Some(true),
        "false" | "no" => Some(false),
        _ => None,
    }
}

/// Downsamples the majority boolean label to a 1:1 ratio. Which majority
/// records survive is decided by `seed`; survivors keep their input order.
pub fn balance_boolean_answers<T>(
    records: Vec<T>,
    seed: u64,
    answer_of: impl Fn(&T) -> &str,
) -> Result<Vec<T>> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match boolean_label(answer_of(r)) {
            Some(true) => positives.push(i),
            Some(false) => negatives.push(i),
            None => {
                return Err(Error::invalid(format!(
                    "non-boolean answer `{}` at record {i}",
                    answer_of(r)
                )))
            }
        }
    }
    let (mut majority, minority) = if positives.len() >= negatives.len() {
        (positives, negatives)
    } else {
        (negatives, positives)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    majority.shuffle(&mut rng);
    majority.truncate(minority.len());

    let mut keep = vec![false; records.len()];
    for i in majority.into_iter().chain(minority) {
        keep[i] = true;
    }
    Ok(records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect())
}

/// A question with several human answers, as shipped by text-reading VQA sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub question: String,
    pub annotations: Vec<String>,
    pub answer_type: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistentRecord {
    pub record: AnnotationRecord,
    pub answer: String,
    pub agreement: f64,
}

/// Most common annotation and its count; ties go to the smaller string.
pub fn modal_annotation(annotations: &[String]) -> Option<(&str, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in annotations {
        *counts.entry(a.as_str()).or_insert(0) += 1;
    }
    // key order plus strict `>` keeps the smallest string among equal counts
    counts
        .into_iter()
        .fold(None, |best: Option<(&str, usize)>, (a, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((a, c)),
        })
}

/// Keeps a record iff its modal annotation covers strictly more than
/// `threshold` of all annotations; the kept answer is that modal annotation.
pub fn filter_by_annotation_consistency(
    records: Vec<AnnotationRecord>,
    threshold: f64,
) -> Result<Vec<ConsistentRecord>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} not in (0, 1]")));
    }
    let mut kept = Vec::new();
    for record in records {
        let Some((answer, count)) = modal_annotation(&record.annotations) else {
            return Err(Error::invalid(format!(
                "record `{}` has no annotations",
                record.question
            )));
        };
        let agreement = count as f64 / record.annotations.len() as f64;
        if agreement > threshold {
            let answer = answer.to_string();
            kept.push(ConsistentRecord {
                record,
                answer,
                agreement,
            });
        }
    }
    Ok(kept)
}

/// A spatial-relation statement `subject relation object` with a truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub id: String,
    pub image_ref: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub answer: String,
}

impl RelationRecord {
    pub fn description(&self) -> String {
        format!("The {} is {} the {}.", self.subject, self.relation, self.object)
    }
}

/// Replaces the relation of a seeded `fraction` of records with its nearest
/// other relation (L2 over `relation_features`, keyed by relation name) and
/// sets their answer to `false`.
///
/// The number of flipped records is `round(fraction * n)`.
pub fn flip_relations_by_similarity(
    mut records: Vec<RelationRecord>,
    relation_features: &EmbeddingMatrix,
    fraction: f64,
    seed: u64,
) -> Result<Vec<RelationRecord>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("fraction {fraction} not in [0, 1]")));
    }
    let mut nearest: HashMap<String, String> = HashMap::new();
    for r in &records {
        if nearest.contains_key(&r.relation) {
            continue;
        }
        let row = relation_features
            .row_by_id(&r.relation)
            .ok_or_else(|| Error::MissingFeature(r.relation.clone()))?;
        let exclude = std::collections::HashSet::from([r.relation.as_str()]);
        let hit = knn(row, relation_features, 1, Order::Nearest, Metric::L2, &exclude)?;
        nearest.insert(r.relation.clone(), hit[0].clone());
    }

    let n_flip = (fraction * records.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for &i in &order[..n_flip] {
        let r = &mut records[i];
        r.relation = nearest[&r.relation].clone();
        r.answer = "false".to_string();
    }
    Ok(records)
}

/// Per answer type: up to `test_cap` seeded picks go to test, then up to
/// `train_cap` of the remainder go to train. Leftovers are dropped. Both
/// outputs keep input order.
pub fn capped_per_answer_split<T>(
    records: Vec<T>,
    test_cap: usize,
    train_cap: usize,
    seed: u64,
    answer_of: impl Fn(&T) -> &str,
) -> Result<(Vec<T>, Vec<T>)> {
    if test_cap == 0 || train_cap == 0 {
        return Err(Error::invalid("caps must be at least 1"));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(answer_of(r).to_string()).or_default().push(i);
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Side {
        Unused,
        Train,
        Test,
    }
    let mut side = vec![Side::Unused; records.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n_test = idx.len().min(test_cap);
        for &i in &idx[..n_test] {
            side[i] = Side::Test;
        }
        for &i in idx[n_test..].iter().take(train_cap) {
            side[i] = Side::Train;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, s) in records.into_iter().zip(side) {
        match s {
            Side::Train => train.push(r),
            Side::Test => test.push(r),
            Side::Unused => {}
        }
    }
    Ok((train, test))
}
