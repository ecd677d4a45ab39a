//! Editing metrics: reliability, text generality, text and multimodal
//! locality, and the in-domain generalization/preservation indices computed
//! over dual-ended (nearest and farthest) neighbor samples.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::embeddings::{knn, EmbeddingMatrix, Metric, Order};
use crate::error::{Error, Result};

/// Lowercases, trims, collapses internal whitespace, and strips trailing `.,!?`.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | '!' | '?') || c.is_whitespace())
        .to_string()
}

fn boolean_form(normalized: &str) -> Option<&'static str> {
    match normalized {
        "yes" | "true" => Some("true"),
        "no" | "false" => Some("false"),
        _ => None,
    }
}

/// Normalized exact match. `yes`/`no` and `true`/`false` are interchangeable
/// only when the reference itself is boolean.
pub fn answers_match(answer: &str, reference: &str) -> bool {
    let a = normalize_answer(answer);
    let r = normalize_answer(reference);
    if a == r {
        return true;
    }
    match (boolean_form(&r), boolean_form(&a)) {
        (Some(rb), Some(ab)) => rb == ab,
        _ => false,
    }
}

fn mean(indicators: impl IntoIterator<Item = bool>) -> Option<f64> {
    let (hits, n) = indicators
        .into_iter()
        .fold((0usize, 0usize), |(h, n), ok| (h + ok as usize, n + 1));
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Share of edit samples answered with their target after editing.
pub fn reliability(edited_answers: &BTreeMap<String, String>, dataset: &Dataset) -> Result<f64> {
    score_against_target(edited_answers, dataset)
}

/// Same as [`reliability`] but the answers are for the rephrased questions.
pub fn text_generality(
    rephrase_answers: &BTreeMap<String, String>,
    dataset: &Dataset,
) -> Result<f64> {
    for s in dataset.samples() {
        if s.rephrased_question.trim().is_empty() {
            return Err(Error::InvalidSample {
                id: s.id.clone(),
                reason: "missing rephrased question".into(),
            });
        }
    }
    score_against_target(rephrase_answers, dataset)
}

fn score_against_target(answers: &BTreeMap<String, String>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = dataset
        .samples()
        .iter()
        .map(|s| {
            answers
                .get(&s.id)
                .map(|a| answers_match(a, &s.target_answer))
                .ok_or_else(|| Error::MissingAnswer(s.id.clone()))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(mean(hits).expect("dataset is non-empty"))
}

/// A locality probe's answers before and after the edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityObservation {
    pub id: String,
    pub pre: Option<String>,
    pub post: String,
}

/// Share of probes whose post-edit answer equals the pre-edit answer. Ground
/// truth is never consulted.
pub fn locality(observations: &[LocalityObservation]) -> Result<f64> {
    let hits = observations
        .iter()
        .map(|o| {
            o.pre
                .as_deref()
                .map(|pre| normalize_answer(pre) == normalize_answer(&o.post))
                .ok_or_else(|| Error::MissingAnswer(format!("{} (pre-edit)", o.id)))
        })
        .collect::<Result<Vec<bool>>>()?;
    mean(hits).ok_or(Error::EmptyDataset)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub original_answer: String,
    pub correct: bool,
}

/// Whether the unedited model answered each in-domain sample correctly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineBitmap {
    pub entries: BTreeMap<String, BaselineEntry>,
}

impl BaselineBitmap {
    /// Scores `original_answers` against each sample's target answer.
    pub fn from_answers(dataset: &Dataset, original_answers: &BTreeMap<String, String>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for s in dataset.samples() {
            let answer = original_answers
                .get(&s.id)
                .ok_or_else(|| Error::MissingAnswer(s.id.clone()))?;
            entries.insert(
                s.id.clone(),
                BaselineEntry {
                    original_answer: answer.clone(),
                    correct: answers_match(answer, &s.target_answer),
                },
            );
        }
        Ok(BaselineBitmap { entries })
    }

    pub fn is_correct(&self, id: &str) -> Option<bool> {
        self.entries.get(id).map(|e| e.correct)
    }
}

/// Splits a same-source pool into samples the original model got wrong
/// (generalization pool) and right (preservation pool). The edit sample is
/// removed from both.
pub fn split_kgi_kpi<S: AsRef<str>>(
    bitmap: &BaselineBitmap,
    edit_id: &str,
    pool: &[S],
) -> Result<(Vec<String>, Vec<String>)> {
    let mut kgi = Vec::new();
    let mut kpi = Vec::new();
    for id in pool {
        let id = id.as_ref();
        let correct = bitmap
            .is_correct(id)
            .ok_or_else(|| Error::MissingAnswer(format!("{id} (baseline)")))?;
        if id == edit_id {
            continue;
        }
        if correct {
            kpi.push(id.to_string());
        } else {
            kgi.push(id.to_string());
        }
    }
    Ok((kgi, kpi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Kgi,
    Kpi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub edit_id: String,
    pub pool: PoolKind,
    pub feature_kind: FeatureKind,
    pub near_ids: Vec<String>,
    pub far_ids: Vec<String>,
}

impl NeighborSet {
    pub fn is_empty(&self) -> bool {
        self.near_ids.is_empty() && self.far_ids.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.near_ids.iter().chain(&self.far_ids)
    }
}

/// The `k` nearest and `k` farthest pool members of the edit sample by L2.
/// Near is filled first; far draws only from what near left over.
///
/// `features` rows are keyed by sample id and must cover the edit sample and
/// every pool member.
pub fn sample_neighbors<S: AsRef<str>>(
    edit_id: &str,
    pool_ids: &[S],
    features: &EmbeddingMatrix,
    k: usize,
    pool: PoolKind,
    feature_kind: FeatureKind,
) -> Result<NeighborSet> {
    let mut set = NeighborSet {
        edit_id: edit_id.to_string(),
        pool,
        feature_kind,
        near_ids: Vec::new(),
        far_ids: Vec::new(),
    };
    let candidates: Vec<&str> = pool_ids
        .iter()
        .map(AsRef::as_ref)
        .filter(|id| *id != edit_id)
        .collect();
    if candidates.is_empty() {
        return Ok(set);
    }
    let query = features.require(edit_id)?;
    let sub = features.select(&candidates)?;
    set.near_ids = knn(query, &sub, k, Order::Nearest, Metric::L2, &HashSet::new())?;
    let taken: HashSet<&str> = set.near_ids.iter().map(String::as_str).collect();
    if taken.len() < sub.len() {
        set.far_ids = knn(query, &sub, k, Order::Farthest, Metric::L2, &taken)?;
    }
    Ok(set)
}

/// Outer mean over edits of the inner mean over that edit's neighbor
/// indicators. Edits without neighbors are skipped and counted.
pub fn nested_mean(per_edit: &[(String, Vec<bool>)]) -> (Option<f64>, usize) {
    let mut skipped = 0;
    let inner: Vec<f64> = per_edit
        .iter()
        .filter_map(|(_, hits)| {
            let m = mean(hits.iter().copied());
            if m.is_none() {
                skipped += 1;
            }
            m
        })
        .collect();
    let outer = (!inner.is_empty()).then(|| inner.iter().sum::<f64>() / inner.len() as f64);
    (outer, skipped)
}

/// Which query of an edit's evaluation a row records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Edit,
    Rephrase,
    TextLocality,
    MmLocality,
    ImageKgi,
    TextKgi,
    ImageKpi,
    TextKpi,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Edit => "edit",
            ProbeKind::Rephrase => "rephrase",
            ProbeKind::TextLocality => "text_locality",
            ProbeKind::MmLocality => "mm_locality",
            ProbeKind::ImageKgi => "image_kgi",
            ProbeKind::TextKgi => "text_kgi",
            ProbeKind::ImageKpi => "image_kpi",
            ProbeKind::TextKpi => "text_kpi",
        }
    }

    pub fn neighbor(pool: PoolKind, feature_kind: FeatureKind) -> Self {
        match (pool, feature_kind) {
            (PoolKind::Kgi, FeatureKind::Image) => ProbeKind::ImageKgi,
            (PoolKind::Kgi, FeatureKind::Text) => ProbeKind::TextKgi,
            (PoolKind::Kpi, FeatureKind::Image) => ProbeKind::ImageKpi,
            (PoolKind::Kpi, FeatureKind::Text) => ProbeKind::TextKpi,
        }
    }
}

/// One scored query, kept so every metric can be recomputed from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub edit_id: String,
    pub probe: ProbeKind,
    pub probe_id: String,
    pub image: String,
    pub question: String,
    /// Target answer, or the pre-edit answer for locality probes.
    pub reference: String,
    pub answer: String,
    pub route: String,
    pub correct: bool,
}

/// Column names in report order.
pub const METRIC_NAMES: [&str; 8] = ["Rel", "T-G", "T-L", "M-L", "I-KGI", "T-KGI", "I-KPI", "T-KPI"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel: f64,
    pub t_g: f64,
    pub t_l: f64,
    pub m_l: f64,
    pub i_kgi: Option<f64>,
    pub t_kgi: Option<f64>,
    pub i_kpi: Option<f64>,
    pub t_kpi: Option<f64>,
    pub edits: usize,
    /// Edits excluded from each index for lack of neighbors.
    pub skipped: BTreeMap<String, usize>,
}

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.rel),
            Some(self.t_g),
            Some(self.t_l),
            Some(self.m_l),
            self.i_kgi,
            self.t_kgi,
            self.i_kpi,
            self.t_kpi,
        ]
    }

    pub fn markdown_header() -> String {
        format!(
            "| {} |\n|{}",
            METRIC_NAMES.join(" | "),
            "---|".repeat(METRIC_NAMES.len())
        )
    }

    /// Table cells as percentages with two decimals; `-` when undefined.
    pub fn markdown_cells(&self) -> String {
        self.values()
            .iter()
            .map(|v| match v {
                Some(x) => format!("{:.2}", 100.0 * x),
                None => "-".to_string(),
            })
            .collect::<Vec<_>>()
            .join(" | ")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", Self::markdown_header()).unwrap();
        writeln!(out, "| {} |", self.markdown_cells()).unwrap();
        if self.skipped.values().any(|&n| n > 0) {
            writeln!(out).unwrap();
            for (name, n) in &self.skipped {
                writeln!(out, "- {name}: {n} of {} edits had no neighbors", self.edits).unwrap();
            }
        }
        out
    }
}

/// Aggregates evidence rows. `edit_ids` lists every evaluated edit so edits
/// without neighbor rows are reported as skipped.
pub fn compute_report(edit_ids: &[String], rows: &[EvidenceRow]) -> Result<MetricReport> {
    if edit_ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let flat = |kind: ProbeKind| -> Result<f64> {
        let hits: Vec<bool> = rows.iter().filter(|r| r.probe == kind).map(|r| r.correct).collect();
        if hits.len() != edit_ids.len() {
            return Err(Error::MissingAnswer(format!(
                "{kind:?} rows: expected {}, found {}",
                edit_ids.len(),
                hits.len()
            )));
        }
        Ok(mean(hits).expect("non-empty"))
    };
    let mut skipped = BTreeMap::new();
    let mut nested = |kind: ProbeKind, name: &str| {
        let per_edit: Vec<(String, Vec<bool>)> = edit_ids
            .iter()
            .map(|id| {
                let hits = rows
                    .iter()
                    .filter(|r| r.probe == kind && &r.edit_id == id)
                    .map(|r| r.correct)
                    .collect();
                (id.clone(), hits)
            })
            .collect();
        let (value, n_skipped) = nested_mean(&per_edit);
        skipped.insert(name.to_string(), n_skipped);
        value
    };
    let i_kgi = nested(ProbeKind::ImageKgi, "I-KGI");
    let t_kgi = nested(ProbeKind::TextKgi, "T-KGI");
    let i_kpi = nested(ProbeKind::ImageKpi, "I-KPI");
    let t_kpi = nested(ProbeKind::TextKpi, "T-KPI");
    Ok(MetricReport {
        rel: flat(ProbeKind::Edit)?,
        t_g: flat(ProbeKind::Rephrase)?,
        t_l: flat(ProbeKind::TextLocality)?,
        m_l: flat(ProbeKind::MmLocality)?,
        i_kgi,
        t_kgi,
        i_kpi,
        t_kpi,
        edits: edit_ids.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_fixture, Task};

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer(" Parrot. "), "parrot");
        assert_eq!(normalize_answer("two  birds"), normalize_answer("two birds"));
        assert_eq!(normalize_answer("Yes!?"), "yes");
        assert!(answers_match("TRUE", "yes"));
        assert!(answers_match("no", "False"));
        assert!(!answers_match("yes", "no"));
        // boolean mapping only applies to boolean references
        assert!(!answers_match("true", "yes please"));
    }

    fn fixture(n: usize) -> Dataset {
        make_fixture(&BTreeMap::from([(Task::ObjectAttributes, n)]), 4)
    }

    fn answers(ds: &Dataset, correct: &[bool]) -> BTreeMap<String, String> {
        ds.samples()
            .iter()
            .zip(correct)
            .map(|(s, &ok)| {
                let a = if ok { s.target_answer.to_uppercase() } else { "nope".into() };
                (s.id.clone(), a)
            })
            .collect()
    }

    #[test]
    fn reliability_cases() {
        let ds = fixture(5);
        assert_eq!(reliability(&answers(&ds, &[true; 5]), &ds).unwrap(), 1.0);
        let r = reliability(&answers(&ds, &[true, false, true, false, true]), &ds).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
        let mut partial = answers(&ds, &[true; 5]);
        partial.remove(&ds.samples()[2].id);
        assert!(matches!(reliability(&partial, &ds), Err(Error::MissingAnswer(_))));
        let empty = Dataset::new(vec![], ds.split()).unwrap();
        assert!(matches!(reliability(&BTreeMap::new(), &empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn generality_cases() {
        let ds = fixture(4);
        let g = text_generality(&answers(&ds, &[false, true, false, false]), &ds).unwrap();
        assert!((g - 0.25).abs() < 1e-12);
    }

    #[test]
    fn generality_is_independent_of_reliability() {
        let ds = fixture(1);
        let edit = answers(&ds, &[true]);
        let rephrase = answers(&ds, &[false]);
        assert_eq!(reliability(&edit, &ds).unwrap(), 1.0);
        assert_eq!(text_generality(&rephrase, &ds).unwrap(), 0.0);
    }

    fn obs(pre: &str, post: &str) -> LocalityObservation {
        LocalityObservation {
            id: "p".into(),
            pre: Some(pre.into()),
            post: post.into(),
        }
    }

    #[test]
    fn locality_cases() {
        assert_eq!(locality(&[obs("a", "a"), obs("b", "B.")]).unwrap(), 1.0);
        let mut probes: Vec<_> = (0..10).map(|_| obs("x", "x")).collect();
        probes[3].post = "y".into();
        probes[7].post = "z".into();
        assert!((locality(&probes).unwrap() - 0.8).abs() < 1e-12);
        let missing = LocalityObservation {
            id: "q".into(),
            pre: None,
            post: "x".into(),
        };
        assert!(locality(&[missing]).is_err());
        assert!(locality(&[]).is_err());
    }

    fn bitmap(entries: &[(&str, bool)]) -> BaselineBitmap {
        BaselineBitmap {
            entries: entries
                .iter()
                .map(|(id, c)| {
                    (
                        id.to_string(),
                        BaselineEntry {
                            original_answer: String::new(),
                            correct: *c,
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn kgi_kpi_split_definition() {
        let b = bitmap(&[("a", false), ("b", true), ("s", false)]);
        let (kgi, kpi) = split_kgi_kpi(&b, "s", &["a", "b", "s"]).unwrap();
        assert_eq!(kgi, ["a"]);
        assert_eq!(kpi, ["b"]);
        let all_right = bitmap(&[("a", true), ("b", true)]);
        let (kgi, _) = split_kgi_kpi(&all_right, "s", &["a", "b"]).unwrap();
        assert!(kgi.is_empty());
        assert!(split_kgi_kpi(&all_right, "s", &["zz"]).is_err());
    }

    fn line(values: &[(&str, f32)]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            values.iter().map(|(id, _)| id.to_string()).collect(),
            1,
            values.iter().map(|(_, v)| *v).collect(),
            "",
        )
        .unwrap()
    }

    #[test]
    fn neighbors_one_dimensional() {
        let f = line(&[("e", 0.0), ("a", 1.0), ("b", 2.0), ("c", 9.0), ("d", 10.0)]);
        let set = sample_neighbors("e", &["e", "a", "b", "c", "d"], &f, 1, PoolKind::Kgi, FeatureKind::Image).unwrap();
        assert_eq!(set.near_ids, ["a"]);
        assert_eq!(set.far_ids, ["d"]);
    }

    #[test]
    fn neighbors_saturate() {
        let f = line(&[("e", 0.0), ("a", 1.0)]);
        let set = sample_neighbors("e", &["a"], &f, 4, PoolKind::Kpi, FeatureKind::Text).unwrap();
        assert_eq!(set.near_ids, ["a"]);
        assert!(set.far_ids.is_empty());
        let empty = sample_neighbors::<&str>("e", &[], &f, 4, PoolKind::Kpi, FeatureKind::Text).unwrap();
        assert!(empty.is_empty());
        let f3 = line(&[("e", 0.0), ("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        let set = sample_neighbors("e", &["a", "b", "c"], &f3, 2, PoolKind::Kpi, FeatureKind::Text).unwrap();
        assert_eq!(set.near_ids, ["a", "b"]);
        assert_eq!(set.far_ids, ["c"]);
    }

    #[test]
    fn nested_mean_by_hand() {
        let (v, skipped) = nested_mean(&[
            ("s1".into(), vec![true, false]),
            ("s2".into(), vec![true, true]),
            ("s3".into(), vec![]),
        ]);
        assert!((v.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(skipped, 1);
        assert_eq!(nested_mean(&[("s".into(), vec![])]), (None, 1));
    }

    #[test]
    fn markdown_has_eight_columns_in_order() {
        let r = MetricReport {
            rel: 1.0,
            t_g: 0.5,
            t_l: 1.0,
            m_l: 0.25,
            i_kgi: Some(0.1),
            t_kgi: None,
            i_kpi: Some(1.0),
            t_kpi: Some(0.0),
            edits: 2,
            skipped: BTreeMap::new(),
        };
        let md = r.to_markdown();
        assert!(md.starts_with("| Rel | T-G | T-L | M-L | I-KGI | T-KGI | I-KPI | T-KPI |"));
        assert!(md.contains("| 100.00 | 50.00 | 100.00 | 25.00 | 10.00 | - | 100.00 | 0.00 |"));
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[ a-zA-Z0-9.,!?]{0,30}") {
            let once = normalize_answer(&s);
            proptest::prop_assert_eq!(normalize_answer(&once), once.clone());
            proptest::prop_assert!(answers_match(&s, &once) || once.is_empty());
        }

        #[test]
        fn kgi_kpi_pools_partition_the_rest(bits in proptest::collection::vec(proptest::bool::ANY, 1..60), pick in 0usize..60) {
            let ids: Vec<String> = (0..bits.len()).map(|i| format!("s{i}")).collect();
            let mut bitmap = BaselineBitmap::default();
            for (id, &correct) in ids.iter().zip(&bits) {
                bitmap.entries.insert(id.clone(), BaselineEntry { original_answer: String::new(), correct });
            }
            let edit = &ids[pick % ids.len()];
            let (kgi, kpi) = split_kgi_kpi(&bitmap, edit, &ids).unwrap();
            proptest::prop_assert_eq!(kgi.len() + kpi.len(), ids.len() - 1);
            proptest::prop_assert!(!kgi.contains(edit) && !kpi.contains(edit));
            proptest::prop_assert!(kgi.iter().all(|id| !bitmap.entries[id].correct));
            proptest::prop_assert!(kpi.iter().all(|id| bitmap.entries[id].correct));
        }
    }
}
