//! Edit samples, benchmark manifests, and the dataset-construction procedures
//! used to assemble the eight editing tasks from their source datasets.
//!
//! Manifests are JSON lines with one sample per line. Image locators are opaque
//! strings; nothing in this crate opens them.

mod fixture;
pub mod prep;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fixture::make_fixture;

/// The eight editing tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    ObjectExistence,
    ObjectRecognition,
    ObjectAttributes,
    ObjectCounting,
    SceneInformation,
    SpatialRelationship,
    TextRecognition,
    NumericalInference,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::ObjectExistence,
        Task::ObjectRecognition,
        Task::ObjectAttributes,
        Task::ObjectCounting,
        Task::SceneInformation,
        Task::SpatialRelationship,
        Task::TextRecognition,
        Task::NumericalInference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ObjectExistence => "object_existence",
            Task::ObjectRecognition => "object_recognition",
            Task::ObjectAttributes => "object_attributes",
            Task::ObjectCounting => "object_counting",
            Task::SceneInformation => "scene_information",
            Task::SpatialRelationship => "spatial_relationship",
            Task::TextRecognition => "text_recognition",
            Task::NumericalInference => "numerical_inference",
        }
    }

    /// Source dataset each task is drawn from.
    pub fn default_source(self) -> Source {
        match self {
            Task::ObjectExistence
            | Task::ObjectRecognition
            | Task::ObjectAttributes
            | Task::SceneInformation => Source::Gqa,
            Task::ObjectCounting => Source::TallyQa,
            Task::SpatialRelationship => Source::Vsr,
            Task::TextRecognition => Source::TextVqa,
            Task::NumericalInference => Source::MathVista,
        }
    }

    /// Published (train, test) sample counts of the benchmark.
    pub fn benchmark_counts(self) -> (usize, usize) {
        match self {
            Task::ObjectExistence => (1471, 491),
            Task::ObjectRecognition => (2227, 735),
            Task::ObjectAttributes => (2282, 705),
            Task::ObjectCounting => (1506, 503),
            Task::SceneInformation => (2067, 787),
            Task::SpatialRelationship => (1709, 530),
            Task::TextRecognition => (1554, 519),
            Task::NumericalInference => (634, 212),
        }
    }
}

pub const BENCHMARK_TRAIN_TOTAL: usize = 13450;
pub const BENCHMARK_TEST_TOTAL: usize = 4482;

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    /// Accepts `object_counting`, `Object Counting`, `ObjectCounting`, ...
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Task::ALL
            .into_iter()
            .find(|t| t.as_str().replace('_', "") == key)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Gqa,
    TallyQa,
    Vsr,
    TextVqa,
    MathVista,
    Synthetic,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Gqa => "GQA",
            Source::TallyQa => "TallyQA",
            Source::Vsr => "VSR",
            Source::TextVqa => "TextVQA",
            Source::MathVista => "MathVista",
            Source::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Source::Gqa,
            Source::TallyQa,
            Source::Vsr,
            Source::TextVqa,
            Source::MathVista,
            Source::Synthetic,
        ]
        .into_iter()
        .find(|src| src.as_str().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| Error::UnknownSource(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextProbe {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageProbe {
    pub image_ref: String,
    pub question: String,
    pub answer: String,
}

/// One editable fact plus the probes used to score generality and locality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSample {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub target_answer: String,
    pub original_answer: Option<String>,
    pub rephrased_question: String,
    pub text_locality: TextProbe,
    pub mm_locality: ImageProbe,
    pub task: Task,
    pub source: Source,
}

impl EditSample {
    /// Checks the per-sample invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidSample {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(bad("empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(bad("empty question"));
        }
        if self.target_answer.trim().is_empty() {
            return Err(bad("empty target answer"));
        }
        Ok(())
    }
}

/// Line format of a manifest. Field names are part of the file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    image: String,
    question: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    original: Option<String>,
    #[serde(default)]
    rephrase: String,
    #[serde(default)]
    loc_q: String,
    #[serde(default)]
    loc_a: String,
    #[serde(default)]
    mloc_image: String,
    #[serde(default)]
    mloc_q: String,
    #[serde(default)]
    mloc_a: String,
    task: String,
    source: String,
}

impl TryFrom<ManifestRecord> for EditSample {
    type Error = Error;

    fn try_from(r: ManifestRecord) -> Result<Self> {
        let sample = EditSample {
            task: r.task.parse()?,
            source: r.source.parse()?,
            id: r.id,
            image_ref: r.image,
            question: r.question,
            target_answer: r.target,
            original_answer: r.original,
            rephrased_question: r.rephrase,
            text_locality: TextProbe {
                question: r.loc_q,
                answer: r.loc_a,
            },
            mm_locality: ImageProbe {
                image_ref: r.mloc_image,
                question: r.mloc_q,
                answer: r.mloc_a,
            },
        };
        sample.validate()?;
        Ok(sample)
    }
}

impl From<&EditSample> for ManifestRecord {
    fn from(s: &EditSample) -> Self {
        ManifestRecord {
            id: s.id.clone(),
            image: s.image_ref.clone(),
            question: s.question.clone(),
            target: s.target_answer.clone(),
            original: s.original_answer.clone(),
            rephrase: s.rephrased_question.clone(),
            loc_q: s.text_locality.question.clone(),
            loc_a: s.text_locality.answer.clone(),
            mloc_image: s.mm_locality.image_ref.clone(),
            mloc_q: s.mm_locality.question.clone(),
            mloc_a: s.mm_locality.answer.clone(),
            task: s.task.as_str().to_string(),
            source: s.source.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<EditSample>,
    split: Split,
    counts_by_task: BTreeMap<Task, usize>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids and invalid samples.
    pub fn new(samples: Vec<EditSample>, split: Split) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        let mut counts_by_task = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            *counts_by_task.entry(s.task).or_insert(0) += 1;
        }
        Ok(Dataset {
            samples,
            split,
            counts_by_task,
            index,
        })
    }

    pub fn samples(&self) -> &[EditSample] {
        &self.samples
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn counts_by_task(&self) -> &BTreeMap<Task, usize> {
        &self.counts_by_task
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EditSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Checks a real benchmark manifest against the published task counts.
    pub fn validate_benchmark_counts(&self) -> Result<()> {
        let total = match self.split {
            Split::Train => BENCHMARK_TRAIN_TOTAL,
            Split::Test => BENCHMARK_TEST_TOTAL,
        };
        let pick = |(train, test): (usize, usize)| match self.split {
            Split::Train => train,
            Split::Test => test,
        };
        if self.len() != total {
            return Err(Error::invalid(format!(
                "expected {total} samples, found {}",
                self.len()
            )));
        }
        for task in Task::ALL {
            let want = pick(task.benchmark_counts());
            let got = self.counts_by_task.get(&task).copied().unwrap_or(0);
            if want != got {
                return Err(Error::invalid(format!(
                    "task {task}: expected {want} samples, found {got}"
                )));
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path, split: Split) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let sample = EditSample::try_from(record)?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::DuplicateId(sample.id));
        }
        samples.push(sample);
    }
    Dataset::new(samples, split)
}

pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in dataset.samples() {
        serde_json::to_writer(&mut w, &ManifestRecord::from(s))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
