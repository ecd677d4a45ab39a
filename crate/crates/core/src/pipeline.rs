//! File-backed evaluation pipeline. Every stage reads its inputs from disk,
//! writes its outputs to disk, and stamps them with a hash of the
//! configuration that produced them. Loading an artifact whose stamp does not
//! match the current configuration is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{map_limited, Backend, Encoder, ScriptedBackend, ScriptedBehavior, WireClient};
use crate::classifier::{
    build_demonstrations, default_lambda_grid, feature_key, fit_classifier, load_model, save_model,
    ClassifierConfig, ClassifierModel, DemoKind,
};
use crate::dataset::{load_manifest, Dataset, EditSample, Source, Split};
use crate::embeddings::{ids_sidecar_path, read_embeddings, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::memory::{
    build_m1, build_m2, load_m1, load_m2, read_jsonl, save_m1, save_m2, write_jsonl, ExemplarSelection,
    M2Candidate, M2Selection, MemoryM1, MemoryM2,
};
use crate::metrics::{
    answers_match, compute_report, normalize_answer, sample_neighbors, split_kgi_kpi, BaselineBitmap,
    EvidenceRow, FeatureKind, MetricReport, PoolKind, ProbeKind,
};
use crate::router::{DecisionRecord, EditPair, Query, Route, Router, RouterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Question features keyed `<id>/<edit|rephrase|loc|mloc>`.
    pub train_questions: PathBuf,
    /// Demonstration features keyed like the questions.
    pub train_demonstrations: PathBuf,
    pub test_questions: PathBuf,
    /// Image features keyed by sample id.
    pub test_images: PathBuf,
    pub work_dir: PathBuf,
    pub memory_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train_manifest: "train.jsonl".into(),
            test_manifest: "test.jsonl".into(),
            train_questions: "features/train_questions.emb".into(),
            train_demonstrations: "features/train_demonstrations.emb".into(),
            test_questions: "features/test_questions.emb".into(),
            test_images: "features/test_images.emb".into(),
            work_dir: "work".into(),
            memory_dir: "work/memory".into(),
            report_dir: "work/report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierParams {
    pub projection_dim: usize,
    pub lambda_grid: Vec<f64>,
    pub split_fraction: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            projection_dim: 10_000,
            lambda_grid: default_lambda_grid(),
            split_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Nearest and farthest neighbors per edit for the generalization and
    /// preservation indices.
    pub k: usize,
    pub ratio: f64,
    pub exemplar_selection: ExemplarSelection,
    pub m2_selection: M2Selection,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            k: 4,
            ratio: 0.05,
            exemplar_selection: ExemplarSelection::NearestToCentroid,
            m2_selection: M2Selection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    /// Scripted behavior JSON.
    pub scripted: Option<PathBuf>,
    /// Inference server base URL.
    pub url: Option<String>,
    pub concurrency: usize,
    pub timeout_secs: u64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            scripted: None,
            url: None,
            concurrency: 4,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub router: RouterConfig,
    pub classifier: ClassifierParams,
    pub sampling: SamplingConfig,
    pub backend: BackendSpec,
    /// Embedding server used by `ingest` to fill in missing feature files.
    pub adapter_url: Option<String>,
    /// Relative paths resolve against this directory.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            paths: PathsConfig::default(),
            router: RouterConfig::default(),
            classifier: ClassifierParams::default(),
            sampling: SamplingConfig::default(),
            backend: BackendSpec::default(),
            adapter_url: None,
            root: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.root.as_os_str().is_empty() {
            cfg.root = PathBuf::from(".");
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::invalid("a seed is required (set `seed` or pass --seed)"))
    }

    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        let s = &self.sampling;
        if !(s.ratio > 0.0 && s.ratio <= 1.0) {
            return Err(Error::invalid(format!("ratio {} not in (0, 1]", s.ratio)));
        }
        let c = &self.classifier;
        if c.projection_dim == 0 {
            return Err(Error::invalid("projection_dim must be positive"));
        }
        if c.lambda_grid.is_empty() || c.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("lambda grid must be non-empty and positive"));
        }
        if !(c.split_fraction > 0.0 && c.split_fraction < 1.0) {
            return Err(Error::invalid("split_fraction must be in (0, 1)"));
        }
        match (&self.backend.scripted, &self.backend.url) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::invalid("configure exactly one of backend.scripted or backend.url")),
        }
    }

    fn classifier_config(&self, projected: bool) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            projection_dim: projected.then_some(self.classifier.projection_dim),
            lambda_grid: self.classifier.lambda_grid.clone(),
            split_fraction: self.classifier.split_fraction,
            seed: self.require_seed()?,
        })
    }

    pub fn work_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.paths.work_dir).join(name)
    }

    pub fn memory_dir(&self) -> PathBuf {
        self.resolve(&self.paths.memory_dir)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.resolve(&self.paths.report_dir)
    }
}

/// Builds the configured backend.
pub fn make_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>> {
    match (&cfg.backend.scripted, &cfg.backend.url) {
        (Some(path), None) => Ok(Box::new(ScriptedBackend::new(ScriptedBehavior::load(&cfg.resolve(path))?))),
        (None, Some(url)) => Ok(Box::new(WireClient::new(
            url,
            cfg.backend.concurrency,
            Duration::from_secs(cfg.backend.timeout_secs),
        ))),
        _ => Err(Error::invalid("configure exactly one of backend.scripted or backend.url")),
    }
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(v)?)
}

fn file_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Stamps derived from the configuration and input file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamps {
    pub data: String,
    pub baseline: String,
    pub classifier: String,
    pub memory: String,
}

impl Stamps {
    pub fn compute(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        let mut data_parts = Vec::new();
        for f in [&p.train_manifest, &p.test_manifest] {
            data_parts.push(file_bytes(&cfg.resolve(f))?);
        }
        for f in [&p.train_questions, &p.train_demonstrations, &p.test_questions, &p.test_images] {
            let f = cfg.resolve(f);
            data_parts.push(file_bytes(&f)?);
            data_parts.push(file_bytes(&ids_sidecar_path(&f))?);
        }
        let refs: Vec<&[u8]> = data_parts.iter().map(Vec::as_slice).collect();
        let data = sha_hex(&refs);
        let backend = backend_fingerprint(cfg)?;
        let baseline = sha_hex(&[b"baseline", data.as_bytes(), &backend]);
        let seed = cfg.require_seed()?;
        let classifier = sha_hex(&[
            b"classifier",
            data.as_bytes(),
            &json_bytes(&cfg.classifier)?,
            &seed.to_le_bytes(),
        ]);
        let memory = sha_hex(&[
            b"memory",
            classifier.as_bytes(),
            &json_bytes(&cfg.sampling.ratio)?,
            &json_bytes(&cfg.sampling.exemplar_selection)?,
            &json_bytes(&cfg.sampling.m2_selection)?,
        ]);
        Ok(Stamps {
            data,
            baseline,
            classifier,
            memory,
        })
    }

    /// Stamp of an evaluation run under `router` with the given options.
    pub fn evaluation(&self, cfg: &RunConfig, router: &RouterConfig, corrupt: bool) -> Result<String> {
        Ok(sha_hex(&[
            b"evaluate",
            self.memory.as_bytes(),
            self.baseline.as_bytes(),
            &json_bytes(router)?,
            &json_bytes(&cfg.sampling.k)?,
            &[corrupt as u8],
        ]))
    }
}

fn backend_fingerprint(cfg: &RunConfig) -> Result<Vec<u8>> {
    let mut out = json_bytes(&(&cfg.backend.scripted, &cfg.backend.url))?;
    if let Some(p) = &cfg.backend.scripted {
        out.extend(file_bytes(&cfg.resolve(p))?);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct StampFile {
    stamp: String,
}

fn write_stamp(path: &Path, stamp: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(&StampFile { stamp: stamp.to_string() })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_stamp(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<StampFile>(&text)?.stamp)
}

fn check_stamp(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::StaleArtifact {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

fn is_fresh(path: &Path, expected: &str) -> bool {
    read_stamp(path).map(|s| s == expected).unwrap_or(false)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Question-feature keys for every sample and probe kind.
fn question_keys(ds: &Dataset) -> Vec<String> {
    ds.samples()
        .iter()
        .flat_map(|s| DemoKind::ALL.map(|k| feature_key(&s.id, k)))
        .collect()
}

fn question_texts(ds: &Dataset) -> Vec<String> {
    ds.samples()
        .iter()
        .flat_map(|s| {
            [
                s.question.clone(),
                s.rephrased_question.clone(),
                s.text_locality.question.clone(),
                s.mm_locality.question.clone(),
            ]
        })
        .collect()
}

fn demonstration_texts(ds: &Dataset) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for s in ds.samples() {
        out.extend(build_demonstrations(s)?.into_iter().map(|d| d.text));
    }
    Ok(out)
}

fn ensure_features(
    path: &Path,
    keys: &[String],
    encoder: Option<&dyn Encoder>,
    make: impl FnOnce(&dyn Encoder) -> Result<Vec<Vec<f32>>>,
    tag: &str,
) -> Result<EmbeddingMatrix> {
    if path.exists() {
        let m = read_embeddings(path)?;
        for k in keys {
            m.require(k)?;
        }
        return Ok(m);
    }
    let encoder = encoder.ok_or_else(|| {
        Error::invalid(format!("{} is missing and no adapter is configured", path.display()))
    })?;
    let m = EmbeddingMatrix::from_rows(keys.to_vec(), make(encoder)?, tag)?;
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    write_embeddings(&m, path)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub stamp: String,
    pub train: usize,
    pub test: usize,
    pub question_dim: usize,
    pub image_dim: usize,
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = load_manifest(&cfg.resolve(&cfg.paths.train_manifest), Split::Train)?;
    let test = load_manifest(&cfg.resolve(&cfg.paths.test_manifest), Split::Test)?;
    Ok((train, test))
}

/// Loads both manifests, checks every feature file covers them (embedding
/// missing files through `encoder` when given), and writes `ingest.json`.
pub fn ingest(cfg: &RunConfig, encoder: Option<&dyn Encoder>) -> Result<IngestSummary> {
    stage("ingest", (|| {
        let (train, test) = load_datasets(cfg)?;
        let p = &cfg.paths;
        let tq = ensure_features(
            &cfg.resolve(&p.train_questions),
            &question_keys(&train),
            encoder,
            |e| e.embed_texts(&question_texts(&train)),
            "text",
        )?;
        let demo_keys = question_keys(&train);
        ensure_features(
            &cfg.resolve(&p.train_demonstrations),
            &demo_keys,
            encoder,
            |e| e.embed_texts(&demonstration_texts(&train)?),
            "text",
        )?;
        let sq = ensure_features(
            &cfg.resolve(&p.test_questions),
            &question_keys(&test),
            encoder,
            |e| e.embed_texts(&question_texts(&test)),
            "text",
        )?;
        let ids: Vec<String> = test.samples().iter().map(|s| s.id.clone()).collect();
        let images = ensure_features(
            &cfg.resolve(&p.test_images),
            &ids,
            encoder,
            |e| e.embed_images(&test.samples().iter().map(|s| s.image_ref.clone()).collect::<Vec<_>>()),
            "image",
        )?;
        if tq.dim() != sq.dim() {
            return Err(Error::DimMismatch {
                expected: tq.dim(),
                actual: sq.dim(),
            });
        }
        let stamps = Stamps::compute(cfg)?;
        let summary = IngestSummary {
            stamp: stamps.data,
            train: train.len(),
            test: test.len(),
            question_dim: tq.dim(),
            image_dim: images.dim(),
        };
        create_dir(&cfg.resolve(&p.work_dir))?;
        let path = cfg.work_path("ingest.json");
        fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(summary)
    })())
}

/// Unedited answers: the correctness bitmap over test samples and the
/// pre-edit answers of every locality probe, keyed `<id>/loc` and `<id>/mloc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub stamp: String,
    pub bitmap: BaselineBitmap,
    pub pre_locality: BTreeMap<String, String>,
}

/// Image used for text-only probes.
pub const NO_IMAGE: &str = "";

pub fn baseline_eval(cfg: &RunConfig, backend: &dyn Backend) -> Result<Baseline> {
    stage("baseline-eval", (|| {
        let stamps = Stamps::compute(cfg)?;
        let (_, test) = load_datasets(cfg)?;
        let per_sample = map_limited(test.samples(), backend.max_concurrency(), |s| {
            Ok::<_, Error>((
                backend.answer(&s.image_ref, &s.question)?,
                backend.answer(NO_IMAGE, &s.text_locality.question)?,
                backend.answer(&s.mm_locality.image_ref, &s.mm_locality.question)?,
            ))
        })?;
        let mut original = BTreeMap::new();
        let mut pre_locality = BTreeMap::new();
        for (s, r) in test.samples().iter().zip(per_sample) {
            let (orig, loc, mloc) = r?;
            original.insert(s.id.clone(), orig);
            pre_locality.insert(feature_key(&s.id, DemoKind::TextLocality), loc);
            pre_locality.insert(feature_key(&s.id, DemoKind::MmLocality), mloc);
        }
        let baseline = Baseline {
            stamp: stamps.baseline,
            bitmap: BaselineBitmap::from_answers(&test, &original)?,
            pre_locality,
        };
        create_dir(&cfg.resolve(&cfg.paths.work_dir))?;
        let path = cfg.work_path("baseline.json");
        fs::write(&path, serde_json::to_string_pretty(&baseline)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(baseline)
    })())
}

pub fn load_baseline(cfg: &RunConfig, stamps: &Stamps) -> Result<Baseline> {
    let path = cfg.work_path("baseline.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let b: Baseline = serde_json::from_str(&text)?;
    check_stamp(&path, &stamps.baseline, &b.stamp)?;
    Ok(b)
}

pub const CLASSIFIER_FILE: &str = "classifier.bin";
pub const IDENTITY_CLASSIFIER_FILE: &str = "classifier-identity.bin";

/// The projected gate and its unprojected counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifiers {
    pub projected: ClassifierModel,
    pub identity: ClassifierModel,
}

impl Classifiers {
    pub fn for_router(&self, router: &RouterConfig) -> &ClassifierModel {
        if router.use_projection {
            &self.projected
        } else {
            &self.identity
        }
    }
}

/// Fits the gate on all `4N` training demonstrations, with and without the
/// random projection.
pub fn fit_classifiers(cfg: &RunConfig) -> Result<Classifiers> {
    stage("fit-classifier", (|| {
        let stamps = Stamps::compute(cfg)?;
        let (train, _) = load_datasets(cfg)?;
        let feats = read_embeddings(&cfg.resolve(&cfg.paths.train_demonstrations))?;
        let mut demos = Vec::with_capacity(4 * train.len());
        for s in train.samples() {
            demos.extend(build_demonstrations(s)?);
        }
        let projected = fit_classifier(&feats, &demos, &cfg.classifier_config(true)?)?;
        let identity = fit_classifier(&feats, &demos, &cfg.classifier_config(false)?)?;
        create_dir(&cfg.resolve(&cfg.paths.work_dir))?;
        save_model(&projected, &stamps.classifier, &cfg.work_path(CLASSIFIER_FILE))?;
        save_model(&identity, &stamps.classifier, &cfg.work_path(IDENTITY_CLASSIFIER_FILE))?;
        Ok(Classifiers { projected, identity })
    })())
}

pub fn load_classifiers(cfg: &RunConfig, stamps: &Stamps) -> Result<Classifiers> {
    let load = |name: &str| -> Result<ClassifierModel> {
        let path = cfg.work_path(name);
        let (model, stamp) = load_model(&path)?;
        check_stamp(&path, &stamps.classifier, &stamp)?;
        Ok(model)
    };
    Ok(Classifiers {
        projected: load(CLASSIFIER_FILE)?,
        identity: load(IDENTITY_CLASSIFIER_FILE)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Memories {
    pub m1: MemoryM1,
    /// Hard negatives ranked by the projected gate.
    pub m2_projected: MemoryM2,
    /// Hard negatives ranked by the unprojected gate.
    pub m2_identity: MemoryM2,
}

impl Memories {
    pub fn m2_for(&self, router: &RouterConfig) -> &MemoryM2 {
        if router.use_projection {
            &self.m2_projected
        } else {
            &self.m2_identity
        }
    }
}

/// Rows of `questions` keyed `<id>/edit`, re-keyed by sample id.
pub fn edit_features_by_id(ds: &Dataset, questions: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let rows = ds
        .samples()
        .iter()
        .map(|s| questions.require(&feature_key(&s.id, DemoKind::Edit)).map(<[f32]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let ids = ds.samples().iter().map(|s| s.id.clone()).collect();
    EmbeddingMatrix::from_rows(ids, rows, questions.encoder_tag())
}

/// Locality questions of the training set as hard-negative candidates.
pub fn m2_candidates(train: &Dataset, questions: &EmbeddingMatrix) -> Result<Vec<M2Candidate>> {
    let mut out = Vec::with_capacity(2 * train.len());
    for s in train.samples() {
        for (kind, q) in [
            (DemoKind::TextLocality, &s.text_locality.question),
            (DemoKind::MmLocality, &s.mm_locality.question),
        ] {
            out.push(M2Candidate {
                question: q.clone(),
                source_id: s.id.clone(),
                kind,
                feature: questions.require(&feature_key(&s.id, kind))?.to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn build_memories(cfg: &RunConfig) -> Result<Memories> {
    stage("build-memory", (|| {
        let stamps = Stamps::compute(cfg)?;
        let classifiers = load_classifiers(cfg, &stamps)?;
        let (train, _) = load_datasets(cfg)?;
        let questions = read_embeddings(&cfg.resolve(&cfg.paths.train_questions))?;
        let by_id = edit_features_by_id(&train, &questions)?;
        let m1 = build_m1(
            train.samples(),
            &by_id,
            &by_id,
            cfg.sampling.ratio,
            cfg.require_seed()?,
            cfg.sampling.exemplar_selection,
        )?;
        let candidates = m2_candidates(&train, &questions)?;
        let m2_projected = build_m2(&candidates, &classifiers.projected, cfg.sampling.m2_selection)?;
        let m2_identity = build_m2(&candidates, &classifiers.identity, cfg.sampling.m2_selection)?;
        let dir = cfg.memory_dir();
        save_m1(&m1, &dir, "m1")?;
        save_m2(&m2_projected, &dir, "m2-projected")?;
        save_m2(&m2_identity, &dir, "m2-identity")?;
        write_stamp(&dir.join("stamp.json"), &stamps.memory)?;
        Ok(Memories {
            m1,
            m2_projected,
            m2_identity,
        })
    })())
}

pub fn load_memories(cfg: &RunConfig, stamps: &Stamps) -> Result<Memories> {
    let dir = cfg.memory_dir();
    let path = dir.join("stamp.json");
    check_stamp(&path, &stamps.memory, &read_stamp(&path)?)?;
    Ok(Memories {
        m1: load_m1(&dir, "m1", cfg.sampling.ratio)?,
        m2_projected: load_m2(&dir, "m2-projected")?,
        m2_identity: load_m2(&dir, "m2-identity")?,
    })
}

/// Outputs of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub evidence: Vec<EvidenceRow>,
    pub decisions: Vec<DecisionRecord>,
    pub edit_ids: Vec<String>,
}

impl Evaluation {
    pub fn edited_routes(&self) -> usize {
        self.decisions.iter().filter(|d| d.route == Route::Edited).count()
    }
}

struct EvalContext<'a> {
    test: &'a Dataset,
    questions: &'a EmbeddingMatrix,
    images_by_id: &'a EmbeddingMatrix,
    text_by_id: &'a EmbeddingMatrix,
    baseline: &'a Baseline,
    pools: BTreeMap<Source, Vec<String>>,
    router: Router<'a>,
    backend: &'a dyn Backend,
    k: usize,
}

impl EvalContext<'_> {
    fn evaluate_edit(&self, s: &EditSample) -> Result<(Vec<EvidenceRow>, Vec<DecisionRecord>)> {
        let edit = EditPair {
            question: &s.question,
            answer: &s.target_answer,
        };
        let mut rows = Vec::new();
        let mut decisions = Vec::new();
        let mut ask = |probe: ProbeKind,
                       probe_id: &str,
                       image: &str,
                       question: &str,
                       key: String,
                       reference: &str,
                       consistency: bool|
         -> Result<()> {
            let query = Query {
                id: probe_id,
                image_ref: image,
                question,
                feature: self.questions.require(&key)?,
            };
            let (answer, decision) = self.router.edit_infer(edit, &query, self.backend)?;
            let correct = if consistency {
                normalize_answer(&answer) == normalize_answer(reference)
            } else {
                answers_match(&answer, reference)
            };
            decisions.push(DecisionRecord::new(
                &format!("{}/{}/{}", s.id, probe.as_str(), probe_id),
                &decision,
            ));
            rows.push(EvidenceRow {
                edit_id: s.id.clone(),
                probe,
                probe_id: probe_id.to_string(),
                image: image.to_string(),
                question: question.to_string(),
                reference: reference.to_string(),
                answer,
                route: decision.route.as_str().to_string(),
                correct,
            });
            Ok(())
        };

        ask(ProbeKind::Edit, &s.id, &s.image_ref, &s.question, feature_key(&s.id, DemoKind::Edit), &s.target_answer, false)?;
        ask(
            ProbeKind::Rephrase,
            &s.id,
            &s.image_ref,
            &s.rephrased_question,
            feature_key(&s.id, DemoKind::Rephrase),
            &s.target_answer,
            false,
        )?;
        let pre = |kind| {
            let key = feature_key(&s.id, kind);
            self.baseline
                .pre_locality
                .get(&key)
                .cloned()
                .ok_or(Error::MissingAnswer(format!("{key} (pre-edit)")))
        };
        ask(
            ProbeKind::TextLocality,
            &s.id,
            NO_IMAGE,
            &s.text_locality.question,
            feature_key(&s.id, DemoKind::TextLocality),
            &pre(DemoKind::TextLocality)?,
            true,
        )?;
        ask(
            ProbeKind::MmLocality,
            &s.id,
            &s.mm_locality.image_ref,
            &s.mm_locality.question,
            feature_key(&s.id, DemoKind::MmLocality),
            &pre(DemoKind::MmLocality)?,
            true,
        )?;

        let pool = &self.pools[&s.source];
        let (kgi, kpi) = split_kgi_kpi(&self.baseline.bitmap, &s.id, pool)?;
        for (pool_kind, ids) in [(PoolKind::Kgi, &kgi), (PoolKind::Kpi, &kpi)] {
            for (feature_kind, feats) in [(FeatureKind::Image, self.images_by_id), (FeatureKind::Text, self.text_by_id)] {
                let set = sample_neighbors(&s.id, ids, feats, self.k, pool_kind, feature_kind)?;
                for nid in set.ids() {
                    let n = self.test.get(nid).ok_or_else(|| Error::MissingFeature(nid.clone()))?;
                    ask(
                        ProbeKind::neighbor(pool_kind, feature_kind),
                        &n.id,
                        &n.image_ref,
                        &n.question,
                        feature_key(&n.id, DemoKind::Edit),
                        &n.target_answer,
                        false,
                    )?;
                }
            }
        }
        Ok((rows, decisions))
    }
}

/// Evaluates every test edit independently under `router` and writes
/// `evidence.jsonl`, `decisions.jsonl` and `stamp.json` to `out_dir`. With
/// `corrupt`, the routing gate's labels are swapped.
pub fn evaluate(
    cfg: &RunConfig,
    router_cfg: &RouterConfig,
    backend: &dyn Backend,
    corrupt: bool,
    out_dir: &Path,
) -> Result<Evaluation> {
    stage("evaluate", (|| {
        router_cfg.validate()?;
        let stamps = Stamps::compute(cfg)?;
        let baseline = load_baseline(cfg, &stamps)?;
        let classifiers = load_classifiers(cfg, &stamps)?;
        let memories = load_memories(cfg, &stamps)?;
        let (_, test) = load_datasets(cfg)?;
        let questions = read_embeddings(&cfg.resolve(&cfg.paths.test_questions))?;
        let images = read_embeddings(&cfg.resolve(&cfg.paths.test_images))?;
        let text_by_id = edit_features_by_id(&test, &questions)?;

        let gate = classifiers.for_router(router_cfg);
        let gate = if corrupt { gate.with_swapped_labels() } else { gate.clone() };
        let mut pools: BTreeMap<Source, Vec<String>> = BTreeMap::new();
        for s in test.samples() {
            pools.entry(s.source).or_default().push(s.id.clone());
        }
        let ctx = EvalContext {
            test: &test,
            questions: &questions,
            images_by_id: &images,
            text_by_id: &text_by_id,
            baseline: &baseline,
            pools,
            router: Router {
                classifier: &gate,
                m1: &memories.m1,
                m2: memories.m2_for(router_cfg),
                config: router_cfg,
            },
            backend,
            k: cfg.sampling.k,
        };
        let results = map_limited(test.samples(), backend.max_concurrency(), |s| ctx.evaluate_edit(s))?;
        let mut evaluation = Evaluation {
            evidence: Vec::new(),
            decisions: Vec::new(),
            edit_ids: test.samples().iter().map(|s| s.id.clone()).collect(),
        };
        for r in results {
            let (rows, decisions) = r?;
            evaluation.evidence.extend(rows);
            evaluation.decisions.extend(decisions);
        }
        create_dir(out_dir)?;
        write_jsonl(&out_dir.join("evidence.jsonl"), &evaluation.evidence)?;
        write_jsonl(&out_dir.join("decisions.jsonl"), &evaluation.decisions)?;
        write_stamp(&out_dir.join("stamp.json"), &stamps.evaluation(cfg, router_cfg, corrupt)?)?;
        Ok(evaluation)
    })())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub stamp: String,
    pub metrics: MetricReport,
}

/// Aggregates `evidence.jsonl` in `dir` into `report.json` and `report.md`.
/// The evidence must carry `expected_stamp`.
pub fn report(cfg: &RunConfig, dir: &Path, expected_stamp: &str) -> Result<MetricReport> {
    stage("report", (|| {
        let stamp_path = dir.join("stamp.json");
        check_stamp(&stamp_path, expected_stamp, &read_stamp(&stamp_path)?)?;
        let (_, test) = load_datasets(cfg)?;
        let rows: Vec<EvidenceRow> = read_jsonl(&dir.join("evidence.jsonl"))?;
        let ids: Vec<String> = test.samples().iter().map(|s| s.id.clone()).collect();
        let metrics = compute_report(&ids, &rows)?;
        let file = ReportFile {
            stamp: expected_stamp.to_string(),
            metrics: metrics.clone(),
        };
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(&file)? + "\n").map_err(|e| Error::io(&json, e))?;
        let md = dir.join("report.md");
        fs::write(&md, metrics.to_markdown()).map_err(|e| Error::io(&md, e))?;
        Ok(metrics)
    })())
}

/// Runs every stage whose artifact is missing or stale, then evaluates and
/// reports into the report directory.
pub fn run_pipeline(cfg: &RunConfig, backend: &dyn Backend, encoder: Option<&dyn Encoder>) -> Result<MetricReport> {
    cfg.validate()?;
    cfg.require_seed()?;
    let ingest_path = cfg.work_path("ingest.json");
    let fresh_ingest = fs::read_to_string(&ingest_path)
        .ok()
        .and_then(|t| serde_json::from_str::<IngestSummary>(&t).ok())
        .zip(Stamps::compute(cfg).ok())
        .is_some_and(|(s, st)| s.stamp == st.data);
    if !fresh_ingest {
        ingest(cfg, encoder)?;
    }
    let stamps = stage("ingest", Stamps::compute(cfg))?;
    if load_baseline(cfg, &stamps).is_err() {
        baseline_eval(cfg, backend)?;
    }
    if load_classifiers(cfg, &stamps).is_err() {
        fit_classifiers(cfg)?;
    }
    if !is_fresh(&cfg.memory_dir().join("stamp.json"), &stamps.memory) {
        build_memories(cfg)?;
    }
    let dir = cfg.report_dir();
    evaluate(cfg, &cfg.router, backend, false, &dir)?;
    report(cfg, &dir, &stamps.evaluation(cfg, &cfg.router, false)?)
}

/// Thresholds of the sweep.
pub const SWEEP_THRESHOLDS: [f64; 4] = [0.75, 0.80, 0.85, 0.90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub edited_routes: usize,
    pub metrics: MetricReport,
}

/// Evaluates the pipeline once per threshold; upstream artifacts must exist.
/// Writes `<work>/sweep/T<threshold>/` per run plus `sweep.json`/`sweep.md`.
pub fn sweep(cfg: &RunConfig, backend: &dyn Backend, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    let stamps = stage("sweep", Stamps::compute(cfg))?;
    let mut rows = Vec::new();
    for &t in thresholds {
        let router = RouterConfig {
            threshold: t,
            ..cfg.router.clone()
        };
        let dir = cfg.work_path("sweep").join(format!("T{t:.2}"));
        let eval = evaluate(cfg, &router, backend, false, &dir)?;
        let metrics = report(cfg, &dir, &stamps.evaluation(cfg, &router, false)?)?;
        rows.push(SweepRow {
            threshold: t,
            edited_routes: eval.edited_routes(),
            metrics,
        });
    }
    let dir = cfg.work_path("sweep");
    let json = dir.join("sweep.json");
    fs::write(&json, serde_json::to_string_pretty(&rows)? + "\n").map_err(|e| Error::io(&json, e))?;
    let md = dir.join("sweep.md");
    fs::write(&md, sweep_table(&rows)).map_err(|e| Error::io(&md, e))?;
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    writeln!(out, "| T | Edited | {} |", crate::metrics::METRIC_NAMES.join(" | ")).unwrap();
    writeln!(out, "|---|---|{}", "---|".repeat(8)).unwrap();
    for r in rows {
        writeln!(out, "| {:.2} | {} | {} |", r.threshold, r.edited_routes, r.metrics.markdown_cells()).unwrap();
    }
    out
}

/// One configuration of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub label: &'static str,
    pub slug: &'static str,
    pub use_m1: bool,
    pub use_projection: bool,
    pub use_m2: bool,
}

pub const ABLATION_ROWS: [AblationSpec; 5] = [
    AblationSpec { label: "baseline", slug: "baseline", use_m1: false, use_projection: false, use_m2: false },
    AblationSpec { label: "+M1", slug: "m1", use_m1: true, use_projection: false, use_m2: false },
    AblationSpec { label: "+M1+W_r", slug: "m1-wr", use_m1: true, use_projection: true, use_m2: false },
    AblationSpec { label: "+M1+M2", slug: "m1-m2", use_m1: true, use_projection: false, use_m2: true },
    AblationSpec { label: "HICE", slug: "full", use_m1: true, use_projection: true, use_m2: true },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub edited_routes: usize,
    pub metrics: MetricReport,
}

/// Runs the five component configurations; upstream artifacts must exist.
/// With `corrupt`, every row routes through the label-swapped gate.
pub fn ablation_matrix(cfg: &RunConfig, backend: &dyn Backend, corrupt: bool) -> Result<Vec<AblationRow>> {
    let stamps = stage("ablate", Stamps::compute(cfg))?;
    let suffix = if corrupt { "-corrupted" } else { "" };
    let mut rows = Vec::new();
    for spec in ABLATION_ROWS {
        let router = RouterConfig {
            use_m1: spec.use_m1,
            use_projection: spec.use_projection,
            use_m2: spec.use_m2,
            ..cfg.router.clone()
        };
        let dir = cfg.work_path("ablate").join(format!("{}{suffix}", spec.slug));
        let eval = evaluate(cfg, &router, backend, corrupt, &dir)?;
        let metrics = report(cfg, &dir, &stamps.evaluation(cfg, &router, corrupt)?)?;
        rows.push(AblationRow {
            spec,
            edited_routes: eval.edited_routes(),
            metrics,
        });
    }
    let dir = cfg.work_path("ablate");
    let md = dir.join(format!("ablation{suffix}.md"));
    fs::write(&md, ablation_table(&rows)).map_err(|e| Error::io(&md, e))?;
    let json = dir.join(format!("ablation{suffix}.json"));
    fs::write(&json, serde_json::to_string_pretty(&rows)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(out, "| Method | {} |", crate::metrics::METRIC_NAMES.join(" | ")).unwrap();
    writeln!(out, "|---|{}", "---|".repeat(8)).unwrap();
    for r in rows {
        writeln!(out, "| {} | {} |", r.spec.label, r.metrics.markdown_cells()).unwrap();
    }
    out
}

pub fn read_decisions(dir: &Path) -> Result<Vec<DecisionRecord>> {
    read_jsonl(&dir.join("decisions.jsonl"))
}

pub fn read_evidence(dir: &Path) -> Result<Vec<EvidenceRow>> {
    read_jsonl(&dir.join("evidence.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.classifier.projection_dim, 10_000);
        assert_eq!(cfg.classifier.lambda_grid.len(), 9);
        assert_eq!(cfg.classifier.split_fraction, 0.8);
        assert_eq!(cfg.router.k0, 16);
        assert_eq!(cfg.sampling.k, 4);
        assert_eq!(cfg.sampling.ratio, 0.05);
        assert_eq!(cfg.router.threshold, 0.8);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            seed: Some(3),
            backend: BackendSpec {
                scripted: Some("scripted.json".into()),
                ..BackendSpec::default()
            },
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        cfg.save(&p).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(back.root, dir.path());
        assert_eq!(RunConfig { root: back.root.clone(), ..cfg }, back);
    }

    #[test]
    fn bad_toml_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 1\n[router]\nthreshold = \"high\"\n").unwrap();
        match RunConfig::load(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "bogus = 1\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        cfg.backend.url = Some("http://localhost:1".into());
        assert!(cfg.validate().is_ok());
        cfg.sampling.ratio = 0.0;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().require_seed().is_err());
    }

    #[test]
    fn ablation_rows_in_order() {
        let labels: Vec<&str> = ABLATION_ROWS.iter().map(|r| r.label).collect();
        assert_eq!(labels, ["baseline", "+M1", "+M1+W_r", "+M1+M2", "HICE"]);
        assert!(!ABLATION_ROWS[0].use_m1);
        assert!(ABLATION_ROWS[4].use_m1 && ABLATION_ROWS[4].use_projection && ABLATION_ROWS[4].use_m2);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let e = stage::<()>("report", Err(Error::EmptyDataset)).unwrap_err();
        assert!(e.to_string().starts_with("stage `report` failed"));
        let again = stage::<()>("outer", Err(e)).unwrap_err();
        assert!(matches!(again, Error::Stage { stage: "report", .. }));
    }
}
