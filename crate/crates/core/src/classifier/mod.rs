//! The in-scope gate: templated demonstrations, a random high-dimensional
//! projection of their features, and a closed-form ridge classifier whose
//! penalty is chosen on a held-out split.

pub mod ridge;

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::EditSample;
use crate::embeddings::{decode_emb1, encode_emb1, EmbeddingMatrix, HEADER_LEN};
use crate::error::{Error, Result};
use ridge::RidgeProblem;

/// Renders one fact in the demonstration template. `\n` is a single newline.
pub fn render_demonstration(question: &str, answer: &str) -> String {
    format!("New Fact: {question} {answer}\nPrompt: {question} {answer}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    Edit,
    Rephrase,
    TextLocality,
    MmLocality,
}

impl DemoKind {
    pub const ALL: [DemoKind; 4] = [
        DemoKind::Edit,
        DemoKind::Rephrase,
        DemoKind::TextLocality,
        DemoKind::MmLocality,
    ];

    pub fn label(self) -> Label {
        match self {
            DemoKind::Edit | DemoKind::Rephrase => Label::InDomain,
            DemoKind::TextLocality | DemoKind::MmLocality => Label::OutOfDomain,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            DemoKind::Edit => "edit",
            DemoKind::Rephrase => "rephrase",
            DemoKind::TextLocality => "loc",
            DemoKind::MmLocality => "mloc",
        }
    }
}

/// Row id used for a sample's question or demonstration of a given kind in
/// question/demonstration embedding files: `<sample id>/<suffix>`.
pub fn feature_key(sample_id: &str, kind: DemoKind) -> String {
    format!("{sample_id}/{}", kind.suffix())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    InDomain,
    OutOfDomain,
}

impl Label {
    /// Column of this label in the one-hot target matrix.
    pub fn column(self) -> usize {
        match self {
            Label::InDomain => 0,
            Label::OutOfDomain => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::InDomain => "in_domain",
            Label::OutOfDomain => "out_of_domain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub text: String,
    pub kind: DemoKind,
    pub label: Label,
    pub source_id: String,
}

impl Demonstration {
    pub fn new(source_id: &str, kind: DemoKind, question: &str, answer: &str) -> Self {
        Demonstration {
            text: render_demonstration(question, answer),
            kind,
            label: kind.label(),
            source_id: source_id.to_string(),
        }
    }

    pub fn feature_key(&self) -> String {
        feature_key(&self.source_id, self.kind)
    }
}

/// The four demonstrations of a sample, in `DemoKind::ALL` order. The rephrase
/// carries the edit target.
pub fn build_demonstrations(sample: &EditSample) -> Result<[Demonstration; 4]> {
    let missing = |what: &str| Error::InvalidSample {
        id: sample.id.clone(),
        reason: format!("missing {what}"),
    };
    if sample.rephrased_question.trim().is_empty() {
        return Err(missing("rephrased question"));
    }
    let loc = &sample.text_locality;
    if loc.question.trim().is_empty() || loc.answer.trim().is_empty() {
        return Err(missing("text locality pair"));
    }
    let mloc = &sample.mm_locality;
    if mloc.question.trim().is_empty() || mloc.answer.trim().is_empty() {
        return Err(missing("multimodal locality pair"));
    }
    let id = sample.id.as_str();
    Ok([
        Demonstration::new(id, DemoKind::Edit, &sample.question, &sample.target_answer),
        Demonstration::new(
            id,
            DemoKind::Rephrase,
            &sample.rephrased_question,
            &sample.target_answer,
        ),
        Demonstration::new(id, DemoKind::TextLocality, &loc.question, &loc.answer),
        Demonstration::new(id, DemoKind::MmLocality, &mloc.question, &mloc.answer),
    ])
}

/// One-hot `n x 2` target matrix, column 0 in-domain and column 1 out-of-domain.
pub fn label_matrix(labels: &[Label]) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(labels.len(), 2);
    for (i, l) in labels.iter().enumerate() {
        y[(i, l.column())] = 1.0;
    }
    y
}

pub fn to_matrix(rows: &[&[f32]]) -> DMatrix<f64> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] as f64)
}

/// Seeded `d x m` matrix of i.i.d. standard normal `f32` entries, drawn in
/// row-major order from `ChaCha8Rng` stream 0.
pub fn gaussian_projection(d: usize, m: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    (0..d * m)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// `F · W_r` with a freshly drawn `W_r`. Returns the projected features and
/// `W_r` (row-major `d x m`).
pub fn random_projection(features: &DMatrix<f64>, seed: u64, m: usize) -> Result<(DMatrix<f64>, Vec<f32>)> {
    if features.ncols() == 0 || m == 0 {
        return Err(Error::invalid("projection needs d >= 1 and M >= 1"));
    }
    let wr = gaussian_projection(features.ncols(), m, seed);
    let wr_mat = DMatrix::from_fn(features.ncols(), m, |i, j| wr[i * m + j] as f64);
    Ok((features * wr_mat, wr))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// Row-major `d x m` standard-normal matrix.
    Gaussian { d: usize, m: usize, matrix: Vec<f32> },
    /// No projection; the ridge fit runs on raw `d`-dim features.
    Identity { d: usize },
}

impl Projection {
    pub fn input_dim(&self) -> usize {
        match self {
            Projection::Gaussian { d, .. } | Projection::Identity { d } => *d,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projection::Gaussian { m, .. } => *m,
            Projection::Identity { d } => *d,
        }
    }

    pub fn apply(&self, feature: &[f32]) -> Vec<f64> {
        match self {
            Projection::Identity { .. } => feature.iter().map(|&v| v as f64).collect(),
            Projection::Gaussian { m, matrix, .. } => {
                let mut out = vec![0.0f64; *m];
                for (i, &x) in feature.iter().enumerate() {
                    let x = x as f64;
                    let row = &matrix[i * m..(i + 1) * m];
                    for (o, &w) in out.iter_mut().zip(row) {
                        *o += x * w as f64;
                    }
                }
                out
            }
        }
    }
}

/// Fitted gate. `weights` is row-major `M x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub projection: Projection,
    pub weights: Vec<f32>,
    pub lambda: f64,
    pub seed: u64,
    pub val_accuracy: f64,
}

impl ClassifierModel {
    pub fn d(&self) -> usize {
        self.projection.input_dim()
    }

    pub fn m(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn is_projected(&self) -> bool {
        matches!(self.projection, Projection::Gaussian { .. })
    }

    /// `(in_domain, out_of_domain)` scores of `feature · W_r · W*`.
    pub fn scores(&self, feature: &[f32]) -> Result<[f64; 2]> {
        if feature.len() != self.d() {
            return Err(Error::DimMismatch {
                expected: self.d(),
                actual: feature.len(),
            });
        }
        let p = self.projection.apply(feature);
        let mut s = [0.0f64; 2];
        for (j, &pj) in p.iter().enumerate() {
            s[0] += pj * self.weights[2 * j] as f64;
            s[1] += pj * self.weights[2 * j + 1] as f64;
        }
        Ok(s)
    }

    /// Label and margin `score(in) - score(out)`. A zero margin is out-of-domain.
    pub fn classify(&self, feature: &[f32]) -> Result<(Label, f64)> {
        let [s_in, s_out] = self.scores(feature)?;
        let margin = s_in - s_out;
        let label = if margin > 0.0 {
            Label::InDomain
        } else {
            Label::OutOfDomain
        };
        Ok((label, margin))
    }

    /// The same model with its two weight columns exchanged, so every decision
    /// flips. Used to exercise the second gate against a broken classifier.
    pub fn with_swapped_labels(&self) -> Self {
        let mut out = self.clone();
        for pair in out.weights.chunks_exact_mut(2) {
            pair.swap(0, 1);
        }
        out
    }
}

pub fn default_lambda_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Projected dimension `M`; `None` fits on raw features.
    pub projection_dim: Option<usize>,
    pub lambda_grid: Vec<f64>,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            projection_dim: Some(10_000),
            lambda_grid: default_lambda_grid(),
            split_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `M x 2`, one column per label.
    pub weights: DMatrix<f64>,
    pub val_accuracy: f64,
    /// Validation accuracy for every grid point, in grid order.
    pub accuracies: Vec<(f64, f64)>,
}

/// Seeded train/validation index split from `ChaCha8Rng` stream 1.
pub fn split_indices(n: usize, split_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction {split_fraction} not in (0, 1)"
        )));
    }
    let n_train = (split_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "split {split_fraction} of {n} rows leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

fn argmax_accuracy(scores: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let n = scores.nrows();
    let correct = (0..n)
        .filter(|&i| {
            let predicted = if scores[(i, 0)] - scores[(i, 1)] > 0.0 { 0 } else { 1 };
            targets[(i, predicted)] == 1.0
        })
        .count();
    correct as f64 / n as f64
}

/// Fits on the seeded `split_fraction` part of the rows for every penalty in
/// `grid`, scores argmax accuracy on the rest, and keeps the best. Ties go to
/// the larger penalty.
pub fn select_lambda(
    projected: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    grid: &[f64],
    split_fraction: f64,
    seed: u64,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    let (train_idx, val_idx) = split_indices(projected.nrows(), split_fraction, seed)?;
    let f_train = projected.select_rows(&train_idx);
    let y_train = targets.select_rows(&train_idx);
    let f_val = projected.select_rows(&val_idx);
    let y_val = targets.select_rows(&val_idx);

    let problem = RidgeProblem::new(&f_train, &y_train)?;
    let mut accuracies = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let acc = argmax_accuracy(&problem.predict(&f_val, lambda)?, &y_val);
        accuracies.push((lambda, acc));
        best = match best {
            Some((bl, ba)) if ba > acc || (ba == acc && bl > lambda) => Some((bl, ba)),
            _ => Some((lambda, acc)),
        };
    }
    let (lambda, val_accuracy) = best.expect("grid is non-empty");
    Ok(LambdaSelection {
        lambda,
        weights: problem.solve(lambda)?,
        val_accuracy,
        accuracies,
    })
}

/// Projects demonstration features, selects the penalty, and packages the gate.
pub fn fit_classifier(
    features: &EmbeddingMatrix,
    demos: &[Demonstration],
    config: &ClassifierConfig,
) -> Result<ClassifierModel> {
    let rows = demos
        .iter()
        .map(|d| features.require(&d.feature_key()))
        .collect::<Result<Vec<_>>>()?;
    let f = to_matrix(&rows);
    let labels: Vec<Label> = demos.iter().map(|d| d.label).collect();
    let y = label_matrix(&labels);
    let d = features.dim();

    let (projected, projection) = match config.projection_dim {
        Some(m) => {
            let (fp, matrix) = random_projection(&f, config.seed, m)?;
            (fp, Projection::Gaussian { d, m, matrix })
        }
        None => (f, Projection::Identity { d }),
    };
    let sel = select_lambda(
        &projected,
        &y,
        &config.lambda_grid,
        config.split_fraction,
        config.seed,
    )?;
    let weights = (0..sel.weights.nrows())
        .flat_map(|i| [sel.weights[(i, 0)] as f32, sel.weights[(i, 1)] as f32])
        .collect();
    Ok(ClassifierModel {
        projection,
        weights,
        lambda: sel.lambda,
        seed: config.seed,
        val_accuracy: sel.val_accuracy,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"HCLS";
const MODEL_VERSION: u32 = 1;

/// Writes the model: a fixed header, a stamp string, then `W_r` and `W*` as
/// two `EMB1` blocks. Identity projections store a `d x d` identity block.
pub fn save_model(model: &ClassifierModel, stamp: &str, path: &Path) -> Result<()> {
    let (kind, wr): (u32, Vec<f32>) = match &model.projection {
        Projection::Gaussian { matrix, .. } => (0, matrix.clone()),
        Projection::Identity { d } => (
            1,
            (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect(),
        ),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    for word in [
        MODEL_VERSION,
        model.d() as u32,
        model.m() as u32,
        kind,
        stamp.len() as u32,
    ] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    buf.extend_from_slice(&model.lambda.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&model.val_accuracy.to_le_bytes());
    buf.extend_from_slice(stamp.as_bytes());
    buf.extend(encode_emb1(model.d(), model.m(), &wr)?);
    buf.extend(encode_emb1(model.m(), 2, &model.weights)?);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a model written by [`save_model`], returning it with its stamp.
pub fn load_model(path: &Path) -> Result<(ClassifierModel, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = |msg: String| Error::Header(format!("{}: {msg}", path.display()));
    const FIXED: usize = 4 + 5 * 4 + 3 * 8;
    if bytes.len() < FIXED || &bytes[..4] != MODEL_MAGIC {
        return Err(header("not a classifier file".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if word(4) != MODEL_VERSION {
        return Err(header(format!("unsupported version {}", word(4))));
    }
    let (d, m, kind, stamp_len) = (word(8) as usize, word(12) as usize, word(16), word(20) as usize);
    let lambda = f64_at(24);
    let seed = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let val_accuracy = f64_at(40);
    let stamp_end = FIXED + stamp_len;
    let stamp = bytes
        .get(FIXED..stamp_end)
        .and_then(|s| std::str::from_utf8(s).ok())
        .ok_or_else(|| header("bad stamp".into()))?
        .to_string();

    let wr_len = HEADER_LEN + d * m * 4;
    let wr_block = bytes
        .get(stamp_end..stamp_end + wr_len)
        .ok_or_else(|| header("truncated projection block".into()))?;
    let (rd, rm, wr) = decode_emb1(wr_block)?;
    let (wc, w2, weights) = decode_emb1(&bytes[stamp_end + wr_len..])?;
    if (rd, rm) != (d, m) || (wc, w2) != (m, 2) {
        return Err(header("block shapes disagree with header".into()));
    }
    let projection = match kind {
        0 => Projection::Gaussian { d, m, matrix: wr },
        1 if d == m => Projection::Identity { d },
        _ => return Err(header(format!("bad projection kind {kind}"))),
    };
    Ok((
        ClassifierModel {
            projection,
            weights,
            lambda,
            seed,
            val_accuracy,
        },
        stamp,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_fixture, Task};
    use std::collections::BTreeMap;

    fn sample() -> EditSample {
        let mut s = make_fixture(&BTreeMap::from([(Task::ObjectAttributes, 1)]), 1).samples()[0].clone();
        s.question = "What color is the bird?".into();
        s.target_answer = "red".into();
        s
    }

    #[test]
    fn template_is_exact() {
        let demos = build_demonstrations(&sample()).unwrap();
        assert_eq!(
            demos[0].text,
            "New Fact: What color is the bird? red\nPrompt: What color is the bird? red"
        );
        assert_eq!(demos[0].kind, DemoKind::Edit);
        assert_eq!(demos[1].label, Label::InDomain);
        assert_eq!(demos[2].label, Label::OutOfDomain);
        assert_eq!(demos[3].label, Label::OutOfDomain);
        assert_eq!(demos[3].feature_key(), format!("{}/mloc", demos[3].source_id));
    }

    #[test]
    fn label_matrix_shape_and_sums() {
        let ds = make_fixture(&BTreeMap::from([(Task::ObjectCounting, 3)]), 2);
        let labels: Vec<Label> = ds
            .samples()
            .iter()
            .flat_map(|s| build_demonstrations(s).unwrap())
            .map(|d| d.label)
            .collect();
        let y = label_matrix(&labels);
        assert_eq!(y.shape(), (12, 2));
        assert_eq!(y.column(0).sum(), 6.0);
        assert_eq!(y.column(1).sum(), 6.0);
    }

    #[test]
    fn missing_companion_is_error() {
        let mut s = sample();
        s.text_locality.answer.clear();
        assert!(build_demonstrations(&s).is_err());
        let mut s = sample();
        s.rephrased_question = " ".into();
        assert!(build_demonstrations(&s).is_err());
    }

    #[test]
    fn projection_of_zero_is_zero_and_seeded() {
        let f = DMatrix::<f64>::zeros(4, 3);
        let (fp, wr) = random_projection(&f, 9, 7).unwrap();
        assert_eq!(fp.shape(), (4, 7));
        assert!(fp.iter().all(|&v| v == 0.0));
        let (_, wr2) = random_projection(&f, 9, 7).unwrap();
        assert_eq!(wr, wr2);
        let (_, wr3) = random_projection(&f, 10, 7).unwrap();
        assert_ne!(wr, wr3);
    }

    #[test]
    fn split_indices_partition() {
        let (tr, va) = split_indices(10, 0.8, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all: Vec<_> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_indices(1, 0.8, 3).is_err());
        assert!(split_indices(10, 1.0, 3).is_err());
    }

    #[test]
    fn default_grid_has_nine_points() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], 1e-4);
        assert_eq!(g[8], 1e4);
        assert_eq!(ClassifierConfig::default().split_fraction, 0.8);
        assert_eq!(ClassifierConfig::default().projection_dim, Some(10_000));
    }

    fn toy_model() -> ClassifierModel {
        ClassifierModel {
            projection: Projection::Gaussian {
                d: 2,
                m: 3,
                matrix: vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0],
            },
            weights: vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5],
            lambda: 0.1,
            seed: 4,
            val_accuracy: 0.75,
        }
    }

    #[test]
    fn zero_feature_is_out_of_domain() {
        let (label, margin) = toy_model().classify(&[0.0, 0.0]).unwrap();
        assert_eq!(label, Label::OutOfDomain);
        assert_eq!(margin, 0.0);
    }

    #[test]
    fn classify_dim_mismatch() {
        assert!(matches!(
            toy_model().classify(&[1.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn swapped_labels_flip_margin() {
        let m = toy_model();
        let (_, a) = m.classify(&[1.0, 0.3]).unwrap();
        let (_, b) = m.with_swapped_labels().classify(&[1.0, 0.3]).unwrap();
        assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_model(&toy_model(), "abc123", &path).unwrap();
        let (back, stamp) = load_model(&path).unwrap();
        assert_eq!(back, toy_model());
        assert_eq!(stamp, "abc123");

        let ident = ClassifierModel {
            projection: Projection::Identity { d: 2 },
            weights: vec![1.0, -1.0, 0.0, 2.0],
            ..toy_model()
        };
        save_model(&ident, "", &path).unwrap();
        assert_eq!(load_model(&path).unwrap().0, ident);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn select_lambda_rejects_empty_grid() {
        let f = DMatrix::<f64>::identity(10, 3);
        let y = label_matrix(&[Label::InDomain; 10]);
        assert!(select_lambda(&f, &y, &[], 0.8, 1).is_err());
    }
}
