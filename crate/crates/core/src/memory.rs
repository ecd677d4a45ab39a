//! Context memory (one exemplar demonstration per k-means cluster of the
//! training set) and hard-negative memory (out-of-domain questions the gate
//! finds hardest to reject).

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, DemoKind, Demonstration, Label};
use crate::dataset::EditSample;
use crate::embeddings::{read_embeddings, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest_centroid(p: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |p: &[f32]| p.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![to_f64(points[first])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the running sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[next] = true;
        let c = to_f64(points[next]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the largest centroid
/// shift drops below `tol` or `max_iters` is reached. A cluster that empties
/// is re-seeded at the point farthest from its own centroid.
pub fn kmeans(points: &[&[f32]], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be in 1..={n}")));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;

    loop {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest_centroid(p, &centroids);
            assignments[i] = j;
            dists[i] = d;
            inertia += d;
        }
        debug_assert!(inertia_history
            .last()
            .is_none_or(|&prev: &f64| inertia <= prev * (1.0 + 1e-9) + 1e-12));
        inertia_history.push(inertia);
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, &v) in sums[j].iter_mut().zip(p.iter()) {
                *s += v as f64;
            }
        }
        let mut updated: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &c), old)| {
                if c == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        for j in empty {
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                counts[j] = 1;
                assignments[i] = j;
                dists[i] = 0.0;
                updated[j] = points[i].iter().map(|&v| v as f64).collect();
            }
        }
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max);
        centroids = updated;
        if shift < tol {
            // one more assignment pass so assignments match the final centroids
            let mut inertia = 0.0;
            for (i, p) in points.iter().enumerate() {
                let (j, d) = nearest_centroid(p, &centroids);
                assignments[i] = j;
                inertia += d;
            }
            inertia_history.push(inertia);
            break;
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        inertia_history,
        iterations,
    })
}

/// `max(1, round(ratio * n))`.
pub fn m1_size(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).max(1).min(n.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarSelection {
    /// Sample closest to its cluster centroid.
    #[default]
    NearestToCentroid,
    /// A seeded uniform pick within each cluster.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M1Entry {
    pub demonstration: Demonstration,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryM1 {
    pub entries: Vec<M1Entry>,
    pub ratio: f64,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

/// Clusters training samples on `cluster_features` into `max(1, round(ratio * N))`
/// groups and keeps one edit demonstration per cluster.
///
/// Both feature matrices are keyed by sample id. Entries store the sample's
/// `retrieval_features` row, which is what queries are later compared against.
pub fn build_m1(
    train_samples: &[EditSample],
    cluster_features: &EmbeddingMatrix,
    retrieval_features: &EmbeddingMatrix,
    ratio: f64,
    seed: u64,
    selection: ExemplarSelection,
) -> Result<MemoryM1> {
    if train_samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio {ratio} not in (0, 1]")));
    }
    let points = train_samples
        .iter()
        .map(|s| cluster_features.require(&s.id))
        .collect::<Result<Vec<_>>>()?;
    let k = m1_size(ratio, train_samples.len());
    let km = kmeans(&points, k, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut entries = Vec::with_capacity(k);
    for (j, centroid) in km.centroids.iter().enumerate() {
        let members: Vec<usize> = (0..points.len()).filter(|&i| km.assignments[i] == j).collect();
        let pick = match selection {
            ExemplarSelection::NearestToCentroid => members.iter().copied().min_by(|&a, &b| {
                sq_dist(points[a], centroid)
                    .total_cmp(&sq_dist(points[b], centroid))
                    .then_with(|| train_samples[a].id.cmp(&train_samples[b].id))
            }),
            ExemplarSelection::Random => {
                (!members.is_empty()).then(|| members[rng.random_range(0..members.len())])
            }
        };
        let Some(i) = pick else { continue };
        let s = &train_samples[i];
        entries.push(M1Entry {
            demonstration: Demonstration::new(&s.id, DemoKind::Edit, &s.question, &s.target_answer),
            feature: retrieval_features.require(&s.id)?.to_vec(),
        });
    }
    Ok(MemoryM1 { entries, ratio })
}

/// An out-of-domain question eligible for the hard-negative memory.
#[derive(Debug, Clone, PartialEq)]
pub struct M2Candidate {
    pub question: String,
    pub source_id: String,
    pub kind: DemoKind,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M2Entry {
    pub question: String,
    pub source_id: String,
    pub kind: DemoKind,
    pub feature: Vec<f32>,
    /// `score(out) - score(in)`: negative when the gate misclassifies it.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryM2 {
    pub entries: Vec<M2Entry>,
}

impl MemoryM2 {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum M2Selection {
    /// Keep the `n` hardest.
    Budget(usize),
    /// Keep the hardest `ceil(fraction * candidates)`.
    Fraction(f64),
    /// Keep every candidate whose margin is at most the cutoff.
    MarginCutoff(f64),
}

impl Default for M2Selection {
    fn default() -> Self {
        M2Selection::Fraction(0.1)
    }
}

/// Ranks out-of-domain candidates by how confidently the gate rejects them and
/// keeps the least confident ones, smallest margin first. Repeated questions
/// are kept once, at their hardest occurrence.
pub fn build_m2(
    candidates: &[M2Candidate],
    model: &ClassifierModel,
    selection: M2Selection,
) -> Result<MemoryM2> {
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.kind.label() != Label::OutOfDomain {
            return Err(Error::invalid(format!(
                "candidate {} is an in-domain {:?} question",
                c.source_id, c.kind
            )));
        }
        let (_, gate_margin) = model.classify(&c.feature)?;
        scored.push(M2Entry {
            question: c.question.clone(),
            source_id: c.source_id.clone(),
            kind: c.kind,
            feature: c.feature.clone(),
            margin: -gate_margin,
        });
    }
    scored.sort_by(|a, b| {
        a.margin
            .total_cmp(&b.margin)
            .then_with(|| a.source_id.cmp(&b.source_id))
            .then_with(|| a.kind.cmp(&b.kind))
    });
    let mut seen = HashSet::new();
    scored.retain(|e| seen.insert(normalize_answer(&e.question)));

    let keep = match selection {
        M2Selection::Budget(n) => n,
        M2Selection::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("fraction {f} not in [0, 1]")));
            }
            (f * candidates.len() as f64).ceil() as usize
        }
        M2Selection::MarginCutoff(cut) => scored.iter().take_while(|e| e.margin <= cut).count(),
    };
    scored.truncate(keep);
    Ok(MemoryM2 { entries: scored })
}

#[derive(Debug, Serialize, Deserialize)]
struct MemoryLine {
    source_id: String,
    kind: DemoKind,
    text: String,
    margin: Option<f64>,
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn features_of(ids: Vec<String>, rows: Vec<Vec<f32>>, dim_hint: usize) -> Result<EmbeddingMatrix> {
    if rows.is_empty() {
        return EmbeddingMatrix::new(vec![], dim_hint.max(1), vec![], "");
    }
    EmbeddingMatrix::from_rows(ids, rows, "")
}

/// Writes `<dir>/<name>.jsonl` and `<dir>/<name>.emb` (+ ids sidecar).
pub fn save_m1(memory: &MemoryM1, dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(
        &dir.join(format!("{name}.jsonl")),
        memory.entries.iter().map(|e| MemoryLine {
            source_id: e.demonstration.source_id.clone(),
            kind: e.demonstration.kind,
            text: e.demonstration.text.clone(),
            margin: None,
        }),
    )?;
    let m = features_of(
        memory.entries.iter().map(|e| e.demonstration.feature_key()).collect(),
        memory.entries.iter().map(|e| e.feature.clone()).collect(),
        0,
    )?;
    write_embeddings(&m, &dir.join(format!("{name}.emb")))
}

pub fn load_m1(dir: &Path, name: &str, ratio: f64) -> Result<MemoryM1> {
    let lines: Vec<MemoryLine> = read_jsonl(&dir.join(format!("{name}.jsonl")))?;
    let feats = read_embeddings(&dir.join(format!("{name}.emb")))?;
    let entries = lines
        .into_iter()
        .map(|l| {
            let demonstration = Demonstration {
                label: l.kind.label(),
                kind: l.kind,
                text: l.text,
                source_id: l.source_id,
            };
            let feature = feats.require(&demonstration.feature_key())?.to_vec();
            Ok(M1Entry {
                demonstration,
                feature,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MemoryM1 { entries, ratio })
}

pub fn save_m2(memory: &MemoryM2, dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(
        &dir.join(format!("{name}.jsonl")),
        memory.entries.iter().map(|e| MemoryLine {
            source_id: e.source_id.clone(),
            kind: e.kind,
            text: e.question.clone(),
            margin: Some(e.margin),
        }),
    )?;
    let dim = memory.entries.first().map(|e| e.feature.len()).unwrap_or(1);
    let m = features_of(
        memory
            .entries
            .iter()
            .map(|e| crate::classifier::feature_key(&e.source_id, e.kind))
            .collect(),
        memory.entries.iter().map(|e| e.feature.clone()).collect(),
        dim,
    )?;
    write_embeddings(&m, &dir.join(format!("{name}.emb")))
}

pub fn load_m2(dir: &Path, name: &str) -> Result<MemoryM2> {
    let lines: Vec<MemoryLine> = read_jsonl(&dir.join(format!("{name}.jsonl")))?;
    let feats = read_embeddings(&dir.join(format!("{name}.emb")))?;
    let entries = lines
        .into_iter()
        .map(|l| {
            let feature = feats
                .require(&crate::classifier::feature_key(&l.source_id, l.kind))?
                .to_vec();
            Ok(M2Entry {
                margin: l
                    .margin
                    .ok_or_else(|| Error::invalid(format!("M2 entry {} has no margin", l.source_id)))?,
                question: l.text,
                source_id: l.source_id,
                kind: l.kind,
                feature,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MemoryM2 { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Projection;
    use crate::dataset::{make_fixture, Task};
    use rand_distr::{Distribution, Normal};
    use std::collections::BTreeMap;

    fn blobs(n_per: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let centers = [[-10.0f32, 0.0], [10.0, 5.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..n_per {
                pts.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                truth.push(b);
            }
        }
        (pts, truth)
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, (i * i) as f32]).collect();
        let refs: Vec<&[f32]> = pts.iter().map(Vec::as_slice).collect();
        let km = kmeans(&refs, 6, 1, 50, 1e-9).unwrap();
        assert_eq!(km.inertia(), 0.0);
        let mut seen = km.assignments.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn two_blobs_recovered() {
        let (pts, truth) = blobs(25, 5);
        let refs: Vec<&[f32]> = pts.iter().map(Vec::as_slice).collect();
        let km = kmeans(&refs, 2, 3, 100, 1e-9).unwrap();
        let same = |i: usize, j: usize| km.assignments[i] == km.assignments[j];
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(same(i, j), truth[i] == truth[j]);
            }
        }
        for w in km.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn kmeans_is_seeded() {
        let (pts, _) = blobs(20, 8);
        let refs: Vec<&[f32]> = pts.iter().map(Vec::as_slice).collect();
        assert_eq!(kmeans(&refs, 3, 4, 100, 1e-9).unwrap(), kmeans(&refs, 3, 4, 100, 1e-9).unwrap());
        assert!(kmeans(&refs, 41, 4, 100, 1e-9).is_err());
        assert!(kmeans(&refs, 0, 4, 100, 1e-9).is_err());
    }

    #[test]
    fn duplicate_points_still_give_k_clusters() {
        let pts = vec![vec![1.0f32, 1.0]; 5];
        let refs: Vec<&[f32]> = pts.iter().map(Vec::as_slice).collect();
        let km = kmeans(&refs, 3, 2, 10, 1e-9).unwrap();
        assert_eq!(km.centroids.len(), 3);
        assert_eq!(km.inertia(), 0.0);
    }

    #[test]
    fn m1_size_rule() {
        assert_eq!(m1_size(0.05, 200), 10);
        assert_eq!(m1_size(0.05, 3), 1);
        assert_eq!(m1_size(0.05, 13450), 673);
        assert_eq!(m1_size(1.0, 7), 7);
    }

    fn samples_with_blob_features(n_per: usize) -> (Vec<EditSample>, EmbeddingMatrix) {
        let ds = make_fixture(&BTreeMap::from([(Task::ObjectCounting, 2 * n_per)]), 2);
        let (pts, _) = blobs(n_per, 9);
        let ids: Vec<String> = ds.samples().iter().map(|s| s.id.clone()).collect();
        let feats = EmbeddingMatrix::from_rows(ids, pts, "clip").unwrap();
        (ds.samples().to_vec(), feats)
    }

    #[test]
    fn m1_takes_one_exemplar_per_blob() {
        let (samples, feats) = samples_with_blob_features(10);
        let m1 = build_m1(&samples, &feats, &feats, 0.1, 1, ExemplarSelection::NearestToCentroid).unwrap();
        assert_eq!(m1.entries.len(), 2);
        let blob_of = |id: &str| feats.row_by_id(id).unwrap()[0] > 0.0;
        let a = &m1.entries[0].demonstration.source_id;
        let b = &m1.entries[1].demonstration.source_id;
        assert_ne!(blob_of(a), blob_of(b));
        for e in &m1.entries {
            assert_eq!(e.demonstration.kind, DemoKind::Edit);
            assert_eq!(e.feature, feats.row_by_id(&e.demonstration.source_id).unwrap());
        }
        let random = build_m1(&samples, &feats, &feats, 0.1, 1, ExemplarSelection::Random).unwrap();
        assert_eq!(random.entries.len(), 2);
    }

    #[test]
    fn m1_errors() {
        let (samples, feats) = samples_with_blob_features(2);
        assert!(build_m1(&[], &feats, &feats, 0.05, 1, ExemplarSelection::default()).is_err());
        assert!(build_m1(&samples, &feats, &feats, 0.0, 1, ExemplarSelection::default()).is_err());
    }

    fn axis_model() -> ClassifierModel {
        // score_in = x, score_out = -x on a 1-d identity projection
        ClassifierModel {
            projection: Projection::Identity { d: 1 },
            weights: vec![1.0, -1.0],
            lambda: 1.0,
            seed: 0,
            val_accuracy: 1.0,
        }
    }

    fn candidates(xs: &[f32]) -> Vec<M2Candidate> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| M2Candidate {
                question: format!("question {i}"),
                source_id: format!("s{i:03}"),
                kind: DemoKind::TextLocality,
                feature: vec![x],
            })
            .collect()
    }

    #[test]
    fn m2_budget_keeps_smallest_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<f32> = (0..100).map(|_| rng.random_range(-5.0..0.5)).collect();
        let m2 = build_m2(&candidates(&xs), &axis_model(), M2Selection::Budget(5)).unwrap();
        let mut oracle: Vec<f64> = xs.iter().map(|&x| -2.0 * x as f64).collect();
        oracle.sort_by(f64::total_cmp);
        let got: Vec<f64> = m2.entries.iter().map(|e| e.margin).collect();
        assert_eq!(got.len(), 5);
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-9);
        }
        assert!(got.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn m2_cutoff_and_misclassified() {
        let cands = candidates(&[-3.0, -2.0, -4.0]);
        let m2 = build_m2(&cands, &axis_model(), M2Selection::MarginCutoff(1.0)).unwrap();
        assert!(m2.is_empty());
        let cands = candidates(&[-3.0, 0.5, -4.0]);
        let m2 = build_m2(&cands, &axis_model(), M2Selection::Budget(1)).unwrap();
        assert_eq!(m2.entries[0].source_id, "s001");
        assert!(m2.entries[0].margin < 0.0);
    }

    #[test]
    fn m2_rejects_in_domain() {
        let mut cands = candidates(&[-1.0]);
        cands[0].kind = DemoKind::Rephrase;
        assert!(build_m2(&cands, &axis_model(), M2Selection::Budget(1)).is_err());
    }

    #[test]
    fn memories_round_trip() {
        let (samples, feats) = samples_with_blob_features(5);
        let m1 = build_m1(&samples, &feats, &feats, 0.2, 1, ExemplarSelection::default()).unwrap();
        let m2 = build_m2(&candidates(&[-1.0, 0.2]), &axis_model(), M2Selection::Budget(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_m1(&m1, dir.path(), "m1").unwrap();
        save_m2(&m2, dir.path(), "m2").unwrap();
        assert_eq!(load_m1(dir.path(), "m1", 0.2).unwrap(), m1);
        assert_eq!(load_m2(dir.path(), "m2").unwrap(), m2);
        save_m2(&MemoryM2::default(), dir.path(), "empty").unwrap();
        assert!(load_m2(dir.path(), "empty").unwrap().is_empty());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn kmeans_invariants(n in 1usize..50, k in 1usize..8, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0f32, 1.0).unwrap();
            let data: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| noise.sample(&mut rng)).collect()).collect();
            let points: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();
            let km = kmeans(&points, k.min(n), seed, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
            proptest::prop_assert_eq!(km.assignments.len(), n);
            proptest::prop_assert_eq!(km.centroids.len(), k.min(n));
            proptest::prop_assert!(km.assignments.iter().all(|&a| a < k.min(n)));
            for w in km.inertia_history.windows(2) {
                proptest::prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn m1_size_is_rounded_and_bounded(ratio in 0.001f64..1.0, n in 1usize..20_000) {
            let k = m1_size(ratio, n);
            proptest::prop_assert!(k >= 1 && k <= n);
            proptest::prop_assert_eq!(k, ((ratio * n as f64).round() as usize).max(1));
        }
    }
}
