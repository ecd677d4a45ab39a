//! Two-gate routing between original and in-context-edited inference, and
//! composition of the edited prompt.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::classifier::{render_demonstration, ClassifierModel, Demonstration, Label};
use crate::embeddings::{cosine_similarity, l2_distance, Metric};
use crate::error::{Error, Result};
use crate::memory::{MemoryM1, MemoryM2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Original,
    Edited,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Original => "original",
            Route::Edited => "edited",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Placement of retrieved context relative to the edit demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextOrder {
    /// The closest demonstration sits right before the edit demonstration.
    #[default]
    MostSimilarLast,
    MostSimilarFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub threshold: f64,
    pub k0: usize,
    pub use_m1: bool,
    pub use_projection: bool,
    pub use_m2: bool,
    /// Similarity used by the M2 gate. Under L2 the similarity is the negated
    /// distance, so the threshold is a negative number.
    pub gate_metric: Metric,
    pub context_order: ContextOrder,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            threshold: 0.8,
            k0: 16,
            use_m1: true,
            use_projection: true,
            use_m2: true,
            gate_metric: Metric::Cosine,
            context_order: ContextOrder::MostSimilarLast,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        if self.gate_metric == Metric::Cosine && !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!(
                "cosine threshold {} outside [-1, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub route: Route,
    pub max_m2_similarity: f64,
    pub classifier_label: Label,
    pub margin: f64,
    /// The exact string sent to the backend.
    pub prompt: String,
}

/// Largest similarity between `feature` and any M2 entry; `-1` for an empty
/// memory under cosine, `-inf` under L2.
pub fn max_similarity_to_m2(feature: &[f32], m2: &MemoryM2, metric: Metric) -> Result<f64> {
    let mut best = match metric {
        Metric::Cosine => -1.0,
        Metric::L2 => f64::NEG_INFINITY,
    };
    for e in &m2.entries {
        let s = match metric {
            Metric::Cosine => cosine_similarity(feature, &e.feature)?,
            Metric::L2 => -l2_distance(feature, &e.feature)?,
        };
        best = best.max(s);
    }
    Ok(best)
}

/// Applies both gates. The returned prompt is the raw question; `edit_infer`
/// replaces it when the query is routed to the edited path.
pub fn route(
    question: &str,
    feature: &[f32],
    classifier: &ClassifierModel,
    m2: &MemoryM2,
    config: &RouterConfig,
) -> Result<RoutingDecision> {
    if classifier.is_projected() != config.use_projection {
        return Err(Error::invalid(format!(
            "use_projection = {} but the classifier is {}",
            config.use_projection,
            if classifier.is_projected() { "projected" } else { "unprojected" }
        )));
    }
    let sim = max_similarity_to_m2(feature, m2, config.gate_metric)?;
    let (label, margin) = classifier.classify(feature)?;
    let passes_m2 = !config.use_m2 || sim <= config.threshold;
    let route = if passes_m2 && label == Label::InDomain {
        Route::Edited
    } else {
        Route::Original
    };
    Ok(RoutingDecision {
        route,
        max_m2_similarity: sim,
        classifier_label: label,
        margin,
        prompt: question.to_string(),
    })
}

/// The `k0` M1 entries nearest to `feature` by L2, nearest first; ties by key.
pub fn retrieve_context<'a>(feature: &[f32], m1: &'a MemoryM1, k0: usize) -> Result<Vec<&'a Demonstration>> {
    let mut scored = m1
        .entries
        .iter()
        .map(|e| Ok((l2_distance(feature, &e.feature)?, e.demonstration.feature_key(), &e.demonstration)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    Ok(scored.into_iter().take(k0).map(|(_, _, d)| d).collect())
}

/// `context…`, then the edit demonstration, then the incoming question, one
/// per line. Context is emitted in the order given.
pub fn compose_prompt(edit_question: &str, edit_answer: &str, question: &str, context: &[&Demonstration]) -> String {
    let mut parts: Vec<&str> = context.iter().map(|d| d.text.as_str()).collect();
    let s_o = render_demonstration(edit_question, edit_answer);
    parts.push(&s_o);
    parts.push(question);
    parts.join("\n")
}

/// The active edit fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditPair<'a> {
    pub question: &'a str,
    pub answer: &'a str,
}

#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: &'a str,
    pub image_ref: &'a str,
    pub question: &'a str,
    pub feature: &'a [f32],
}

/// Read-only routing state shared across queries.
#[derive(Debug, Clone, Copy)]
pub struct Router<'a> {
    pub classifier: &'a ClassifierModel,
    pub m1: &'a MemoryM1,
    pub m2: &'a MemoryM2,
    pub config: &'a RouterConfig,
}

impl Router<'_> {
    pub fn decide(&self, edit: EditPair<'_>, query: &Query<'_>) -> Result<RoutingDecision> {
        let mut decision = route(query.question, query.feature, self.classifier, self.m2, self.config)?;
        if decision.route == Route::Edited {
            let mut context = if self.config.use_m1 {
                retrieve_context(query.feature, self.m1, self.config.k0)?
            } else {
                Vec::new()
            };
            if self.config.context_order == ContextOrder::MostSimilarLast {
                context.reverse();
            }
            decision.prompt = compose_prompt(edit.question, edit.answer, query.question, &context);
        }
        Ok(decision)
    }

    /// Routes `query` with `edit` installed and asks the backend.
    pub fn edit_infer(
        &self,
        edit: EditPair<'_>,
        query: &Query<'_>,
        backend: &dyn Backend,
    ) -> Result<(String, RoutingDecision)> {
        let decision = self.decide(edit, query)?;
        match backend.answer(query.image_ref, &decision.prompt) {
            Ok(answer) => Ok((answer, decision)),
            Err(e) => Err(Error::Inference {
                query: query.id.to_string(),
                route: decision.route.as_str(),
                sim: decision.max_m2_similarity,
                source: Box::new(e),
            }),
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub route: Route,
    /// `null` when the similarity is not finite (empty M2 under L2).
    pub sim: Option<f64>,
    pub margin: f64,
    pub prompt_len: usize,
}

impl DecisionRecord {
    pub fn new(id: &str, decision: &RoutingDecision) -> Self {
        DecisionRecord {
            id: id.to_string(),
            route: decision.route,
            sim: decision.max_m2_similarity.is_finite().then_some(decision.max_m2_similarity),
            margin: decision.margin,
            prompt_len: decision.prompt.chars().count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ScriptedBackend, ScriptedBehavior};
    use crate::classifier::{DemoKind, Projection};
    use crate::memory::{M1Entry, M2Entry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Identity gate on the first coordinate: in-domain iff x0 > 0.
    fn gate(d: usize) -> ClassifierModel {
        let mut weights = vec![0.0f32; 2 * d];
        weights[0] = 1.0;
        weights[1] = -1.0;
        ClassifierModel {
            projection: Projection::Identity { d },
            weights,
            lambda: 1.0,
            seed: 0,
            val_accuracy: 1.0,
        }
    }

    fn m2_of(features: &[Vec<f32>]) -> MemoryM2 {
        MemoryM2 {
            entries: features
                .iter()
                .enumerate()
                .map(|(i, f)| M2Entry {
                    question: format!("q{i}"),
                    source_id: format!("s{i}"),
                    kind: DemoKind::TextLocality,
                    feature: f.clone(),
                    margin: 0.0,
                })
                .collect(),
        }
    }

    fn unprojected() -> RouterConfig {
        RouterConfig {
            use_projection: false,
            ..RouterConfig::default()
        }
    }

    #[test]
    fn empty_m2_sentinel_and_self_similarity() {
        let empty = MemoryM2::default();
        assert_eq!(max_similarity_to_m2(&[1.0, 2.0], &empty, Metric::Cosine).unwrap(), -1.0);
        let m2 = m2_of(&[vec![3.0, -1.0]]);
        let s = max_similarity_to_m2(&[3.0, -1.0], &m2, Metric::Cosine).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(max_similarity_to_m2(&[1.0], &m2, Metric::Cosine).is_err());
    }

    #[test]
    fn max_similarity_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let q: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut best = f64::NEG_INFINITY;
        for f in &feats {
            let dot: f64 = q.iter().zip(f).map(|(&a, &b)| a as f64 * b as f64).sum();
            let nq: f64 = q.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let nf: f64 = f.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            best = best.max(dot / (nq * nf));
        }
        let got = max_similarity_to_m2(&q, &m2_of(&feats), Metric::Cosine).unwrap();
        assert!((got - best).abs() < 1e-12);
    }

    #[test]
    fn gate_cases() {
        let cls = gate(2);
        let cfg = unprojected();
        // sim 0.95 blocks even an in-domain query
        let m2 = m2_of(&[vec![0.95, (1.0f32 - 0.95 * 0.95).sqrt()]]);
        let d = route("q", &[1.0, 0.0], &cls, &m2, &cfg).unwrap();
        assert!(d.max_m2_similarity > cfg.threshold);
        assert_eq!(d.route, Route::Original);
        assert_eq!(d.prompt, "q");
        // low similarity + in-domain → edited
        let m2 = m2_of(&[vec![0.1, -(1.0f32 - 0.01).sqrt()]]);
        let d = route("q", &[1.0, 0.0], &cls, &m2, &cfg).unwrap();
        assert_eq!(d.route, Route::Edited);
        // out-of-domain never edited
        let d = route("q", &[-1.0, 0.0], &cls, &MemoryM2::default(), &cfg).unwrap();
        assert_eq!(d.route, Route::Original);
        // skipping the M2 gate lets the blocked query through
        let m2 = m2_of(&[vec![1.0, 0.0]]);
        let no_m2 = RouterConfig { use_m2: false, ..cfg.clone() };
        assert_eq!(route("q", &[1.0, 0.0], &cls, &m2, &no_m2).unwrap().route, Route::Edited);
        // projection flag must agree with the classifier
        assert!(route("q", &[1.0, 0.0], &cls, &m2, &RouterConfig::default()).is_err());
    }

    #[test]
    fn raising_threshold_never_unedits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cls = gate(3);
        let feats: Vec<Vec<f32>> = (0..8)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let m2 = m2_of(&feats);
        for _ in 0..50 {
            let q: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut prev = Route::Original;
            for t in [-0.5, 0.0, 0.5, 0.75, 0.8, 0.85, 0.9, 1.0] {
                let cfg = RouterConfig { threshold: t, ..unprojected() };
                let r = route("q", &q, &cls, &m2, &cfg).unwrap().route;
                assert!(!(prev == Route::Edited && r == Route::Original));
                prev = r;
            }
        }
    }

    #[test]
    fn prompt_without_context() {
        assert_eq!(compose_prompt("q", "a", "q", &[]), "New Fact: q a\nPrompt: q a\nq");
    }

    fn m1_line(xs: &[f32]) -> MemoryM1 {
        MemoryM1 {
            entries: xs
                .iter()
                .enumerate()
                .map(|(i, &x)| M1Entry {
                    demonstration: Demonstration::new(&format!("t{i}"), DemoKind::Edit, &format!("c{i}"), "z"),
                    feature: vec![x],
                })
                .collect(),
            ratio: 0.05,
        }
    }

    #[test]
    fn context_follows_retrieval_order() {
        let m1 = m1_line(&[5.0, 1.0, 3.0, 1.0]);
        let ctx = retrieve_context(&[0.0], &m1, 3).unwrap();
        let ids: Vec<&str> = ctx.iter().map(|d| d.source_id.as_str()).collect();
        assert_eq!(ids, ["t1", "t3", "t2"]);
        assert_eq!(retrieve_context(&[0.0], &m1, 16).unwrap().len(), 4);

        let p = compose_prompt("x_e", "y_e", "x_r", &ctx[..2]);
        let lines: Vec<&str> = p.lines().collect();
        assert_eq!(lines[0], "New Fact: c1 z");
        assert_eq!(lines[2], "New Fact: c3 z");
        assert_eq!(lines[4], "New Fact: x_e y_e");
        assert_eq!(*lines.last().unwrap(), "x_r");
    }

    #[test]
    fn edit_infer_paths() {
        let cls = gate(1);
        let m1 = m1_line(&[1.0, 2.0, 9.0]);
        let m2 = MemoryM2::default();
        let cfg = RouterConfig { k0: 2, ..unprojected() };
        let router = Router { classifier: &cls, m1: &m1, m2: &m2, config: &cfg };
        let mut behavior = ScriptedBehavior::default();
        behavior.insert_base("img", "Q", "old");
        let backend = ScriptedBackend::new(behavior);
        let edit = EditPair { question: "Q", answer: "new" };

        let q = Query { id: "a", image_ref: "img", question: "Q", feature: &[1.5] };
        let (ans, d) = router.edit_infer(edit, &q, &backend).unwrap();
        assert_eq!(d.route, Route::Edited);
        assert_eq!(ans, "new");
        // most similar last: t1 and t0 tie on distance, broken by key
        assert!(d.prompt.starts_with("New Fact: c1 z\nPrompt: c1 z\nNew Fact: c0 z"));

        let q = Query { id: "b", image_ref: "img", question: "Q", feature: &[-1.0] };
        let (ans, d) = router.edit_infer(edit, &q, &backend).unwrap();
        assert_eq!(d.route, Route::Original);
        assert_eq!(d.prompt, "Q");
        assert_eq!(ans, "old");

        let first = RouterConfig { context_order: ContextOrder::MostSimilarFirst, ..cfg.clone() };
        let r = Router { config: &first, ..router };
        let d = r.decide(edit, &Query { id: "c", image_ref: "img", question: "Q", feature: &[1.5] }).unwrap();
        assert!(d.prompt.starts_with("New Fact: c0 z"));

        let no_m1 = RouterConfig { use_m1: false, ..cfg.clone() };
        let r = Router { config: &no_m1, ..router };
        let d = r.decide(edit, &Query { id: "d", image_ref: "img", question: "Q", feature: &[1.5] }).unwrap();
        assert_eq!(d.prompt, compose_prompt("Q", "new", "Q", &[]));
    }

    #[test]
    fn decision_record_fields() {
        let d = RoutingDecision {
            route: Route::Edited,
            max_m2_similarity: f64::NEG_INFINITY,
            classifier_label: Label::InDomain,
            margin: 0.5,
            prompt: "héllo".into(),
        };
        let json = serde_json::to_string(&DecisionRecord::new("x", &d)).unwrap();
        assert_eq!(json, r#"{"id":"x","route":"edited","sim":null,"margin":0.5,"prompt_len":5}"#);
    }

    #[test]
    fn config_validation() {
        assert!(RouterConfig::default().validate().is_ok());
        assert!(RouterConfig { threshold: 1.5, ..RouterConfig::default() }.validate().is_err());
        let l2 = RouterConfig { threshold: -3.0, gate_metric: Metric::L2, ..RouterConfig::default() };
        assert!(l2.validate().is_ok());
    }

    proptest::proptest! {
        #[test]
        fn edited_iff_gate_passes_and_in_domain(
            q in proptest::collection::vec(-1.0f32..1.0, 3),
            mem in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 0..6),
            threshold in -1.0f64..1.0,
            use_m2 in proptest::bool::ANY,
        ) {
            proptest::prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            proptest::prop_assume!(mem.iter().all(|f| f.iter().any(|v| v.abs() > 1e-3)));
            let config = RouterConfig { threshold, use_m2, ..unprojected() };
            let m2 = m2_of(&mem);
            let d = route("q", &q, &gate(3), &m2, &config).unwrap();
            let sim = max_similarity_to_m2(&q, &m2, Metric::Cosine).unwrap();
            let expected = (!use_m2 || sim <= threshold) && q[0] - (-q[0]) > 0.0;
            proptest::prop_assert_eq!(d.route == Route::Edited, expected);
        }
    }
}
