//! Model backends: a uniform `answer(image, prompt)` interface, a deterministic
//! scripted model for tests, and an HTTP client for inference/embedding servers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

/// Returned when the scripted table has no entry.
pub const FALLBACK_ANSWER: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub image_ref: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub answer: String,
    pub latency_ms: f64,
}

/// Runs `f` over `items` in order-preserving parallel with at most `limit`
/// items in flight (`None` means the global pool).
pub fn map_limited<T, R, F>(items: &[T], limit: Option<usize>, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match limit {
        None => Ok(items.par_iter().map(&f).collect()),
        Some(0) => Err(Error::invalid("concurrency limit must be at least 1")),
        Some(1) => Ok(items.iter().map(&f).collect()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(|| items.par_iter().map(&f).collect()))
        }
    }
}

pub trait Backend: Send + Sync {
    fn answer(&self, image_ref: &str, prompt: &str) -> Result<String>;

    /// Maximum requests in flight; `None` is unlimited.
    fn max_concurrency(&self) -> Option<usize>;

    /// Answers every request, preserving order; failures are reported in place.
    fn batch_answer(&self, requests: &[BackendRequest]) -> Vec<Result<BackendResponse>> {
        let run = |r: &BackendRequest| {
            let start = Instant::now();
            self.answer(&r.image_ref, &r.prompt).map(|answer| BackendResponse {
                answer,
                latency_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        };
        match map_limited(requests, self.max_concurrency(), run) {
            Ok(v) => v,
            Err(e) => {
                let msg = e.to_string();
                requests.iter().map(|_| Err(Error::invalid(msg.clone()))).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseEntry {
    pub image: String,
    pub question: String,
    pub answer: String,
}

/// Configuration of the scripted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedBehavior {
    /// Answers to raw questions, keyed by image and normalized question.
    pub base_table: Vec<BaseEntry>,
    /// Answer from a `New Fact` block whose question matches the final line.
    pub fact_sensitivity: bool,
    /// Questions the model recognizes as restatements of another question,
    /// but only when the prompt carries enough other facts to reason from.
    pub aliases: BTreeMap<String, String>,
    /// Facts, beyond the matched one, needed before an alias is followed.
    pub alias_min_context: usize,
    /// With two or more facts in the prompt and none matching, answer with
    /// the last word of the last fact.
    pub interference: bool,
}

impl Default for ScriptedBehavior {
    fn default() -> Self {
        ScriptedBehavior {
            base_table: Vec::new(),
            fact_sensitivity: true,
            aliases: BTreeMap::new(),
            alias_min_context: 1,
            interference: false,
        }
    }
}

impl ScriptedBehavior {
    pub fn insert_base(&mut self, image: &str, question: &str, answer: &str) {
        self.base_table.push(BaseEntry {
            image: image.to_string(),
            question: question.to_string(),
            answer: answer.to_string(),
        });
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

const FACT_PREFIX: &str = "New Fact: ";

/// A pure function of `(image_ref, prompt)`.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    base: HashMap<(String, String), String>,
    aliases: HashMap<String, String>,
    behavior: ScriptedBehavior,
}

impl ScriptedBackend {
    pub fn new(behavior: ScriptedBehavior) -> Self {
        let base = behavior
            .base_table
            .iter()
            .map(|e| ((e.image.clone(), normalize_answer(&e.question)), e.answer.clone()))
            .collect();
        let aliases = behavior
            .aliases
            .iter()
            .map(|(from, to)| (normalize_answer(from), to.clone()))
            .collect();
        ScriptedBackend {
            base,
            aliases,
            behavior,
        }
    }

    pub fn behavior(&self) -> &ScriptedBehavior {
        &self.behavior
    }

    fn fact_answer<'p>(facts: &[&'p str], question: &str) -> Option<&'p str> {
        let q = normalize_answer(question);
        facts.iter().rev().find_map(|fact| {
            let head = fact.get(..question.len())?;
            let rest = fact.get(question.len()..)?;
            (normalize_answer(head) == q && rest.starts_with(' ')).then(|| rest.trim())
        })
    }

    fn respond(&self, image_ref: &str, prompt: &str) -> String {
        let lines: Vec<&str> = prompt.lines().collect();
        let question = lines.last().copied().unwrap_or("");
        let facts: Vec<&str> = lines[..lines.len().saturating_sub(1)]
            .iter()
            .filter_map(|l| l.strip_prefix(FACT_PREFIX))
            .collect();
        let b = &self.behavior;
        if b.fact_sensitivity {
            if let Some(a) = Self::fact_answer(&facts, question) {
                return a.to_string();
            }
            if facts.len() > b.alias_min_context {
                if let Some(canonical) = self.aliases.get(&normalize_answer(question)) {
                    if let Some(a) = Self::fact_answer(&facts, canonical) {
                        return a.to_string();
                    }
                }
            }
        }
        if b.interference && facts.len() >= 2 {
            if let Some(word) = facts.last().and_then(|f| f.split_whitespace().last()) {
                return word.to_string();
            }
        }
        self.base
            .get(&(image_ref.to_string(), normalize_answer(question)))
            .cloned()
            .unwrap_or_else(|| FALLBACK_ANSWER.to_string())
    }
}

impl Backend for ScriptedBackend {
    fn answer(&self, image_ref: &str, prompt: &str) -> Result<String> {
        Ok(self.respond(image_ref, prompt))
    }

    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Text and image feature extraction.
pub trait Encoder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Serialize)]
struct AnswerRequest<'a> {
    image: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct AnswerReply {
    answer: String,
}

#[derive(Serialize)]
struct EmbedTextRequest<'a> {
    texts: &'a [String],
}

#[derive(Serialize)]
struct EmbedImageRequest<'a> {
    images: &'a [String],
}

#[derive(Deserialize)]
struct EmbedReply {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

#[derive(Deserialize)]
struct ErrorReply {
    error: String,
}

/// Client for a server speaking the `/v1/answer`, `/v1/embed_text` and
/// `/v1/embed_image` JSON protocol.
#[derive(Debug, Clone)]
pub struct WireClient {
    base_url: String,
    agent: ureq::Agent,
    concurrency: usize,
}

impl WireClient {
    pub fn new(base_url: &str, concurrency: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        WireClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            concurrency: concurrency.max(1),
        }
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R> {
        let url = format!("{}{path}", self.base_url);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: reading body: {e}")))?;
        if status != 200 {
            let message = serde_json::from_str::<ErrorReply>(&text)
                .map(|e| e.error)
                .unwrap_or(text);
            return Err(Error::Backend { status, message });
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::Transport(format!("{url}: malformed response: {e}")))
    }

    fn embed(&self, path: &str, body: &impl Serialize, expected: usize) -> Result<Vec<Vec<f32>>> {
        let reply: EmbedReply = self.post(path, body)?;
        if reply.vectors.len() != expected {
            return Err(Error::Transport(format!(
                "{path}: expected {expected} vectors, got {}",
                reply.vectors.len()
            )));
        }
        for (row, v) in reply.vectors.iter().enumerate() {
            if v.len() != reply.dim {
                return Err(Error::DimMismatch {
                    expected: reply.dim,
                    actual: v.len(),
                });
            }
            if let Some(col) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(reply.vectors)
    }
}

impl Backend for WireClient {
    fn answer(&self, image_ref: &str, prompt: &str) -> Result<String> {
        let reply: AnswerReply = self.post(
            "/v1/answer",
            &AnswerRequest {
                image: image_ref,
                prompt,
            },
        )?;
        Ok(reply.answer)
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.concurrency)
    }
}

impl Encoder for WireClient {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.embed("/v1/embed_text", &EmbedTextRequest { texts }, texts.len())
    }

    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        self.embed("/v1/embed_image", &EmbedImageRequest { images }, images.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> ScriptedBackend {
        let mut b = ScriptedBehavior::default();
        b.insert_base("img1", "What is the bird?", "crow");
        b.insert_base("img2", "Q2", "eagle");
        b.aliases.insert("Which bird is it?".into(), "What is the bird?".into());
        ScriptedBackend::new(b)
    }

    #[test]
    fn base_lookup_and_fallback() {
        let b = backend();
        assert_eq!(b.answer("img1", "what is the bird").unwrap(), "crow");
        assert_eq!(b.answer("img9", "What is the bird?").unwrap(), FALLBACK_ANSWER);
    }

    #[test]
    fn fact_blocks_override() {
        let b = backend();
        let p = "New Fact: Q2 parrot\nPrompt: Q2 parrot\nQ2";
        assert_eq!(b.answer("img2", p).unwrap(), "parrot");
        let p = "New Fact: What is the bird? blue jay\nPrompt: What is the bird? blue jay\nWhat is the bird?";
        assert_eq!(b.answer("img1", p).unwrap(), "blue jay");
        let mut off = b.behavior().clone();
        off.fact_sensitivity = false;
        assert_eq!(ScriptedBackend::new(off).answer("img2", "New Fact: Q2 parrot\nQ2").unwrap(), "eagle");
    }

    #[test]
    fn alias_needs_context() {
        let b = backend();
        let bare = "New Fact: What is the bird? owl\nPrompt: What is the bird? owl\nWhich bird is it?";
        assert_eq!(b.answer("img1", bare).unwrap(), FALLBACK_ANSWER);
        let ctx = format!("New Fact: Q7 x\nPrompt: Q7 x\n{bare}");
        assert_eq!(b.answer("img1", &ctx).unwrap(), "owl");
    }

    #[test]
    fn interference_takes_last_fact() {
        let mut beh = backend().behavior().clone();
        beh.interference = true;
        let b = ScriptedBackend::new(beh);
        let p = "New Fact: Q7 x\nPrompt: Q7 x\nNew Fact: Q8 yy\nPrompt: Q8 yy\nQ2";
        assert_eq!(b.answer("img2", p).unwrap(), "yy");
        assert_eq!(b.answer("img2", "New Fact: Q8 yy\nPrompt: Q8 yy\nQ2").unwrap(), "eagle");
    }

    #[test]
    fn batch_preserves_order() {
        let b = backend();
        assert!(b.batch_answer(&[]).is_empty());
        let reqs: Vec<BackendRequest> = (0..50)
            .map(|i| BackendRequest {
                image_ref: if i % 2 == 0 { "img1" } else { "img2" }.into(),
                prompt: if i % 3 == 0 { "Q2".into() } else { format!("New Fact: Q2 p{i}\nQ2") },
            })
            .collect();
        let batch = b.batch_answer(&reqs);
        for (r, got) in reqs.iter().zip(batch) {
            assert_eq!(got.unwrap().answer, b.answer(&r.image_ref, &r.prompt).unwrap());
        }
        let limited = map_limited(&reqs, Some(3), |r| b.answer(&r.image_ref, &r.prompt).unwrap()).unwrap();
        assert_eq!(limited.len(), 50);
        assert!(map_limited(&reqs, Some(0), |_| 0).is_err());
    }

    #[test]
    fn behavior_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        let b = backend().behavior().clone();
        b.save(&p).unwrap();
        assert_eq!(ScriptedBehavior::load(&p).unwrap(), b);
    }

    proptest::proptest! {
        #[test]
        fn map_limited_preserves_order(items in proptest::collection::vec(0i64..1000, 0..100), limit in proptest::option::of(1usize..8)) {
            let out = map_limited(&items, limit, |x| x * 2).unwrap();
            proptest::prop_assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }
}
