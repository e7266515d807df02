//! Client for an external model bridge speaking line-delimited JSON, and
//! provider adapters on top of it.
//!
//! Every request is one JSON object per line carrying a client-chosen `id`
//! and an `op`; the bridge answers each with exactly one line
//! `{"id", "ok", "result" | "error"}`, in any order. A background reader
//! thread routes responses to waiting callers by id, so one client can be
//! shared across threads with many requests in flight.
//!
//! [`BridgeLm`] adapts sparse word-level log-probabilities to a fixed word
//! vocabulary: listed words keep their probability, the reported
//! `backoff_mass` is spread evenly over vocabulary words that were not
//! listed, and the result is renormalized. Constraint words outside the
//! bridge's top-k therefore keep a small non-zero probability and remain
//! reachable by the constrained decoder.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::decode::{LmScorer, Symbol, Vocabulary};
use crate::filter::{DiscriminatorKind, DiscriminatorProvider};
use crate::rank::{NliJudgment, NliProvider};
use crate::subtype::{MaskInfillProvider, TextCompletionProvider};
use crate::{Error, Result};

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResponse {
    #[serde(default)]
    pub id: Option<String>,
    pub ok: bool,
    #[serde(default)]
    pub result: Option<Value>,
    #[serde(default)]
    pub error: Option<String>,
}

type Pending = Arc<Mutex<HashMap<String, Sender<BridgeResponse>>>>;

pub struct BridgeClient {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    next_id: AtomicU64,
    timeout: Duration,
    max_in_flight: usize,
    reader: Option<JoinHandle<()>>,
    child: Option<Mutex<Child>>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("timeout", &self.timeout)
            .field("max_in_flight", &self.max_in_flight)
            .field("closed", &self.closed.load(Ordering::Relaxed))
            .finish()
    }
}

impl BridgeClient {
    /// Client over an arbitrary byte stream pair.
    pub fn new<R, W>(reader: R, writer: W) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let pending: Pending = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        let handle = {
            let pending = Arc::clone(&pending);
            let closed = Arc::clone(&closed);
            std::thread::Builder::new()
                .name("bridge-reader".into())
                .spawn(move || read_loop(reader, pending, closed))
                .expect("spawn bridge reader thread")
        };
        Self {
            writer: Mutex::new(Box::new(writer)),
            pending,
            closed,
            next_id: AtomicU64::new(1),
            timeout: DEFAULT_TIMEOUT,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            reader: Some(handle),
            child: None,
        }
    }

    /// Starts the bridge as a child process talking over stdio.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Bridge("child stdin unavailable".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::Bridge("child stdout unavailable".into()))?;
        let mut client = Self::new(stdout, stdin);
        client.child = Some(Mutex::new(child));
        Ok(client)
    }

    #[cfg(unix)]
    pub fn connect_unix(path: &Path) -> Result<Self> {
        let stream = std::os::unix::net::UnixStream::connect(path)
            .map_err(|e| Error::Bridge(format!("cannot connect to {}: {e}", path.display())))?;
        let reader = stream.try_clone().map_err(|e| Error::Bridge(e.to_string()))?;
        Ok(Self::new(reader, stream))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Sends `op` with `payload` fields and waits for the matching result.
    pub fn call(&self, op: &str, payload: Map<String, Value>) -> Result<Value> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(Error::Bridge("bridge connection is closed".into()));
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let mut request = payload;
        request.insert("id".into(), Value::String(id.clone()));
        request.insert("op".into(), Value::String(op.to_string()));
        let mut line = serde_json::to_string(&request).map_err(|e| Error::Bridge(e.to_string()))?;
        line.push('\n');

        let (tx, rx) = mpsc::channel();
        self.pending.lock().expect("pending lock").insert(id.clone(), tx);
        let sent = {
            let mut w = self.writer.lock().expect("writer lock");
            w.write_all(line.as_bytes()).and_then(|_| w.flush())
        };
        if let Err(e) = sent {
            self.pending.lock().expect("pending lock").remove(&id);
            return Err(Error::Bridge(format!("write failed: {e}")));
        }
        let response = match rx.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").remove(&id);
                return Err(Error::Bridge(format!("request {id} ({op}) timed out after {:?}", self.timeout)));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Bridge(format!("connection closed before response to {id} ({op})")));
            }
        };
        if response.ok {
            response.result.ok_or_else(|| Error::Bridge(format!("response to {id} has no result")))
        } else {
            Err(Error::Bridge(format!("{op}: {}", response.error.unwrap_or_else(|| "unknown error".into()))))
        }
    }

    fn call_as<T: for<'de> Deserialize<'de>>(&self, op: &str, payload: Value) -> Result<T> {
        let Value::Object(map) = payload else {
            unreachable!("payloads are objects");
        };
        let result = self.call(op, map)?;
        serde_json::from_value(result).map_err(|e| Error::Bridge(format!("malformed {op} result: {e}")))
    }

    pub fn logprobs(&self, prefix: &[String], top_k: usize) -> Result<SparseLogProbs> {
        self.call_as("logprobs", json!({ "prefix": prefix, "top_k": top_k }))
    }

    pub fn seqscore(&self, text: &str) -> Result<SeqScore> {
        self.call_as("seqscore", json!({ "text": text }))
    }

    pub fn nli(&self, premise: &str, hypothesis: &str) -> Result<NliJudgment> {
        let j: NliJudgment = self.call_as("nli", json!({ "premise": premise, "hypothesis": hypothesis }))?;
        j.validate().map_err(|e| Error::Bridge(e.to_string()))?;
        Ok(j)
    }

    pub fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        #[derive(Deserialize)]
        struct Completions {
            completions: Vec<String>,
        }
        let c: Completions = self.call_as("complete", json!({ "prompt": prompt, "n": n }))?;
        Ok(c.completions)
    }

    pub fn infill(&self, text: &str, k: usize) -> Result<Vec<(String, f64)>> {
        #[derive(Deserialize)]
        struct Fill {
            token: String,
            score: f64,
        }
        #[derive(Deserialize)]
        struct Fills {
            fills: Vec<Fill>,
        }
        let f: Fills = self.call_as("infill", json!({ "text": text, "k": k }))?;
        Ok(f.fills.into_iter().map(|f| (f.token, f.score)).collect())
    }

    pub fn discriminate(&self, model: &str, generic: &str, exemplar: &str) -> Result<f64> {
        #[derive(Deserialize)]
        struct Prob {
            probability: f64,
        }
        let p: Prob =
            self.call_as("discriminate", json!({ "model": model, "generic": generic, "exemplar": exemplar }))?;
        Ok(p.probability)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
        if let Some(child) = self.child.take() {
            let mut child = child.into_inner().unwrap_or_else(|e| e.into_inner());
            let _ = child.kill();
            let _ = child.wait();
        }
        // The reader exits once the peer closes its end; do not block on it.
        drop(self.reader.take());
    }
}

fn read_loop<R: Read>(reader: R, pending: Pending, closed: Arc<AtomicBool>) {
    for line in BufReader::new(reader).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let response: BridgeResponse = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("unparsable bridge response: {e}");
                continue;
            }
        };
        let Some(id) = response.id.clone() else {
            log::warn!("bridge response without id: {:?}", response.error);
            continue;
        };
        match pending.lock().expect("pending lock").remove(&id) {
            Some(tx) => {
                let _ = tx.send(response);
            }
            None => log::warn!("bridge response for unknown id {id}"),
        }
    }
    closed.store(true, Ordering::SeqCst);
    // Dropping the senders wakes every waiting caller with a disconnect.
    pending.lock().expect("pending lock").clear();
}

/// Word-level next-token distribution, possibly truncated to the top k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    /// Probability mass not covered by `tokens`.
    #[serde(default)]
    pub backoff_mass: f64,
}

impl SparseLogProbs {
    /// Dense log-probabilities over `vocab` (see the module docs).
    pub fn to_dense(&self, vocab: &Vocabulary) -> Result<Vec<f64>> {
        if self.tokens.len() != self.logprobs.len() {
            return Err(Error::Bridge(format!(
                "{} tokens but {} logprobs",
                self.tokens.len(),
                self.logprobs.len()
            )));
        }
        if !(0.0..=1.0 + 1e-9).contains(&self.backoff_mass) {
            return Err(Error::Bridge(format!("backoff mass {} outside [0, 1]", self.backoff_mass)));
        }
        let mut probs: Vec<Option<f64>> = vec![None; vocab.len()];
        for (tok, lp) in self.tokens.iter().zip(&self.logprobs) {
            if lp.is_nan() || *lp > 1e-9 {
                return Err(Error::Bridge(format!("invalid log-probability {lp} for {tok:?}")));
            }
            let sym = vocab.get(tok).or_else(|| vocab.lowercase_matches(&tok.to_lowercase()).first().copied());
            if let Some(sym) = sym {
                *probs[sym as usize].get_or_insert(0.0) += lp.exp();
            }
        }
        let unlisted = probs.iter().filter(|p| p.is_none()).count();
        let share = if unlisted > 0 { self.backoff_mass / unlisted as f64 } else { 0.0 };
        let dense: Vec<f64> = probs.into_iter().map(|p| p.unwrap_or(share)).collect();
        let total: f64 = dense.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::Bridge("no probability mass falls on the vocabulary".into()));
        }
        Ok(dense.into_iter().map(|p| (p / total).ln()).collect())
    }

    /// Total probability reported, listed entries plus backoff.
    pub fn total_mass(&self) -> f64 {
        self.logprobs.iter().map(|lp| lp.exp()).sum::<f64>() + self.backoff_mass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqScore {
    pub logprob: f64,
    pub n_tokens: usize,
}

/// Word-level scorer backed by the bridge.
pub struct BridgeLm {
    client: Arc<BridgeClient>,
    vocab: Vocabulary,
    top_k: usize,
}

impl BridgeLm {
    pub fn new(client: Arc<BridgeClient>, vocab: Vocabulary, top_k: usize) -> Self {
        Self { client, vocab, top_k }
    }
}

impl LmScorer for BridgeLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, prefix: &[Symbol]) -> Result<Vec<f64>> {
        self.vocab.check(prefix)?;
        let words: Vec<String> = prefix.iter().map(|&s| self.vocab.symbol(s).to_string()).collect();
        self.client.logprobs(&words, self.top_k)?.to_dense(&self.vocab)
    }
}

pub struct BridgeNli(pub Arc<BridgeClient>);

impl NliProvider for BridgeNli {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliJudgment> {
        self.0.nli(premise, hypothesis)
    }

    fn max_in_flight(&self) -> usize {
        self.0.max_in_flight()
    }
}

pub struct BridgeCompletion(pub Arc<BridgeClient>);

impl TextCompletionProvider for BridgeCompletion {
    fn complete(&self, prompt: &str, n_sequences: usize) -> Result<Vec<String>> {
        self.0.complete(prompt, n_sequences)
    }

    fn max_in_flight(&self) -> usize {
        self.0.max_in_flight()
    }
}

pub struct BridgeInfill(pub Arc<BridgeClient>);

impl MaskInfillProvider for BridgeInfill {
    fn infill(&self, text: &str, k: usize) -> Result<Vec<(String, f64)>> {
        self.0.infill(text, k)
    }

    fn max_in_flight(&self) -> usize {
        self.0.max_in_flight()
    }
}

pub struct BridgeDiscriminator {
    client: Arc<BridgeClient>,
    kind: DiscriminatorKind,
    model_id: String,
}

impl BridgeDiscriminator {
    pub fn new(client: Arc<BridgeClient>, kind: DiscriminatorKind, model_id: &str) -> Self {
        Self { client, kind, model_id: model_id.to_string() }
    }
}

impl DiscriminatorProvider for BridgeDiscriminator {
    fn kind(&self) -> DiscriminatorKind {
        self.kind
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn score(&self, generic: &str, exemplar: &str) -> Result<f64> {
        self.client.discriminate(&self.model_id, generic, exemplar)
    }

    fn max_in_flight(&self) -> usize {
        self.client.max_in_flight()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub requests: usize,
    pub responses: usize,
    pub max_mass_error: f64,
    pub failures: Vec<String>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.requests == self.responses
    }
}

/// Issues `in_flight` concurrent logprobs requests and checks that each one
/// is answered and normalized within 1e-3.
pub fn conformance_check(client: &BridgeClient, prefixes: &[Vec<String>], in_flight: usize) -> ConformanceReport {
    let results: Vec<Result<SparseLogProbs>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..in_flight)
            .map(|i| {
                let prefix = prefixes.get(i % prefixes.len().max(1)).cloned().unwrap_or_default();
                scope.spawn(move || client.logprobs(&prefix, DEFAULT_TOP_K))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("conformance worker")).collect()
    });
    let mut report =
        ConformanceReport { requests: in_flight, responses: 0, max_mass_error: 0.0, failures: Vec::new() };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(lp) => {
                report.responses += 1;
                let err = (lp.total_mass() - 1.0).abs();
                report.max_mass_error = report.max_mass_error.max(err);
                if err > 1e-3 {
                    report.failures.push(format!("request {i}: mass off by {err}"));
                }
            }
            Err(e) => report.failures.push(format!("request {i}: {e}")),
        }
    }
    report
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use std::os::unix::net::UnixStream;

    /// Answers each request from its own thread after an id-dependent delay,
    /// so responses come back out of order.
    fn fake_bridge(stream: UnixStream) {
        let writer = Arc::new(Mutex::new(stream.try_clone().unwrap()));
        std::thread::spawn(move || {
            for line in BufReader::new(stream).lines() {
                let Ok(line) = line else { break };
                let writer = Arc::clone(&writer);
                std::thread::spawn(move || {
                    let req: Value = match serde_json::from_str(&line) {
                        Ok(v) => v,
                        Err(_) => {
                            let mut w = writer.lock().unwrap();
                            let _ = writeln!(w, r#"{{"ok":false,"error":"malformed request"}}"#);
                            return;
                        }
                    };
                    let id = req["id"].as_str().unwrap_or_default().to_string();
                    let n: u64 = id.parse().unwrap_or(0);
                    std::thread::sleep(Duration::from_millis((n * 7919) % 23));
                    let result = match req["op"].as_str() {
                        Some("logprobs") => Some(json!({
                            "tokens": ["fly", "swim", "</s>"],
                            "logprobs": [0.5f64.ln(), 0.25f64.ln(), 0.15f64.ln()],
                            "backoff_mass": 0.1
                        })),
                        Some("nli") => Some(json!({"entail": 0.1, "neutral": 0.2, "contradict": 0.7})),
                        Some("complete") => Some(json!({"completions": vec!["sparrow, robin"; req["n"].as_u64().unwrap() as usize]})),
                        Some("infill") => Some(json!({"fills": [{"token": "sparrow", "score": 0.4}]})),
                        Some("discriminate") => Some(json!({"probability": 0.8})),
                        Some("seqscore") => Some(json!({"logprob": -3.0, "n_tokens": 3})),
                        _ => None,
                    };
                    let resp = match result {
                        Some(r) => json!({"id": id, "ok": true, "result": r}),
                        None => json!({"id": id, "ok": false, "error": "unsupported op"}),
                    };
                    let mut w = writer.lock().unwrap();
                    writeln!(w, "{resp}").unwrap();
                });
            }
        });
    }

    fn client() -> Arc<BridgeClient> {
        let (a, b) = UnixStream::pair().unwrap();
        fake_bridge(b);
        let reader = a.try_clone().unwrap();
        Arc::new(BridgeClient::new(reader, a).with_timeout(Duration::from_secs(10)))
    }

    #[test]
    fn sixty_four_in_flight_each_answered_once() {
        let c = client();
        let report = conformance_check(&c, &[vec!["birds".into()]], 64);
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.responses, 64);
        assert!(c.pending.lock().unwrap().is_empty());
    }

    #[test]
    fn mixed_ops_round_trip() {
        let c = client();
        assert_eq!(c.nli("Birds can fly", "Penguins cannot fly").unwrap().contradict, 0.7);
        assert_eq!(c.complete("Types of birds:", 2).unwrap().len(), 2);
        assert_eq!(c.infill("<MASK> is a kind of bird.", 1).unwrap()[0].0, "sparrow");
        assert_eq!(c.discriminate("v", "g", "e").unwrap(), 0.8);
        assert_eq!(c.seqscore("a b c").unwrap().n_tokens, 3);
        let err = c.call("teleport", Map::new()).unwrap_err();
        assert!(err.to_string().contains("unsupported op"));
    }

    #[test]
    fn sparse_vector_maps_onto_vocabulary() {
        let vocab = Vocabulary::new(["fly", "swim", "run", "walk"].map(String::from), "</s>").unwrap();
        let lm = BridgeLm::new(client(), vocab, 3);
        let lp = lm.next_log_probs(&[0]).unwrap();
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[2] - 0.05).abs() < 1e-12);
        assert!((p[4] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn closed_peer_fails_waiting_calls() {
        let (a, b) = UnixStream::pair().unwrap();
        let c = BridgeClient::new(a.try_clone().unwrap(), a).with_timeout(Duration::from_secs(5));
        drop(b);
        assert!(matches!(c.nli("a", "b"), Err(Error::Bridge(_))));
    }

    #[test]
    fn sparse_validation() {
        let vocab = Vocabulary::new(["a".to_string()], "</s>").unwrap();
        let bad = SparseLogProbs { tokens: vec!["a".into()], logprobs: vec![], backoff_mass: 0.0 };
        assert!(bad.to_dense(&vocab).is_err());
        let none = SparseLogProbs { tokens: vec!["zzz".into()], logprobs: vec![0.0], backoff_mass: 0.0 };
        assert!(none.to_dense(&vocab).is_err());
    }
}
