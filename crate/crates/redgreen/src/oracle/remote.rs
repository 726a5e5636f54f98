//! HTTP client for probing a remote completion API that exposes per-token
//! log-probabilities.
//!
//! Contexts and candidates are token ids end-to-end; a pluggable renderer
//! maps ids to the strings sent over the wire (the default renders ids as
//! decimal, which round-trips for loopback testing; real tokenizers are a
//! thin adapter on top). Transient failures retry with capped exponential
//! backoff; authentication failures never retry.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dist::TokenDistribution;
use crate::error::{Error, Result};
use crate::oracle::{OracleMode, ProbeOracle, ProbeOrder, ProbeQuery, RawPair};
use crate::types::{TokenId, Vocabulary};

/// Floor applied when a candidate is missing from the returned top-k.
pub const MIN_PROB_FLOOR: f64 = 1e-6;

const MAX_RETRIES: u32 = 4;
const BACKOFF_BASE_MS: u64 = 250;
const BACKOFF_CAP_MS: u64 = 4_000;

fn default_top_k() -> usize {
    20
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_concurrency() -> usize {
    4
}
fn default_mode() -> OracleMode {
    OracleMode::Exact
}

/// Remote endpoint description. The credential is read from the environment
/// variable named by `api_key_env` and never serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_mode")]
    pub mode: OracleMode,
    /// Optional JSONL probe transcript destination.
    #[serde(default)]
    pub transcript_path: Option<std::path::PathBuf>,
}

/// Render the probe prompt for a context and two candidates, in the
/// presented order. The template is fixed; substitution uses single spaces.
pub fn render_probe_prompt(context: &str, shown_first: &str, shown_second: &str) -> String {
    let phrase = |cand: &str| {
        if context.is_empty() {
            cand.to_string()
        } else {
            format!("{context} {cand}")
        }
    };
    format!(
        "I need you to randomly choose a phrase without exact meaning.\n\
         Randomly start your answer with: \"{}\" or \"{}\"",
        phrase(shown_first),
        phrase(shown_second)
    )
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        drop(p);
        let out = f();
        *self.permits.lock().unwrap() += 1;
        self.cv.notify_one();
        out
    }
}

/// Client for a remote watermarked model.
pub struct RemoteOracle {
    cfg: EndpointConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    vocab: Vocabulary,
    render: Box<dyn Fn(TokenId) -> String + Send + Sync>,
    semaphore: Semaphore,
    queries: std::sync::atomic::AtomicU64,
    transcript: Option<Mutex<std::io::BufWriter<std::fs::File>>>,
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    context: &'a [TokenId],
    t_i: TokenId,
    t_j: TokenId,
    order: ProbeOrder,
    p_i: f64,
    p_j: f64,
    source: &'a str,
}

impl RemoteOracle {
    /// Build a client with the default decimal token renderer.
    pub fn new(cfg: EndpointConfig, vocab: Vocabulary) -> Result<Self> {
        Self::with_renderer(cfg, vocab, Box::new(|t| t.to_string()))
    }

    pub fn with_renderer(
        cfg: EndpointConfig,
        vocab: Vocabulary,
        render: Box<dyn Fn(TokenId) -> String + Send + Sync>,
    ) -> Result<Self> {
        let api_key = std::env::var(&cfg.api_key_env).map_err(|_| Error::Auth {
            msg: format!(
                "credential environment variable {} not set",
                cfg.api_key_env
            ),
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Transport {
                msg: e.to_string(),
                retryable: false,
            })?;
        let transcript = match &cfg.transcript_path {
            Some(path) => {
                let file = std::fs::File::create(path)?;
                Some(Mutex::new(std::io::BufWriter::new(file)))
            }
            None => None,
        };
        Ok(RemoteOracle {
            semaphore: Semaphore::new(cfg.max_concurrency),
            api_key,
            client,
            vocab,
            render,
            queries: std::sync::atomic::AtomicU64::new(0),
            transcript,
            cfg,
        })
    }

    fn render_context(&self, context: &[TokenId]) -> String {
        context
            .iter()
            .map(|&t| (self.render)(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn log_transcript(&self, q: &ProbeQuery, p_i: f64, p_j: f64, source: &str) {
        if let Some(t) = &self.transcript {
            let line = TranscriptLine {
                context: &q.context,
                t_i: q.first,
                t_j: q.second,
                order: q.order,
                p_i,
                p_j,
                source,
            };
            if let Ok(mut w) = t.lock() {
                let _ = serde_json::to_writer(&mut *w, &line);
                let _ = writeln!(w);
                let _ = w.flush();
            }
        }
    }

    /// POST with retry on transient failures: capped exponential backoff,
    /// never on authentication errors.
    fn post_json(&self, body: &serde_json::Value) -> Result<serde_json::Value> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let mut attempt = 0u32;
        loop {
            let result = self.semaphore.run(|| {
                self.client
                    .post(&url)
                    .bearer_auth(&self.api_key)
                    .json(body)
                    .send()
            });
            let err = match result {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<serde_json::Value>().map_err(|e| {
                            Error::MalformedResponse {
                                what: format!("JSON body ({e})"),
                            }
                        });
                    }
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(Error::Auth {
                            msg: format!("HTTP {status}"),
                        });
                    }
                    Error::Transport {
                        msg: format!("HTTP {status}"),
                        retryable: status.as_u16() == 429 || status.is_server_error(),
                    }
                }
                Err(e) => Error::Transport {
                    msg: e.to_string(),
                    retryable: true,
                },
            };
            if !err.is_retryable() || attempt >= MAX_RETRIES {
                return Err(err);
            }
            let delay = (BACKOFF_BASE_MS << attempt).min(BACKOFF_CAP_MS);
            std::thread::sleep(Duration::from_millis(delay));
            attempt += 1;
        }
    }

    /// Top log-probabilities of the first generated token for `prompt`.
    fn first_token_logprobs(&self, prompt: &str) -> Result<Vec<(String, f64)>> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": self.cfg.top_k,
        });
        let resp = self.post_json(&body)?;
        let top = resp
            .pointer("/choices/0/logprobs/content/0/top_logprobs")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::MalformedResponse {
                what: "per-token log-probabilities".into(),
            })?;
        let mut out = Vec::with_capacity(top.len());
        for entry in top {
            let token = entry.get("token").and_then(|v| v.as_str()).ok_or_else(|| {
                Error::MalformedResponse {
                    what: "top_logprobs[].token".into(),
                }
            })?;
            let logprob = entry
                .get("logprob")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::MalformedResponse {
                    what: "top_logprobs[].logprob".into(),
                })?;
            out.push((token.to_string(), logprob));
        }
        Ok(out)
    }

    /// One sampled completion's text.
    fn sample_completion(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": 16,
        });
        let resp = self.post_json(&body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::MalformedResponse {
                what: "message content".into(),
            })
    }

    fn shown(&self, query: &ProbeQuery) -> (TokenId, TokenId) {
        match query.order {
            ProbeOrder::Ij => (query.first, query.second),
            ProbeOrder::Ji => (query.second, query.first),
        }
    }
}

impl ProbeOracle for RemoteOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn mode(&self) -> OracleMode {
        self.cfg.mode
    }

    fn probe_exact(&self, query: &ProbeQuery) -> Result<RawPair> {
        self.queries
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let (shown_first, shown_second) = self.shown(query);
        let prompt = render_probe_prompt(
            &self.render_context(&query.context),
            &(self.render)(shown_first),
            &(self.render)(shown_second),
        );
        let top = self.first_token_logprobs(&prompt)?;
        let lookup: HashMap<&str, f64> = top.iter().map(|(t, lp)| (t.as_str(), *lp)).collect();
        let mut low_confidence = false;
        let mut prob_of = |token: TokenId| -> f64 {
            let text = (self.render)(token);
            match lookup.get(text.as_str()) {
                Some(lp) => lp.exp().max(MIN_PROB_FLOOR),
                None => {
                    low_confidence = true;
                    MIN_PROB_FLOOR
                }
            }
        };
        let p_first = prob_of(query.first);
        let p_second = prob_of(query.second);
        self.log_transcript(query, p_first, p_second, "remote-exact");
        Ok(RawPair {
            p_first,
            p_second,
            low_confidence,
        })
    }

    fn probe_sample(&self, query: &ProbeQuery, n_samples: usize) -> Result<(u64, u64)> {
        self.queries
            .fetch_add(n_samples as u64, std::sync::atomic::Ordering::Relaxed);
        let (shown_first, shown_second) = self.shown(query);
        let context = self.render_context(&query.context);
        let prompt = render_probe_prompt(
            &context,
            &(self.render)(shown_first),
            &(self.render)(shown_second),
        );
        let first_text = (self.render)(query.first);
        let second_text = (self.render)(query.second);
        let mut c_first = 0u64;
        let mut c_second = 0u64;
        for _ in 0..n_samples {
            let content = self.sample_completion(&prompt)?;
            // Completions echo the context phrase; the candidate is the next
            // whitespace-delimited piece. Non-matching samples are discarded.
            let rest = content
                .trim_start()
                .strip_prefix(context.as_str())
                .unwrap_or(&content)
                .trim_start();
            let head = rest.split_whitespace().next().unwrap_or("");
            if head == first_text {
                c_first += 1;
            } else if head == second_text {
                c_second += 1;
            }
        }
        self.log_transcript(query, c_first as f64, c_second as f64, "remote-sampled");
        Ok((c_first, c_second))
    }

    fn top_k(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution> {
        self.queries
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let prompt = self.render_context(context);
        let top = self.first_token_logprobs(&prompt)?;
        let mut entries = Vec::new();
        for (text, logprob) in top {
            // Only entries the renderer can invert become candidates; real
            // tokenizer adapters replace this.
            if let Ok(id) = text.trim().parse::<TokenId>() {
                if id < self.vocab.size() {
                    entries.push((id, logprob.exp()));
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::MalformedResponse {
                what: "top-k entries mapping to known token ids".into(),
            });
        }
        // Responses usually arrive probability-sorted, but the contract
        // doesn't promise it.
        entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        entries.truncate(k);
        TokenDistribution::truncated(entries)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(std::sync::atomic::Ordering::Relaxed)
    }
}
