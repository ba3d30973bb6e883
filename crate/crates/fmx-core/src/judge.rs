//! LLM-as-a-judge pipeline: prompt construction from top-activating tokens,
//! verdict parsing with score clipping, semantic/surface labeling, and a
//! chat-completion client (any OpenAI-compatible endpoint) with retries, rate
//! limiting, and an offline stub for tests.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Semantic threshold: a latent is `Semantic` when `semantic_score > 0.7`
/// and `surface_score < 0.3`, `Surface` with the conditions reversed.
pub const SEMANTIC_HI: f64 = 0.7;
pub const SURFACE_LO: f64 = 0.3;

/// Maximum characters kept on each side of an activating token.
pub const CONTEXT_SIDE_CHARS: usize = 80;

/// One token's evidence: the token text and up to two context windows with
/// the activating occurrence wrapped in `<<` `>>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEvidence {
    pub token: String,
    pub contexts: Vec<String>,
}

impl TokenEvidence {
    pub fn new(token: impl Into<String>, contexts: Vec<String>) -> Result<Self> {
        if contexts.len() > 2 {
            return Err(Error::Config("at most two context windows per token".into()));
        }
        Ok(Self { token: token.into(), contexts })
    }
}

/// Evidence for one latent: feature id plus tokens ordered by maximum
/// activation (strongest first).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEvidence {
    pub feature_id: usize,
    pub tokens: Vec<TokenEvidence>,
}

impl LatentEvidence {
    pub fn new(feature_id: usize, tokens: Vec<TokenEvidence>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("latent evidence needs at least one token".into()));
        }
        Ok(Self { feature_id, tokens })
    }
}

/// Build a context window string: up to [`CONTEXT_SIDE_CHARS`] characters on
/// each side, activating token wrapped in `<<` `>>`.
pub fn context_window(before: &str, token: &str, after: &str) -> String {
    let keep_tail: String = {
        let chars: Vec<char> = before.chars().collect();
        let start = chars.len().saturating_sub(CONTEXT_SIDE_CHARS);
        chars[start..].iter().collect()
    };
    let keep_head: String = after.chars().take(CONTEXT_SIDE_CHARS).collect();
    format!("{keep_tail}<<{token}>>{keep_head}")
}

const PROMPT_HEAD: &str = "You are evaluating a latent feature from a sparse autoencoder trained on a language model. You are given the tokens that most strongly activate this feature.

Score the feature on two independent dimensions:

**semantic_score** (0 to 1, continuous): How strongly do these tokens collectively represent a coherent, high-level concept that is interpretable by humans?
- 1.0 = tokens clearly belong to a unified semantic category (e.g. US states and cities, negative-emotion words, cooking verbs, animal species, financial terms)
- 0.5 = tokens share some thematic connection but it's loose or partial
- 0.0 = no discernible high-level concept; tokens seem unrelated or random

**surface_score** (0 to 1, continuous): How strongly do these tokens collectively describe low-level linguistic or surface patterns rather than meaning?
- 1.0 = tokens are unified by syntax, morphology, punctuation, character class, or formatting (e.g. closing braces, digits, -ing suffixes, markup tags, subword fragments)
- 0.5 = tokens partially share surface-level properties but also carry some semantic content
- 0.0 = tokens are not unified by any surface-level pattern

These two scores are INDEPENDENT and can vary continuously from 0 to 1. A feature can be high on both (rare), low on both (noise/random), or high on one and low on the other (typical).

Think carefully about whether the unifying pattern is semantic (about meaning) or surface-level (about form/syntax/characters).

**Feature ID**: ";

const PROMPT_TAIL: &str = "Return ONLY valid JSON with keys \"semantic_score\" and \"surface_score\", both floats between 0 and 1.

Example: {\"semantic_score\": 0.85, \"surface_score\": 0.1}";

/// Instantiate the judge user-message for one latent. Token text is inserted
/// verbatim by concatenation; nothing in the evidence is ever treated as a
/// template placeholder.
pub fn build_prompt(ev: &LatentEvidence) -> String {
    let mut out = String::with_capacity(PROMPT_HEAD.len() + PROMPT_TAIL.len() + 512);
    out.push_str(PROMPT_HEAD);
    out.push_str(&ev.feature_id.to_string());
    out.push_str("\n**Top-activating tokens** (ordered by activation strength): ");
    for (n, tok) in ev.tokens.iter().enumerate() {
        if n > 0 {
            out.push_str(", ");
        }
        out.push_str(&tok.token);
    }
    out.push_str("\n\n**Example contexts** (activating token wrapped in <<>>):\n");
    for tok in &ev.tokens {
        if tok.contexts.is_empty() {
            continue;
        }
        out.push_str("- token \"");
        out.push_str(&tok.token);
        out.push_str("\":\n");
        for ctx in &tok.contexts {
            out.push_str(" - ");
            out.push_str(ctx);
            out.push('\n');
        }
    }
    out.push('\n');
    out.push_str(PROMPT_TAIL);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeLabel {
    Semantic,
    Surface,
    Unlabeled,
}

impl JudgeLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            JudgeLabel::Semantic => "semantic",
            JudgeLabel::Surface => "surface",
            JudgeLabel::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeVerdict {
    pub semantic_score: f64,
    pub surface_score: f64,
    pub label: JudgeLabel,
    pub raw: String,
}

/// Pure labeling rule on clipped scores.
pub fn label_scores(semantic: f64, surface: f64) -> JudgeLabel {
    if semantic > SEMANTIC_HI && surface < SURFACE_LO {
        JudgeLabel::Semantic
    } else if surface > SEMANTIC_HI && semantic < SURFACE_LO {
        JudgeLabel::Surface
    } else {
        JudgeLabel::Unlabeled
    }
}

/// Extract the two scores from the first well-formed JSON object in the
/// response, clip each to `[0, 1]`, and label.
pub fn parse_verdict(response: &str) -> Result<JudgeVerdict> {
    let object = first_json_object(response).ok_or_else(|| Error::JudgeParse {
        msg: "no parseable JSON object in response".into(),
        raw: response.to_string(),
    })?;
    let field = |key: &str| -> Result<f64> {
        object
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::JudgeParse {
                msg: format!("missing or non-numeric key {key:?}"),
                raw: response.to_string(),
            })
    };
    let semantic_score = field("semantic_score")?.clamp(0.0, 1.0);
    let surface_score = field("surface_score")?.clamp(0.0, 1.0);
    Ok(JudgeVerdict {
        semantic_score,
        surface_score,
        label: label_scores(semantic_score, surface_score),
        raw: response.to_string(),
    })
}

// First syntactically valid JSON object anywhere in the text.
fn first_json_object(text: &str) -> Option<Value> {
    for (pos, ch) in text.char_indices() {
        if ch != '{' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        if let Some(Ok(v @ Value::Object(_))) = stream.next() {
            return Some(v);
        }
    }
    None
}

/// A chat-completion backend: system + user message in, assistant text out.
pub trait ChatBackend {
    fn complete(&mut self, system: &str, user: &str) -> Result<String>;
}

/// Endpoint configuration for the HTTP backend.
#[derive(Debug, Clone)]
pub struct JudgeConfig {
    /// Full chat-completions URL, e.g. `https://openrouter.ai/api/v1/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub system_message: String,
    /// Retries on transient failures (timeouts, connect errors, 429/5xx).
    pub max_retries: usize,
    pub backoff_base_ms: u64,
    pub requests_per_second: f64,
    pub timeout_secs: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: String::new(),
            auth_env: "FMX_JUDGE_API_KEY".into(),
            system_message: DEFAULT_SYSTEM_MESSAGE.into(),
            max_retries: 3,
            backoff_base_ms: 500,
            requests_per_second: 2.0,
            timeout_secs: 60,
        }
    }
}

/// Shipped system message (configurable; not a fixed part of the protocol).
pub const DEFAULT_SYSTEM_MESSAGE: &str = "You are an expert interpretability researcher evaluating latent features of sparse autoencoders. Score each feature exactly as instructed and respond with JSON only.";

struct TokenBucket {
    tokens: f64,
    rate: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64) -> Self {
        Self { tokens: 1.0, rate, last: Instant::now() }
    }

    fn take(&mut self) {
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return;
        }
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate).min(1.0_f64.max(self.rate));
        self.last = now;
        if self.tokens < 1.0 {
            let wait = (1.0 - self.tokens) / self.rate;
            std::thread::sleep(Duration::from_secs_f64(wait));
            self.tokens = 1.0;
        }
        self.tokens -= 1.0;
    }
}

/// Blocking HTTP client against an OpenAI-compatible chat endpoint.
pub struct HttpBackend {
    agent: ureq::Agent,
    cfg: JudgeConfig,
    token: String,
    bucket: TokenBucket,
}

impl HttpBackend {
    /// Fails with a config error before any request when the auth variable
    /// is missing or empty.
    pub fn new(cfg: JudgeConfig) -> Result<Self> {
        if cfg.base_url.is_empty() {
            return Err(Error::Config("judge base_url is not set".into()));
        }
        if cfg.model.is_empty() {
            return Err(Error::Config("judge model name is not set".into()));
        }
        let token = std::env::var(&cfg.auth_env)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| {
                Error::Config(format!("auth token environment variable {} is not set", cfg.auth_env))
            })?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let bucket = TokenBucket::new(cfg.requests_per_second);
        Ok(Self { agent, cfg, token, bucket })
    }

    fn try_once(&mut self, system: &str, user: &str) -> std::result::Result<String, (bool, String)> {
        // (transient?, message)
        self.bucket.take();
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let response = self
            .agent
            .post(&self.cfg.base_url)
            .header("Authorization", format!("Bearer {}", self.token))
            .send_json(&body)
            .map_err(|e| (true, format!("transport: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .into_body()
            .read_to_string()
            .map_err(|e| (true, format!("read body: {e}")))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("http status {status}: {}", excerpt(&text))));
        }
        if status >= 400 {
            return Err((false, format!("http status {status}: {}", excerpt(&text))));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| (false, format!("malformed completion body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| (false, format!("no message content in completion: {}", excerpt(&text))))
    }
}

fn excerpt(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.chars().count() <= LIMIT {
        text.to_string()
    } else {
        let cut: String = text.chars().take(LIMIT).collect();
        format!("{cut}...")
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, system: &str, user: &str) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            match self.try_once(system, user) {
                Ok(text) => return Ok(text),
                Err((transient, msg)) => {
                    last = msg;
                    if !transient || attempt == self.cfg.max_retries {
                        break;
                    }
                    let backoff = self.cfg.backoff_base_ms.saturating_mul(1 << attempt);
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
        Err(Error::Http(last))
    }
}

/// Scripted offline backend: each call pops the next reply.
pub struct StubBackend {
    replies: VecDeque<Result<String>>,
    pub calls: Vec<(String, String)>,
}

impl StubBackend {
    pub fn new(replies: Vec<Result<String>>) -> Self {
        Self { replies: replies.into(), calls: Vec::new() }
    }

    /// A stub that always echoes the same reply.
    pub fn repeating(reply: &str, times: usize) -> Self {
        Self::new((0..times).map(|_| Ok(reply.to_string())).collect())
    }
}

impl ChatBackend for StubBackend {
    fn complete(&mut self, system: &str, user: &str) -> Result<String> {
        self.calls.push((system.to_string(), user.to_string()));
        self.replies
            .pop_front()
            .unwrap_or_else(|| Err(Error::Http("stub exhausted".into())))
    }
}

/// Per-latent outcome of a judging run.
#[derive(Debug)]
pub struct JudgeOutcome {
    pub feature_id: usize,
    pub verdict: Option<JudgeVerdict>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JudgeCounts {
    pub semantic: usize,
    pub surface: usize,
    pub unlabeled: usize,
    pub errored: usize,
}

/// Judge every latent's evidence: one completion per latent, per-latent
/// failures recorded without aborting the run. Evidence is never mutated.
pub fn judge_latents(
    evidence: &[LatentEvidence],
    backend: &mut dyn ChatBackend,
    system_message: &str,
) -> (Vec<JudgeOutcome>, JudgeCounts) {
    let mut outcomes = Vec::with_capacity(evidence.len());
    let mut counts = JudgeCounts::default();
    for ev in evidence {
        let prompt = build_prompt(ev);
        let outcome = match backend.complete(system_message, &prompt) {
            Ok(text) => match parse_verdict(&text) {
                Ok(verdict) => {
                    match verdict.label {
                        JudgeLabel::Semantic => counts.semantic += 1,
                        JudgeLabel::Surface => counts.surface += 1,
                        JudgeLabel::Unlabeled => counts.unlabeled += 1,
                    }
                    JudgeOutcome { feature_id: ev.feature_id, verdict: Some(verdict), error: None }
                }
                Err(e) => {
                    counts.errored += 1;
                    JudgeOutcome { feature_id: ev.feature_id, verdict: None, error: Some(e.to_string()) }
                }
            },
            Err(e) => {
                counts.errored += 1;
                JudgeOutcome { feature_id: ev.feature_id, verdict: None, error: Some(e.to_string()) }
            }
        };
        outcomes.push(outcome);
    }
    (outcomes, counts)
}
