//! Descriptor acquisition from an OpenAI-compatible chat completions endpoint.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{ClassDescriptors, ClassFailure, DescriptorBank, Provenance};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "HERMAN_LLM_API_KEY";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "What hierarchical visual features characterize {CLASS} in an image? Answer as a bullet list from coarse category to fine visual details.";

const FOLLOW_UP_TEMPLATE: &str = "List {N} more visual features of {CLASS} that are finer-grained than the ones above, as a bullet list. Do not repeat earlier items.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// Something that turns a conversation into the next assistant message.
pub trait ChatClient: Sync {
    fn complete(&self, model: &str, messages: &[ChatMessage]) -> Result<String>;
}

/// Blocking client for `POST <endpoint>/chat/completions`.
pub struct HttpChatClient {
    endpoint: String,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl HttpChatClient {
    /// Client with 3 retries, 1s/2s/4s backoff and a 60s per-request timeout.
    /// The bearer token is read from `HERMAN_LLM_API_KEY` when set.
    pub fn new(endpoint: &str) -> Self {
        Self::with_settings(
            endpoint,
            std::env::var(API_KEY_ENV).ok(),
            3,
            Duration::from_secs(1),
            Duration::from_secs(60),
        )
    }

    pub fn with_settings(
        endpoint: &str,
        api_key: Option<String>,
        retries: u32,
        backoff: Duration,
        timeout: Duration,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            retries,
            backoff,
            agent,
        }
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
        let url = format!("{}/chat/completions", self.endpoint);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err((false, format!("HTTP {status}: {text}")));
        }
        let doc: Value = serde_json::from_str(&text).map_err(|e| (false, e.to_string()))?;
        doc.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| (false, "response has no choices[0].message.content".into()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, model: &str, messages: &[ChatMessage]) -> Result<String> {
        let body = json!({ "model": model, "messages": messages });
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(content) => return Ok(content),
                Err((retryable, msg)) => {
                    log::warn!("chat completion attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(Error::Http(last))
    }
}

#[derive(Clone, Debug)]
pub struct FetchConfig {
    pub model: String,
    pub descriptors_per_class: usize,
    pub max_parallel: usize,
    /// Raw completions are cached here; a populated cache makes reruns network-free.
    pub cache_dir: Option<PathBuf>,
    /// Fail classes that are not cached instead of contacting the endpoint.
    pub offline: bool,
    pub prompt_template: String,
    pub max_follow_ups: usize,
}

impl FetchConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            descriptors_per_class: super::DEFAULT_DESCRIPTORS_PER_CLASS,
            max_parallel: 4,
            cache_dir: None,
            offline: false,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
            max_follow_ups: 3,
        }
    }
}

#[derive(Debug)]
pub struct FetchOutcome {
    pub bank: DescriptorBank,
    pub failures: Vec<ClassFailure>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CachedCompletions {
    class_name: String,
    model: String,
    completions: Vec<String>,
}

pub fn cache_path(cache_dir: &Path, model: &str, class_name: &str) -> PathBuf {
    let digest = Sha256::digest(class_name.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    cache_dir.join(model).join(format!("{hex}.json"))
}

fn strip_bullet(line: &str) -> Option<&str> {
    for marker in ["-", "–", "•", "*"] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest);
        }
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(rest);
        }
    }
    None
}

/// Extracts bullet items in order. Accepts `-`, `–`, `•`, `*` and numbered
/// (`1.`, `1)`) bullets; anything that is not a bullet line is ignored.
pub fn parse_bullets(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| strip_bullet(l.trim()))
        .map(|item| item.trim().to_string())
        .filter(|item| !item.is_empty())
        .collect()
}

fn merge_unique(into: &mut Vec<String>, items: Vec<String>) {
    for item in items {
        let key = item.to_lowercase();
        if !into.iter().any(|d| d.to_lowercase() == key) {
            into.push(item);
        }
    }
}

fn descriptors_from(completions: &[String], limit: usize) -> Vec<String> {
    let mut out = Vec::new();
    for c in completions {
        merge_unique(&mut out, parse_bullets(c));
    }
    out.truncate(limit);
    out
}

fn fetch_one(class: &str, client: &dyn ChatClient, cfg: &FetchConfig) -> Result<Vec<String>> {
    let cache_file = cfg
        .cache_dir
        .as_ref()
        .map(|d| cache_path(d, &cfg.model, class));
    if let Some(path) = cache_file.as_ref().filter(|p| p.exists()) {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cached: CachedCompletions = serde_json::from_str(&text)?;
        let out = descriptors_from(&cached.completions, cfg.descriptors_per_class);
        if out.is_empty() {
            return Err(Error::Http(format!("cached completion for `{class}` has no bullets")));
        }
        return Ok(out);
    }
    if cfg.offline {
        return Err(Error::Http(format!("no cached completion for `{class}` in offline mode")));
    }

    let prompt = cfg.prompt_template.replace("{CLASS}", class);
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut completions = vec![client.complete(&cfg.model, &messages)?];
    let mut found = parse_bullets(&completions[0]);
    let mut unique = Vec::new();
    merge_unique(&mut unique, std::mem::take(&mut found));
    let mut rounds = 0;
    while unique.len() < cfg.descriptors_per_class && rounds < cfg.max_follow_ups {
        let missing = cfg.descriptors_per_class - unique.len();
        messages.push(ChatMessage::assistant(completions.last().expect("one completion").clone()));
        messages.push(ChatMessage::user(
            FOLLOW_UP_TEMPLATE
                .replace("{N}", &missing.to_string())
                .replace("{CLASS}", class),
        ));
        let reply = client.complete(&cfg.model, &messages)?;
        merge_unique(&mut unique, parse_bullets(&reply));
        completions.push(reply);
        rounds += 1;
    }
    if unique.is_empty() {
        return Err(Error::Http(format!("completion for `{class}` has no bullet list")));
    }
    if let Some(path) = cache_file {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let record = CachedCompletions {
            class_name: class.to_string(),
            model: cfg.model.clone(),
            completions,
        };
        let text = serde_json::to_string_pretty(&record)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    unique.truncate(cfg.descriptors_per_class);
    Ok(unique)
}

/// Requests descriptors for every class, at most `max_parallel` at a time.
///
/// Classes whose requests fail are left out of the bank and listed in
/// `failures`. The bank is assembled after every request has settled.
pub fn fetch_descriptors(
    class_names: &[String],
    client: &dyn ChatClient,
    cfg: &FetchConfig,
) -> Result<FetchOutcome> {
    if cfg.descriptors_per_class == 0 {
        return Err(Error::domain("descriptors_per_class must be at least 1"));
    }
    let next = AtomicUsize::new(0);
    let workers = cfg.max_parallel.clamp(1, class_names.len().max(1));
    let mut results: Vec<(usize, Result<Vec<String>>)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(class) = class_names.get(i) else { break };
                        done.push((i, fetch_one(class, client, cfg)));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("fetch worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _)| *i);

    let mut bank = DescriptorBank::new(Provenance::LlmFetched);
    let mut failures = Vec::new();
    for (i, res) in results {
        let class = &class_names[i];
        match res {
            Ok(texts) => {
                bank.classes
                    .insert(class.clone(), ClassDescriptors::from_texts(texts));
            }
            Err(e) => failures.push(ClassFailure {
                class: class.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(FetchOutcome { bank, failures })
}
