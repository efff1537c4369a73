//! Chat providers: deterministic stub, canned text, replay cache, recording
//! wrapper and a live HTTP backend.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use super::evidence::EvidencePack;
use super::parse::{format_answers, schema_targets};
use crate::error::{Error, Result};
use crate::rng::content_hash;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, system: &str, user: &str, temperature: f64) -> Result<String>;
}

/// Answers from the evidence pack: `round(E[p] + delta)` clamped to the
/// field range, or the scale midpoint when the prompt carries no pack.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubProvider;

impl StubProvider {
    pub fn answer(pack: Option<&EvidencePack>, field: &str, min: u8, max: u8) -> u8 {
        let midpoint = ((min as f64 + max as f64) / 2.0).round() as u8;
        let Some(pack) = pack else { return midpoint };
        let Some(dist) = pack.distribution_for(field) else { return midpoint };
        let value = dist.expectation() + pack.delta_for(field).unwrap_or(0.0);
        value.round().clamp(min as f64, max as f64) as u8
    }
}

impl ChatProvider for StubProvider {
    fn id(&self) -> String {
        "stub".into()
    }

    fn complete(&self, _system: &str, user: &str, _temperature: f64) -> Result<String> {
        let pack = EvidencePack::parse(user)?;
        let targets = schema_targets(user);
        let answers: BTreeMap<String, u8> =
            targets.iter().map(|t| (t.field.clone(), StubProvider::answer(pack.as_ref(), &t.field, t.min, t.max))).collect();
        Ok(format_answers(&answers, &targets))
    }
}

/// Returns the same text for every request.
#[derive(Debug, Clone)]
pub struct CannedProvider {
    pub response: String,
}

impl ChatProvider for CannedProvider {
    fn id(&self) -> String {
        format!("canned:{}", &content_hash(self.response.as_bytes())[..12])
    }

    fn complete(&self, _system: &str, _user: &str, _temperature: f64) -> Result<String> {
        Ok(self.response.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key: String,
    pub provider: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub response: String,
}

/// Content address of a request.
pub fn request_key(system: &str, user: &str, temperature: f64) -> String {
    let canonical = serde_json::json!({ "system": system, "user": user, "temperature": temperature });
    content_hash(canonical.to_string().as_bytes())
}

/// Serves responses from a directory of `<key>.json` records.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    pub dir: PathBuf,
}

impl ReplayProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl ChatProvider for ReplayProvider {
    fn id(&self) -> String {
        format!("replay:{}", self.dir.display())
    }

    fn complete(&self, system: &str, user: &str, temperature: f64) -> Result<String> {
        let key = request_key(system, user, temperature);
        let path = self.dir.join(format!("{key}.json"));
        let text = std::fs::read_to_string(&path).map_err(|_| Error::Provider(format!("replay cache miss for request {key}")))?;
        let rec: ReplayRecord = serde_json::from_str(&text)?;
        Ok(rec.response)
    }
}

/// Wraps a provider and writes every exchange to a replay directory.
pub struct RecordingProvider<P> {
    pub inner: P,
    pub dir: PathBuf,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }
}

pub fn write_record(dir: &Path, rec: &ReplayRecord) -> Result<()> {
    let path = dir.join(format!("{}.json", rec.key));
    let tmp = dir.join(format!(".{}.tmp", rec.key));
    std::fs::write(&tmp, serde_json::to_string_pretty(rec)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, system: &str, user: &str, temperature: f64) -> Result<String> {
        let response = self.inner.complete(system, user, temperature)?;
        let rec = ReplayRecord {
            key: request_key(system, user, temperature),
            provider: self.inner.id(),
            system: system.into(),
            user: user.into(),
            temperature,
            response: response.clone(),
        };
        write_record(&self.dir, &rec)?;
        Ok(response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiStyle {
    Anthropic,
    OpenAi,
}

/// HTTP chat backend configured from `PMTKG_LLM_URL`, `PMTKG_LLM_MODEL`,
/// `PMTKG_LLM_API_KEY` and optionally `PMTKG_LLM_STYLE` (`anthropic` or
/// `openai`).
#[derive(Debug, Clone)]
pub struct LiveProvider {
    pub url: String,
    pub model: String,
    api_key: String,
    pub style: ApiStyle,
    pub max_tokens: u32,
    pub attempts: u32,
    client: reqwest::blocking::Client,
}

impl LiveProvider {
    pub fn new(url: String, model: String, api_key: String, style: ApiStyle) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Provider(format!("http client: {e}")))?;
        Ok(Self { url, model, api_key, style, max_tokens: 1024, attempts: 4, client })
    }

    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).map_err(|_| Error::Config(format!("environment variable {k} is not set")));
        let style = match std::env::var("PMTKG_LLM_STYLE").unwrap_or_else(|_| "anthropic".into()).as_str() {
            "anthropic" => ApiStyle::Anthropic,
            "openai" => ApiStyle::OpenAi,
            other => return Err(Error::Config(format!("unknown PMTKG_LLM_STYLE `{other}`"))),
        };
        Self::new(var("PMTKG_LLM_URL")?, var("PMTKG_LLM_MODEL")?, var("PMTKG_LLM_API_KEY")?, style)
    }

    fn body(&self, system: &str, user: &str, temperature: f64) -> serde_json::Value {
        match self.style {
            ApiStyle::Anthropic => serde_json::json!({
                "model": self.model,
                "max_tokens": self.max_tokens,
                "temperature": temperature,
                "system": system,
                "messages": [{ "role": "user", "content": user }],
            }),
            ApiStyle::OpenAi => serde_json::json!({
                "model": self.model,
                "max_tokens": self.max_tokens,
                "temperature": temperature,
                "messages": [{ "role": "system", "content": system }, { "role": "user", "content": user }],
            }),
        }
    }

    fn extract(&self, v: &serde_json::Value) -> Option<String> {
        match self.style {
            ApiStyle::Anthropic => Some(
                v["content"].as_array()?.iter().filter_map(|b| b["text"].as_str()).collect::<Vec<_>>().join(""),
            ),
            ApiStyle::OpenAi => v["choices"][0]["message"]["content"].as_str().map(str::to_string),
        }
    }
}

impl ChatProvider for LiveProvider {
    fn id(&self) -> String {
        format!("live:{}", self.model)
    }

    fn complete(&self, system: &str, user: &str, temperature: f64) -> Result<String> {
        let body = self.body(system, user, temperature);
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << attempt));
            }
            let mut req = self.client.post(&self.url).json(&body);
            req = match self.style {
                ApiStyle::Anthropic => req.header("x-api-key", &self.api_key).header("anthropic-version", "2023-06-01"),
                ApiStyle::OpenAi => req.bearer_auth(&self.api_key),
            };
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        let v: serde_json::Value = serde_json::from_str(&text)?;
                        return self.extract(&v).ok_or_else(|| Error::Provider(format!("unexpected response shape: {text}")));
                    }
                    last = format!("HTTP {status}: {text}");
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        break;
                    }
                    warn!("provider returned {status}; retrying");
                }
                Err(e) => {
                    last = format!("request failed: {e}");
                    warn!("{last}; retrying");
                }
            }
        }
        Err(Error::Provider(last))
    }
}
