use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::JudgeSource;

pub const JUDGE_SYSTEM_PROMPT: &str = "You grade answers to questions about images. \
Compare the response with the reference answer. Reply with a single word: \
yes if the response gives the reference answer, no otherwise.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeJob {
    pub question: String,
    pub gold: String,
    pub response: String,
}

/// Yes/no grading of a free-form response against the reference answer.
pub trait Judge: Sync {
    fn source(&self) -> JudgeSource;
    fn judge(&self, question: &str, gold: &str, response: &str) -> Result<bool>;
}

/// Lowercased words with punctuation treated as whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Yes iff every word of the reference appears in the response.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubJudge;

impl Judge for StubJudge {
    fn source(&self) -> JudgeSource {
        JudgeSource::Stub
    }

    fn judge(&self, _question: &str, gold: &str, response: &str) -> Result<bool> {
        let gold = normalize_tokens(gold);
        let resp: HashSet<String> = normalize_tokens(response).into_iter().collect();
        Ok(!gold.is_empty() && !resp.is_empty() && gold.iter().all(|t| resp.contains(t)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalJudgeConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl ExternalJudgeConfig {
    pub const ENV_URL: &'static str = "FUYU_JUDGE_URL";
    pub const ENV_KEY: &'static str = "FUYU_JUDGE_API_KEY";
    pub const ENV_MODEL: &'static str = "FUYU_JUDGE_MODEL";
    pub const ENV_TIMEOUT: &'static str = "FUYU_JUDGE_TIMEOUT_SECS";
    pub const ENV_RETRIES: &'static str = "FUYU_JUDGE_RETRIES";
    pub const ENV_BACKOFF: &'static str = "FUYU_JUDGE_BACKOFF_MS";

    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let endpoint = get(Self::ENV_URL)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::config(format!("{} is not set", Self::ENV_URL)))?;
        let num = |key: &str, default: u64| -> Result<u64> {
            match get(key) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| {
                    Error::config(format!("{key}={v:?} is not a non-negative integer"))
                }),
            }
        };
        Ok(Self {
            endpoint,
            api_key: get(Self::ENV_KEY).filter(|s| !s.is_empty()),
            model: get(Self::ENV_MODEL).unwrap_or_else(|| "gpt-4".into()),
            timeout: Duration::from_secs(num(Self::ENV_TIMEOUT, 30)?.max(1)),
            retries: num(Self::ENV_RETRIES, 3)? as u32,
            backoff: Duration::from_millis(num(Self::ENV_BACKOFF, 500)?),
        })
    }
}

/// Chat-completions client at temperature 0 with retry and exponential
/// backoff. Each attempt is bounded by the configured timeout.
pub struct ExternalJudge {
    cfg: ExternalJudgeConfig,
    agent: ureq::Agent,
}

impl ExternalJudge {
    pub fn new(cfg: ExternalJudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn request_body(&self, question: &str, gold: &str, response: &str) -> Value {
        json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": JUDGE_SYSTEM_PROMPT},
                {"role": "user", "content": format!(
                    "Question: {question}\nReference answer: {gold}\nResponse: {response}"
                )},
            ],
        })
    }

    fn attempt(&self, body: &str) -> Result<bool> {
        let mut req = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| Error::Judge(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Judge(e.to_string()))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| Error::Judge(format!("bad JSON: {e}")))?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Judge("response has no choices[0].message.content".into()))?;
        parse_verdict(content)
    }
}

/// First word of the reply must be yes or no.
pub fn parse_verdict(reply: &str) -> Result<bool> {
    match normalize_tokens(reply).first().map(String::as_str) {
        Some("yes") => Ok(true),
        Some("no") => Ok(false),
        _ => Err(Error::Judge(format!("unparseable verdict {reply:?}"))),
    }
}

impl Judge for ExternalJudge {
    fn source(&self) -> JudgeSource {
        JudgeSource::External
    }

    fn judge(&self, question: &str, gold: &str, response: &str) -> Result<bool> {
        let body = self.request_body(question, gold, response).to_string();
        let mut last = None;
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::debug!("judge attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        let e = last.expect("at least one attempt");
        Err(Error::Judge(format!(
            "gave up after {} attempts: {e}",
            self.cfg.retries + 1
        )))
    }
}

/// Runs every job with at most `workers` calls in flight; results keep the
/// order of `jobs`.
pub fn judge_concurrently(
    jobs: &[JudgeJob],
    judge: &dyn Judge,
    workers: usize,
) -> Vec<Result<bool>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<bool>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = judge.judge(&job.question, &job.gold, &job.response);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}
