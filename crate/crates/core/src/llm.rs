//! Chat-completion clients: an HTTP endpoint, a deterministic mock and a
//! scripted client for tests.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("LLM endpoint request failed: {0}")]
    Transport(String),
    #[error("LLM endpoint returned an unusable body: {0}")]
    BadResponse(String),
    #[error("scripted client ran out of responses")]
    Exhausted,
}

impl LlmError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

pub const LLM_API_KEY_ENV: &str = "SBS_LLM_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecodingParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams { temperature: 0.0, top_p: None, max_tokens: None }
    }
}

/// OpenAI-style `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    decoding: DecodingParams,
    timeout: Duration,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    #[serde(flatten)]
    decoding: &'a DecodingParams,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl HttpLlm {
    /// API key comes from `SBS_LLM_API_KEY` when set.
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, decoding: DecodingParams) -> Self {
        HttpLlm {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(LLM_API_KEY_ENV).ok(),
            decoding,
            timeout: Duration::from_secs(120),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            decoding: &self.decoding,
        };
        let mut resp = req.send_json(&body).map_err(|e| LlmError::Transport(e.to_string()))?;
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| LlmError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::BadResponse("no choices".into()))
    }
}

/// Deterministic stand-in that understands the bundled templates.
///
/// * summarization prompts answer `Summarization: LIKES: t1; t2` from the
///   `- title` lines of the item section;
/// * forward prompts pick the item whose title the profile lists under
///   `LIKES`, avoid one listed under `DISLIKES`, and otherwise pick Item A;
/// * backward prompts add Item B to the liked titles and Item A to the
///   disliked ones.
#[derive(Debug, Clone, Default)]
pub struct MockLlm;

fn section<'a>(prompt: &'a str, header: &str, next: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let rest = &prompt[start..];
    let end = rest.find(next).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn item_pair(prompt: &str) -> Option<(&str, &str)> {
    let line = prompt.lines().find(|l| l.starts_with("Item A: "))?;
    let (a, b) = line["Item A: ".len()..].split_once(" Item B: ")?;
    Some((a.trim(), b.trim()))
}

#[derive(Default)]
struct MockProfile {
    likes: Vec<String>,
    dislikes: Vec<String>,
}

impl MockProfile {
    fn parse(text: &str) -> Self {
        let mut p = MockProfile::default();
        for part in text.split(" | ") {
            let list = |s: &str| s.split("; ").map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect();
            if let Some(rest) = part.trim().strip_prefix("LIKES:") {
                p.likes = list(rest);
            } else if let Some(rest) = part.trim().strip_prefix("DISLIKES:") {
                p.dislikes = list(rest);
            }
        }
        p
    }

    fn render(&self) -> String {
        let mut parts = Vec::new();
        if !self.likes.is_empty() {
            parts.push(format!("LIKES: {}", self.likes.join("; ")));
        }
        if !self.dislikes.is_empty() {
            parts.push(format!("DISLIKES: {}", self.dislikes.join("; ")));
        }
        parts.join(" | ")
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        if let Some(items) = section(prompt, "Sequence Item Profile:", "Steps to Follow:") {
            let titles: Vec<&str> = items.lines().filter_map(|l| l.trim().strip_prefix("- ")).collect();
            return Ok(format!("Summarization: LIKES: {}", titles.join("; ")));
        }
        let profile = MockProfile::parse(section(prompt, "User Profile:", "Item Feature:").unwrap_or_default());
        let (a, b) = item_pair(prompt).ok_or_else(|| LlmError::BadResponse("mock: no item pair in prompt".into()))?;
        if prompt.contains("Choice and Explanation:") {
            let mut updated = profile;
            if !updated.likes.iter().any(|t| t == b) {
                updated.likes.push(b.to_string());
            }
            updated.dislikes.retain(|t| t != b);
            if !updated.dislikes.iter().any(|t| t == a) {
                updated.dislikes.push(a.to_string());
            }
            updated.likes.retain(|t| t != a);
            return Ok(format!("My updated profile: {}", updated.render()));
        }
        let liked = |t: &str| profile.likes.iter().any(|x| x == t);
        let disliked = |t: &str| profile.dislikes.iter().any(|x| x == t);
        let choose_b = liked(b) && !liked(a) || (!liked(a) && disliked(a));
        let (pick, other) = if choose_b { ("Item B", a) } else { ("Item A", b) };
        Ok(format!("Chosen Item: {pick}\nExplanation: it matches my profile better than {other}."))
    }
}

/// Replays canned responses in order and records every prompt it saw.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    responses: Mutex<VecDeque<Result<String, LlmError>>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedLlm {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedLlm {
            responses: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn push_error(&self, err: LlmError) {
        self.responses.lock().expect("poisoned").push_back(Err(err));
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("poisoned").clone()
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.prompts.lock().expect("poisoned").push(prompt.to_string());
        self.responses.lock().expect("poisoned").pop_front().unwrap_or(Err(LlmError::Exhausted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_summarizes_titles() {
        let prompt = "User Profile:\nCurrently Unknown\nSequence Item Profile:\n- A\n- B\nSteps to Follow:\n...";
        assert_eq!(MockLlm.complete(prompt).unwrap(), "Summarization: LIKES: A; B");
    }

    #[test]
    fn mock_forward_and_backward() {
        let fwd = "User Profile:\nCurrently Unknown\nItem Feature:\nItem A: Jazz Item B: Rock\nSteps";
        assert!(MockLlm.complete(fwd).unwrap().starts_with("Chosen Item: Item A"));
        let bwd = "User Profile:\nCurrently Unknown\nItem Feature:\nItem A: Jazz Item B: Rock\nChoice and Explanation:\nx";
        assert_eq!(MockLlm.complete(bwd).unwrap(), "My updated profile: LIKES: Rock | DISLIKES: Jazz");
        let fwd2 = "User Profile:\nLIKES: Rock | DISLIKES: Jazz\nItem Feature:\nItem A: Jazz Item B: Rock\nSteps";
        assert!(MockLlm.complete(fwd2).unwrap().starts_with("Chosen Item: Item B"));
    }

    #[test]
    fn scripted_replays_then_exhausts() {
        let s = ScriptedLlm::new(["one"]);
        assert_eq!(s.complete("p1").unwrap(), "one");
        assert_eq!(s.complete("p2"), Err(LlmError::Exhausted));
        assert_eq!(s.prompts(), vec!["p1", "p2"]);
    }
}
