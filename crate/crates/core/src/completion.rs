//! Chat-completion providers.
//!
//! The wire format is `{model, messages: [{role, content}], temperature}` →
//! `{choices: [{message: {content}}]}`. Requests also carry a [`Task`] and
//! free-form tags that never go over the wire; the deterministic
//! [`StubCompletion`] uses them to decide what kind of reply to produce.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::provider::{fnv1a64, HttpSettings, JsonClient, ProviderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PersonaCore,
    PersonaDemographics,
    DiscussionTurn,
    #[default]
    Other,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub task: Task,
    pub tags: BTreeMap<String, String>,
}

impl CompletionRequest {
    pub fn new(task: Task, messages: Vec<ChatMessage>, temperature: f64) -> Self {
        Self {
            messages,
            temperature,
            task,
            tags: BTreeMap::new(),
        }
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    fn content_of(&self, role: Role) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == role)
            .map_or("", |m| m.content.as_str())
    }
}

pub trait CompletionProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

#[derive(Debug)]
pub struct RemoteCompletion {
    client: JsonClient,
    id: String,
}

impl RemoteCompletion {
    pub fn new(settings: HttpSettings) -> Self {
        let id = format!("remote:{}", settings.model);
        Self {
            client: JsonClient::new(settings),
            id,
        }
    }
}

impl CompletionProvider for RemoteCompletion {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let reply = self.client.post(&json!({
            "model": self.client.settings().model,
            "messages": request.messages,
            "temperature": request.temperature,
        }))?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidResponse("missing choices[0].message.content".into()))
    }
}

/// Replays queued replies in order and records every request it receives.
#[derive(Debug, Default)]
pub struct ScriptedCompletion {
    replies: Mutex<VecDeque<Result<String, ProviderError>>>,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedCompletion {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(|r| Ok(r.into())).collect()),
            requests: Mutex::default(),
        }
    }

    pub fn push(&self, reply: Result<String, ProviderError>) {
        self.replies.lock().push_back(reply);
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().clone()
    }
}

impl CompletionProvider for ScriptedCompletion {
    fn provider_id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self.requests.lock().push(request.clone());
        self.replies
            .lock()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::Other("script exhausted".into())))
    }
}

type ReplyFn = dyn Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync;

/// Provider backed by a closure.
pub struct FnCompletion {
    reply: Box<ReplyFn>,
}

impl FnCompletion {
    pub fn new(reply: impl Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync + 'static) -> Self {
        Self { reply: Box::new(reply) }
    }
}

impl CompletionProvider for FnCompletion {
    fn provider_id(&self) -> &str {
        "fn"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        (self.reply)(request)
    }
}

/// Reserved reply meaning "no contribution this turn".
pub const PASS_TOKEN: &str = "PASS";

const STUB_ATTRIBUTE_WORDS: usize = 24;
const STUB_LAYOUT: [(&str, usize); 4] = [("behaviors", 3), ("goals", 2), ("frustrations", 2), ("posting_style", 2)];

/// Deterministic offline provider. Personas are assembled from sentences of
/// the retrieved context, demographics from a hash of the persona name, and
/// discussion turns from the persona's own attribute sentences.
#[derive(Debug, Default)]
pub struct StubCompletion {
    seed: u64,
    passes: BTreeSet<(String, usize)>,
    failures: Mutex<HashMap<(String, usize), u32>>,
}

impl StubCompletion {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// The persona replies [`PASS_TOKEN`] at `turn`.
    pub fn with_pass(mut self, persona: impl Into<String>, turn: usize) -> Self {
        self.passes.insert((persona.into(), turn));
        self
    }

    /// The next `times` requests for `persona` at `turn` fail with a transport error.
    pub fn with_failure(self, persona: impl Into<String>, turn: usize, times: u32) -> Self {
        self.failures.lock().insert((persona.into(), turn), times);
        self
    }

    fn hash(&self, parts: &[&str]) -> u64 {
        let seed = self.seed.to_le_bytes();
        let mut bytes: Vec<&[u8]> = vec![&seed];
        bytes.extend(parts.iter().map(|p| p.as_bytes()));
        fnv1a64(&bytes)
    }

    fn persona_core(&self, request: &CompletionRequest) -> String {
        let user = request.content_of(Role::User);
        let passages: Vec<&str> = user
            .lines()
            .filter_map(|l| l.strip_prefix('[').and_then(|r| r.split_once("] ")).map(|(_, t)| t))
            .collect();

        let mut sentences: Vec<String> = Vec::new();
        for passage in &passages {
            for s in split_sentences(passage) {
                let words: Vec<&str> = s.split_whitespace().take(STUB_ATTRIBUTE_WORDS).collect();
                if words.len() >= 5 {
                    let sentence = words.join(" ");
                    if !sentences.contains(&sentence) {
                        sentences.push(sentence);
                    }
                }
            }
        }
        let round: usize = request.tags.get("revision_round").and_then(|r| r.parse().ok()).unwrap_or(0);
        if !sentences.is_empty() {
            let shift = (round * 3) % sentences.len();
            sentences.rotate_left(shift);
        }

        let mut fields = serde_json::Map::new();
        fields.insert("name".into(), Value::String(essence_name(&passages)));
        let mut pool = sentences.into_iter();
        for (key, count) in STUB_LAYOUT {
            let items: Vec<Value> = pool.by_ref().take(count).map(Value::String).collect();
            fields.insert(key.into(), Value::Array(items));
        }
        Value::Object(fields).to_string()
    }

    fn demographics(&self, request: &CompletionRequest) -> String {
        const GENDERS: [&str; 3] = ["female", "male", "non-binary"];
        const PLACES: [&str; 6] = [
            "Berlin, Germany",
            "Toronto, Canada",
            "Helsinki, Finland",
            "Paris, France",
            "Online-first, nomadic",
            "Seoul, South Korea",
        ];
        let name = request.tags.get("persona").map_or("", String::as_str);
        let h = self.hash(&["demographics", name]);
        let role = name.split_whitespace().next().unwrap_or("community").to_lowercase();
        json!({
            "age": 24 + h % 30,
            "gender": GENDERS[(h >> 8) as usize % GENDERS.len()],
            "location": PLACES[(h >> 16) as usize % PLACES.len()],
            "occupation": format!("{role} specialist"),
        })
        .to_string()
    }

    fn discussion_turn(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let persona = request.tags.get("persona").cloned().unwrap_or_default();
        let turn: usize = request.tags.get("turn").and_then(|t| t.parse().ok()).unwrap_or(0);
        let key = (persona.clone(), turn);
        if let Some(left) = self.failures.lock().get_mut(&key) {
            if *left > 0 {
                *left -= 1;
                return Err(ProviderError::Transport {
                    message: format!("injected failure for {persona} at turn {turn}"),
                    attempts: 1,
                });
            }
        }
        if self.passes.contains(&key) {
            return Ok(PASS_TOKEN.to_string());
        }
        let system = request.content_of(Role::System);
        let profile = system.split("Discussion topic:").next().unwrap_or("");
        let attributes: Vec<&str> = profile.lines().filter_map(|l| l.strip_prefix("- ")).collect();
        if attributes.is_empty() {
            return Ok(format!("{persona} has nothing to add yet."));
        }
        let run_seed = request.tags.get("seed").map_or("", String::as_str);
        let h = self.hash(&["turn", run_seed, &persona, &turn.to_string()]) as usize;
        let n = attributes.len();
        let first = h % n;
        let second = (first + 1 + (h / n) % (n.max(2) - 1)) % n;
        Ok(if first == second {
            attributes[first].to_string()
        } else {
            format!("{} {}", attributes[first], attributes[second])
        })
    }
}

impl CompletionProvider for StubCompletion {
    fn provider_id(&self) -> &str {
        "stub"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        match request.task {
            Task::PersonaCore => Ok(self.persona_core(request)),
            Task::PersonaDemographics => Ok(self.demographics(request)),
            Task::DiscussionTurn => self.discussion_turn(request),
            Task::Other => Ok(String::new()),
        }
    }
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for token in text.split_whitespace() {
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(token);
        if token.ends_with(['.', '!', '?']) {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Title-cased pair of the most frequent longer words, e.g. "Market Volatility".
fn essence_name(passages: &[&str]) -> String {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in passages {
        for w in p.split_whitespace() {
            let w: String = w.chars().filter(|c| c.is_alphabetic()).collect::<String>().to_lowercase();
            if w.chars().count() >= 5 {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words: Vec<String> = ranked
        .into_iter()
        .take(2)
        .map(|(w, _)| {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        })
        .collect();
    if words.is_empty() {
        "Quiet Observer".to_string()
    } else {
        words.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionKind {
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub kind: CompletionKind,
    pub temperature: f64,
    pub seed: u64,
    pub remote: HttpSettings,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            kind: CompletionKind::Stub,
            temperature: 0.7,
            seed: 0,
            remote: HttpSettings::default(),
        }
    }
}

impl CompletionConfig {
    pub fn build(&self) -> Box<dyn CompletionProvider> {
        match self.kind {
            CompletionKind::Stub => Box::new(StubCompletion::new(self.seed)),
            CompletionKind::Remote => Box::new(RemoteCompletion::new(self.remote.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format_skips_routing_fields() {
        let req = CompletionRequest::new(Task::PersonaCore, vec![ChatMessage::system("s"), ChatMessage::user("u")], 0.2)
            .tag("cluster_id", 3);
        let body = json!({"model": "m", "messages": req.messages, "temperature": req.temperature});
        assert_eq!(
            body.to_string(),
            r#"{"messages":[{"content":"s","role":"system"},{"content":"u","role":"user"}],"model":"m","temperature":0.2}"#
        );
    }

    #[test]
    fn scripted_replays_in_order() {
        let p = ScriptedCompletion::new(["a", "b"]);
        let r = CompletionRequest::default();
        assert_eq!(p.complete(&r).unwrap(), "a");
        assert_eq!(p.complete(&r).unwrap(), "b");
        assert!(p.complete(&r).is_err());
        assert_eq!(p.requests().len(), 3);
    }

    #[test]
    fn stub_pass_and_failure_injection() {
        let stub = StubCompletion::new(1).with_pass("A", 2).with_failure("B", 1, 1);
        let req = |persona: &str, turn: usize| {
            CompletionRequest::new(
                Task::DiscussionTurn,
                vec![ChatMessage::system("Name: A\n- one thing here\n- another thing\nDiscussion topic: x"), ChatMessage::user("")],
                0.7,
            )
            .tag("persona", persona)
            .tag("turn", turn)
        };
        assert_eq!(stub.complete(&req("A", 2)).unwrap(), PASS_TOKEN);
        assert!(stub.complete(&req("B", 1)).is_err());
        let ok = stub.complete(&req("B", 1)).unwrap();
        assert!(ok.contains("thing"));
        assert_eq!(ok, stub.complete(&req("B", 1)).unwrap());
    }

    #[test]
    fn stub_persona_from_context() {
        let context = (0..6)
            .map(|i| format!("[{i}] Agents chase market momentum with bots number{i}. Volatility spikes punish slow market traders{i}."))
            .collect::<Vec<_>>()
            .join("\n");
        let req = CompletionRequest::new(
            Task::PersonaCore,
            vec![ChatMessage::system("x"), ChatMessage::user(format!("Retrieved posts:\n{context}\n"))],
            0.7,
        );
        let out: Value = serde_json::from_str(&StubCompletion::new(0).complete(&req).unwrap()).unwrap();
        assert_eq!(out["name"], "Market Agents");
        assert_eq!(out["behaviors"].as_array().unwrap().len(), 3);
        assert_eq!(out["posting_style"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn sentence_split() {
        assert_eq!(split_sentences("a b. c d! e"), vec!["a b.", "c d!", "e"]);
    }
}
