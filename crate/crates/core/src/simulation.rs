//! Turn-based multi-persona discussion.
//!
//! A turn is one full round: any moderator interventions due at that turn
//! come first, then every persona speaks once in `speaking_order`, seeing all
//! earlier messages including those of the same turn.
//!
//! # Transcript file
//!
//! Line-delimited JSON. The first line is the header, every further line one
//! message, appended as soon as it is produced:
//!
//! ```text
//! {"record":"header","format":1,"session_id":..,"config":{..},"personas":[..]}
//! {"record":"message","index":0,"turn":1,"author":"Degen Trader","text":"..","passed":false}
//! ```
//!
//! `author` is a persona name or `moderator`; a pass has `passed: true` and
//! empty `text`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::completion::{ChatMessage, CompletionProvider, CompletionRequest, Task, PASS_TOKEN};
use crate::persona::{fill, Persona};
use crate::provider::ProviderError;

pub const MODERATOR: &str = "moderator";
pub const DEFAULT_TURNS: usize = 9;
pub const TRANSCRIPT_FORMAT: u32 = 1;
pub const DEFAULT_TOPIC: &str =
    "When should an autonomous agent act on its own initiative, and when should it wait for a human to ask?";

const AGENT_SYSTEM: &str = include_str!("../prompts/discussion_agent_v1.txt");
const TURN_USER: &str = include_str!("../prompts/discussion_turn_user_v1.txt");
const DEFAULT_INTERVENTIONS: &str = include_str!("../data/interventions_default.json");
const PASS_RULE: &str = "- If you have nothing to add this turn, reply with exactly PASS and nothing else.\n";

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("session is complete")]
    Complete,
    #[error("turn {0} has already started")]
    TurnExecuted(usize),
    #[error("turn {turn} is outside 1..={turns}")]
    TurnOutOfRange { turn: usize, turns: usize },
    #[error("intervention text is empty")]
    EmptyIntervention,
    #[error("{persona} failed at turn {} after {attempts} attempts: {source}", cursor.turn)]
    Provider {
        persona: String,
        attempts: u32,
        cursor: Cursor,
        source: ProviderError,
    },
    #[error("transcript I/O: {0}")]
    Io(#[from] io::Error),
    #[error("transcript line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("transcript invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub turn: usize,
    pub text: String,
}

/// The moderator probes shipped as the default schedule.
pub fn default_interventions() -> Vec<Intervention> {
    serde_json::from_str(DEFAULT_INTERVENTIONS).expect("bundled interventions parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub topic: String,
    pub turns: usize,
    /// Persona names; empty means the order of the persona list.
    pub speaking_order: Vec<String>,
    pub interventions: Vec<Intervention>,
    pub seed: u64,
    pub temperature: f64,
    pub allow_pass: bool,
    /// Extra attempts per persona message after a provider failure.
    pub max_retries: u32,
    /// Rendered-transcript budget in characters; oldest turns are dropped first.
    pub context_chars: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            topic: DEFAULT_TOPIC.to_string(),
            turns: DEFAULT_TURNS,
            speaking_order: Vec::new(),
            interventions: default_interventions(),
            seed: 0,
            temperature: 0.7,
            allow_pass: true,
            max_retries: 2,
            context_chars: 48_000,
        }
    }
}

impl SimulationConfig {
    fn validate(&self, personas: &[Persona]) -> Result<Vec<usize>, SimulationError> {
        let names: Vec<&str> = personas.iter().map(|p| p.name.as_str()).collect();
        let unique: BTreeSet<&str> = names.iter().copied().collect();
        if unique.len() != names.len() {
            return Err(SimulationError::InvalidConfig("persona names must be unique".into()));
        }
        if names.contains(&MODERATOR) {
            return Err(SimulationError::InvalidConfig(format!("{MODERATOR:?} is reserved")));
        }
        for iv in &self.interventions {
            if iv.turn == 0 || iv.turn > self.turns {
                return Err(SimulationError::InvalidConfig(format!(
                    "intervention turn {} outside 1..={}",
                    iv.turn, self.turns
                )));
            }
        }
        if self.speaking_order.is_empty() {
            return Ok((0..personas.len()).collect());
        }
        let order: Vec<usize> = self
            .speaking_order
            .iter()
            .map(|n| names.iter().position(|m| m == n))
            .collect::<Option<_>>()
            .ok_or_else(|| SimulationError::InvalidConfig("speaking_order names an unknown persona".into()))?;
        if order.len() != names.len() || order.iter().collect::<BTreeSet<_>>().len() != names.len() {
            return Err(SimulationError::InvalidConfig(
                "speaking_order must be a permutation of the persona set".into(),
            ));
        }
        Ok(order)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub index: usize,
    pub turn: usize,
    pub author: String,
    pub text: String,
    pub passed: bool,
}

impl Message {
    pub fn is_moderator(&self) -> bool {
        self.author == MODERATOR
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Header(TranscriptHeader),
    Message(Message),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub format: u32,
    pub session_id: String,
    pub config: SimulationConfig,
    pub personas: Vec<Persona>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub config: SimulationConfig,
    pub personas: Vec<Persona>,
    pub messages: Vec<Message>,
}

impl Transcript {
    pub fn agent_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| !m.is_moderator() && !m.passed)
    }

    pub fn moderator_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.is_moderator())
    }

    pub fn passes(&self) -> usize {
        self.messages.iter().filter(|m| m.passed).count()
    }

    pub fn header(&self) -> TranscriptHeader {
        TranscriptHeader {
            format: TRANSCRIPT_FORMAT,
            session_id: self.session_id.clone(),
            config: self.config.clone(),
            personas: self.personas.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = line(&TranscriptRecord::Header(self.header()));
        for m in &self.messages {
            out.push_str(&line(&TranscriptRecord::Message(m.clone())));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, SimulationError> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SimulationError> {
        Self::from_lines(BufReader::new(File::open(path)?).lines())
    }

    fn from_lines(lines: impl Iterator<Item = io::Result<String>>) -> Result<Self, SimulationError> {
        let mut header: Option<TranscriptHeader> = None;
        let mut messages = Vec::new();
        for (i, l) in lines.enumerate() {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let record: TranscriptRecord = serde_json::from_str(&l).map_err(|e| SimulationError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            match (record, &header) {
                (TranscriptRecord::Header(h), None) if i == 0 => header = Some(h),
                (TranscriptRecord::Message(m), Some(_)) => messages.push(m),
                _ => {
                    return Err(SimulationError::Malformed {
                        line: i + 1,
                        message: "header must be the first and only header record".into(),
                    })
                }
            }
        }
        let h = header.ok_or(SimulationError::Malformed {
            line: 1,
            message: "missing header".into(),
        })?;
        Ok(Self {
            session_id: h.session_id,
            config: h.config,
            personas: h.personas,
            messages,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SimulationError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Structural checks: gapless indexes, one message per persona per
    /// turn, moderator messages only at the head of a turn, passes empty.
    pub fn validate(&self) -> Result<(), SimulationError> {
        let names: BTreeSet<&str> = self.personas.iter().map(|p| p.name.as_str()).collect();
        let mut seen: BTreeSet<(usize, &str)> = BTreeSet::new();
        let mut last_turn = 0;
        let mut persona_spoke_in_turn = false;
        for (i, m) in self.messages.iter().enumerate() {
            let bad = |why: String| Err(SimulationError::Invalid(format!("message {}: {why}", m.index)));
            if m.index != i {
                return bad(format!("expected index {i}"));
            }
            if m.turn < last_turn || m.turn == 0 || m.turn > self.config.turns {
                return bad(format!("turn {} out of order or range", m.turn));
            }
            if m.turn != last_turn {
                last_turn = m.turn;
                persona_spoke_in_turn = false;
            }
            if m.passed && !m.text.is_empty() {
                return bad("pass with text".into());
            }
            if m.is_moderator() {
                if persona_spoke_in_turn || m.passed {
                    return bad("moderator message after persona messages".into());
                }
                continue;
            }
            if !names.contains(m.author.as_str()) {
                return bad(format!("unknown author {:?}", m.author));
            }
            if !seen.insert((m.turn, m.author.as_str())) {
                return bad(format!("{} spoke twice in turn {}", m.author, m.turn));
            }
            persona_spoke_in_turn = true;
        }
        Ok(())
    }
}

fn line<T: Serialize>(record: &T) -> String {
    let mut s = serde_json::to_string(record).expect("transcript records serialize");
    s.push('\n');
    s
}

/// Receives every message as soon as it is produced.
pub trait MessageSink: Send {
    fn on_message(&mut self, message: &Message) -> io::Result<()>;
}

/// Append-only transcript file. The header is written on creation.
#[derive(Debug)]
pub struct TranscriptWriter {
    file: File,
}

impl TranscriptWriter {
    pub fn create(path: impl AsRef<Path>, header: &TranscriptHeader) -> io::Result<Self> {
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        file.write_all(line(&TranscriptRecord::Header(header.clone())).as_bytes())?;
        file.flush()?;
        Ok(Self { file })
    }
}

impl MessageSink for TranscriptWriter {
    fn on_message(&mut self, message: &Message) -> io::Result<()> {
        self.file.write_all(line(&TranscriptRecord::Message(message.clone())).as_bytes())?;
        self.file.flush()
    }
}

/// Position of the next message to produce. `speaker` counts persona
/// messages already emitted in `turn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub turn: usize,
    pub speaker: usize,
    pub moderator_done: bool,
}

impl Cursor {
    fn started(&self) -> bool {
        self.moderator_done || self.speaker > 0
    }
}

pub struct Session {
    id: String,
    personas: Vec<Persona>,
    order: Vec<usize>,
    config: SimulationConfig,
    provider: Arc<dyn CompletionProvider>,
    messages: Vec<Message>,
    pending: BTreeMap<usize, Vec<String>>,
    cursor: Cursor,
    sinks: Vec<Box<dyn MessageSink>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("cursor", &self.cursor)
            .field("messages", &self.messages.len())
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn new(
        id: impl Into<String>,
        personas: Vec<Persona>,
        config: SimulationConfig,
        provider: Arc<dyn CompletionProvider>,
    ) -> Result<Self, SimulationError> {
        if personas.is_empty() {
            return Err(SimulationError::InvalidConfig("no personas".into()));
        }
        let order = config.validate(&personas)?;
        let mut pending: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for iv in &config.interventions {
            pending.entry(iv.turn).or_default().push(iv.text.clone());
        }
        Ok(Self {
            id: id.into(),
            personas,
            order,
            config,
            provider,
            messages: Vec::new(),
            pending,
            cursor: Cursor {
                turn: 1,
                speaker: 0,
                moderator_done: false,
            },
            sinks: Vec::new(),
        })
    }

    pub fn add_sink(&mut self, sink: Box<dyn MessageSink>) {
        self.sinks.push(sink);
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn personas(&self) -> &[Persona] {
        &self.personas
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn is_complete(&self) -> bool {
        self.cursor.turn > self.config.turns
    }

    /// Interventions queued for turns that have not started, by turn.
    pub fn pending(&self) -> Vec<Intervention> {
        let skip = if self.cursor.moderator_done { self.cursor.turn } else { 0 };
        self.pending
            .iter()
            .filter(|(&t, _)| t >= self.cursor.turn && t != skip)
            .flat_map(|(&turn, texts)| texts.iter().map(move |text| Intervention { turn, text: text.clone() }))
            .collect()
    }

    pub fn header(&self) -> TranscriptHeader {
        TranscriptHeader {
            format: TRANSCRIPT_FORMAT,
            session_id: self.id.clone(),
            config: self.config.clone(),
            personas: self.personas.clone(),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            session_id: self.id.clone(),
            config: self.config.clone(),
            personas: self.personas.clone(),
            messages: self.messages.clone(),
        }
    }

    /// Queues a moderator message at the head of `turn` (default: the next
    /// turn that has not started).
    pub fn post_intervention(&mut self, text: &str, turn: Option<usize>) -> Result<Intervention, SimulationError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(SimulationError::EmptyIntervention);
        }
        let next = if self.cursor.started() { self.cursor.turn + 1 } else { self.cursor.turn };
        let turn = turn.unwrap_or(next);
        if turn < next {
            return Err(SimulationError::TurnExecuted(turn));
        }
        if turn == 0 || turn > self.config.turns {
            return Err(SimulationError::TurnOutOfRange {
                turn,
                turns: self.config.turns,
            });
        }
        self.pending.entry(turn).or_default().push(text.to_string());
        Ok(Intervention {
            turn,
            text: text.to_string(),
        })
    }

    fn emit(&mut self, author: &str, text: String, passed: bool) -> Result<Message, SimulationError> {
        let message = Message {
            index: self.messages.len(),
            turn: self.cursor.turn,
            author: author.to_string(),
            text,
            passed,
        };
        self.messages.push(message.clone());
        for sink in &mut self.sinks {
            sink.on_message(&message)?;
        }
        Ok(message)
    }

    /// Runs the rest of the current turn: due interventions, then every
    /// persona that has not spoken yet. After a provider failure the next
    /// call resumes at the persona that failed.
    pub fn step_turn(&mut self) -> Result<Vec<Message>, SimulationError> {
        if self.is_complete() {
            return Err(SimulationError::Complete);
        }
        let mut produced = Vec::new();
        if !self.cursor.moderator_done {
            for text in self.pending.get(&self.cursor.turn).cloned().unwrap_or_default() {
                produced.push(self.emit(MODERATOR, text, false)?);
            }
            self.cursor.moderator_done = true;
        }
        while self.cursor.speaker < self.order.len() {
            let persona = &self.personas[self.order[self.cursor.speaker]];
            let request = self.request_for(persona);
            let name = persona.name.clone();
            let mut attempts = 0;
            let reply = loop {
                attempts += 1;
                match self.provider.complete(&request) {
                    Ok(r) => break r,
                    Err(e) if attempts <= self.config.max_retries => {
                        tracing::warn!(persona = %name, turn = self.cursor.turn, error = %e, "retrying turn");
                    }
                    Err(source) => {
                        return Err(SimulationError::Provider {
                            persona: name,
                            attempts,
                            cursor: self.cursor,
                            source,
                        })
                    }
                }
            };
            let reply = reply.trim();
            let passed = self.config.allow_pass && (reply == PASS_TOKEN || reply.is_empty());
            let text = if passed { String::new() } else { reply.to_string() };
            produced.push(self.emit(&name, text, passed)?);
            self.cursor.speaker += 1;
        }
        self.cursor = Cursor {
            turn: self.cursor.turn + 1,
            speaker: 0,
            moderator_done: false,
        };
        Ok(produced)
    }

    fn request_for(&self, persona: &Persona) -> CompletionRequest {
        let system = fill(
            AGENT_SYSTEM,
            &[
                ("profile", persona.profile_text.trim_end()),
                ("topic", &self.config.topic),
                ("pass_rule", if self.config.allow_pass { PASS_RULE } else { "" }),
            ],
        );
        let user = fill(
            TURN_USER,
            &[
                ("transcript", &self.render_history()),
                ("turn", &self.cursor.turn.to_string()),
                ("name", &persona.name),
            ],
        );
        CompletionRequest::new(
            Task::DiscussionTurn,
            vec![ChatMessage::system(system.trim_end()), ChatMessage::user(user.trim_end())],
            self.config.temperature,
        )
        .tag("persona", &persona.name)
        .tag("turn", self.cursor.turn)
        .tag("seed", self.config.seed)
        .tag("session", &self.id)
    }

    /// Prior messages as `[turn t] Author: text`, dropping whole turns from
    /// the oldest end while the rendering exceeds the context budget.
    fn render_history(&self) -> String {
        let render = |m: &Message| {
            let author = if m.is_moderator() { "Moderator" } else { m.author.as_str() };
            if m.passed {
                format!("[turn {}] {author}: (passed)\n", m.turn)
            } else {
                format!("[turn {}] {author}: {}\n", m.turn, m.text)
            }
        };
        let newest = self.messages.last().map_or(1, |m| m.turn);
        let mut first_turn = 1;
        loop {
            let body: String = self.messages.iter().filter(|m| m.turn >= first_turn).map(render).collect();
            if body.len() <= self.config.context_chars || first_turn >= newest {
                if first_turn > 1 {
                    tracing::warn!(session = %self.id, dropped_turns = first_turn - 1, "transcript truncated for context");
                    return format!("(turns 1-{} omitted)\n{body}", first_turn - 1);
                }
                return if body.is_empty() { "(no messages yet)".to_string() } else { body };
            }
            first_turn += 1;
        }
    }
}

/// Runs every turn of a fresh session, optionally persisting the transcript
/// incrementally to `path`.
pub fn run_simulation(
    personas: Vec<Persona>,
    config: SimulationConfig,
    provider: Arc<dyn CompletionProvider>,
    path: Option<&Path>,
) -> Result<Transcript, SimulationError> {
    let mut session = Session::new("run", personas, config, provider)?;
    if let Some(p) = path {
        let writer = TranscriptWriter::create(p, &session.header())?;
        session.add_sink(Box::new(writer));
    }
    while !session.is_complete() {
        session.step_turn()?;
    }
    Ok(session.transcript())
}
