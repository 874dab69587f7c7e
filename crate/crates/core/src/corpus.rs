//! Post archive ingestion, stop-word cleaning and overlap chunking.
//!
//! Archives are either newline-delimited JSON objects or a single JSON array
//! of objects. Each object carries `submolt`, `username`, `title`, `content`,
//! `upvotes`, `downvotes`, `comment_count` and an optional `id`. Entries that
//! cannot be read are reported, never fatal.
//!
//! Tokens are maximal whitespace-delimited substrings throughout this module.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Stop-word list shipped with the crate, one lower-case word per line.
pub const ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

pub const DEFAULT_MIN_WORDS: usize = 10;
pub const DEFAULT_CHUNK_SIZE: usize = 512;
pub const DEFAULT_CHUNK_OVERLAP: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read archive {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("archive is not a JSON array: {0}")]
    MalformedArray(String),
    #[error("overlap ({overlap}) must be smaller than chunk_size ({chunk_size}), and chunk_size must be positive")]
    InvalidChunkConfig { chunk_size: usize, overlap: usize },
    #[error("min_words must be at least 1")]
    InvalidMinWords,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostRecord {
    pub post_id: String,
    pub submolt: String,
    pub author: String,
    pub title: String,
    pub content: String,
    pub upvotes: u64,
    pub downvotes: u64,
    pub comment_count: u64,
}

/// Why an archive entry was not turned into a [`PostRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line for newline-delimited archives, 0-based element index for arrays.
    pub location: usize,
    pub post_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: Vec<PostRecord>,
    pub rejections: Vec<Rejection>,
    /// The original JSON object of every accepted record, in record order.
    pub metadata: Vec<Value>,
}

pub fn ingest(path: impl AsRef<Path>) -> Result<IngestReport, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_str(&raw)
}

/// Parses archive text. Only a top-level array that is not valid JSON fails
/// globally; line-delimited input never does.
pub fn ingest_str(raw: &str) -> Result<IngestReport, CorpusError> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();

    if raw.trim_start().starts_with('[') {
        let items: Vec<Value> =
            serde_json::from_str(raw).map_err(|e| CorpusError::MalformedArray(e.to_string()))?;
        for (position, item) in items.into_iter().enumerate() {
            accept_entry(&mut report, &mut seen, item, position, position);
        }
    } else {
        let mut position = 0;
        for (line_no, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Value>(line) {
                Ok(item) => accept_entry(&mut report, &mut seen, item, position, line_no + 1),
                Err(e) => report.rejections.push(Rejection {
                    location: line_no + 1,
                    post_id: None,
                    reason: format!("invalid JSON: {e}"),
                }),
            }
            position += 1;
        }
    }
    Ok(report)
}

fn accept_entry(
    report: &mut IngestReport,
    seen: &mut HashSet<String>,
    item: Value,
    position: usize,
    location: usize,
) {
    let Value::Object(obj) = item else {
        report.rejections.push(Rejection {
            location,
            post_id: None,
            reason: "entry is not a JSON object".into(),
        });
        return;
    };

    let post_id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => position.to_string(),
    };
    let reject = |report: &mut IngestReport, reason: String| {
        report.rejections.push(Rejection {
            location,
            post_id: Some(post_id.clone()),
            reason,
        })
    };

    let mut missing = Vec::new();
    let title = text_field(&obj, "title");
    let content = text_field(&obj, "content");
    if title.is_none() {
        missing.push("title");
    }
    if content.is_none() {
        missing.push("content");
    }
    if !missing.is_empty() {
        reject(report, format!("missing required field(s): {}", missing.join(", ")));
        return;
    }

    let mut counts = [0u64; 3];
    for (slot, key) in counts.iter_mut().zip(["upvotes", "downvotes", "comment_count"]) {
        match obj.get(key) {
            None | Some(Value::Null) => {}
            Some(v) => match v.as_u64() {
                Some(n) => *slot = n,
                None => {
                    reject(report, format!("`{key}` must be a non-negative integer"));
                    return;
                }
            },
        }
    }

    if !seen.insert(post_id.clone()) {
        reject(report, "duplicate post id".into());
        return;
    }

    report.records.push(PostRecord {
        post_id,
        submolt: text_field(&obj, "submolt").unwrap_or_default(),
        author: text_field(&obj, "username").unwrap_or_default(),
        title: title.unwrap_or_default(),
        content: content.unwrap_or_default(),
        upvotes: counts[0],
        downvotes: counts[1],
        comment_count: counts[2],
    });
    report.metadata.push(Value::Object(obj));
}

fn text_field(obj: &Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Some(s.clone()),
        _ => None,
    }
}

impl PostRecord {
    /// The archive representation of this record.
    pub fn to_archive_value(&self) -> Value {
        serde_json::json!({
            "id": self.post_id,
            "submolt": self.submolt,
            "username": self.author,
            "title": self.title,
            "content": self.content,
            "upvotes": self.upvotes,
            "downvotes": self.downvotes,
            "comment_count": self.comment_count,
        })
    }
}

/// Writes records as a newline-delimited archive readable by [`ingest`].
pub fn write_archive(records: &[PostRecord], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, &record.to_archive_value())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords {
    words: HashSet<String>,
}

impl StopWords {
    /// The bundled English list.
    pub fn english() -> Self {
        Self::from_list(ENGLISH_STOPWORDS)
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn from_list(list: &str) -> Self {
        let words = list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { words }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanPost {
    pub post_id: String,
    pub text: String,
    pub word_count: usize,
}

/// Case-folded form used for stop-word matching: surrounding punctuation
/// trimmed, typographic apostrophes folded to ASCII.
fn match_key(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .replace('\u{2019}', "'")
        .to_lowercase()
}

/// Removes stop words (and punctuation-only tokens) from `text`, keeping the
/// original casing and the strongest line break between surviving tokens.
/// Returns the cleaned text and its word count.
pub fn remove_stopwords(text: &str, stopwords: &StopWords) -> (String, usize) {
    let mut out = String::with_capacity(text.len());
    let mut count = 0;
    let mut pending_newlines = 0usize;
    let mut cursor = 0;

    for (start, end) in token_spans(text) {
        pending_newlines += text[cursor..start].matches('\n').count();
        cursor = end;
        let token = &text[start..end];
        let key = match_key(token);
        if key.is_empty() || stopwords.contains(&key) {
            continue;
        }
        if count > 0 {
            out.push_str(match pending_newlines {
                0 => " ",
                1 => "\n",
                _ => "\n\n",
            });
        }
        out.push_str(token);
        count += 1;
        pending_newlines = 0;
    }
    (out, count)
}

/// Joins title and content with one space, removes stop words and drops posts
/// left with fewer than `min_words` words.
pub fn preprocess(
    posts: &[PostRecord],
    stopwords: &StopWords,
    min_words: usize,
) -> Result<Vec<CleanPost>, CorpusError> {
    if min_words == 0 {
        return Err(CorpusError::InvalidMinWords);
    }
    Ok(posts
        .iter()
        .filter_map(|post| {
            let joined = format!("{} {}", post.title, post.content);
            let (text, word_count) = remove_stopwords(&joined, stopwords);
            (word_count >= min_words).then(|| CleanPost {
                post_id: post.post_id.clone(),
                text,
                word_count,
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_CHUNK_OVERLAP,
        }
    }
}

impl ChunkConfig {
    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self, CorpusError> {
        if chunk_size == 0 || overlap >= chunk_size {
            return Err(CorpusError::InvalidChunkConfig {
                chunk_size,
                overlap,
            });
        }
        Ok(Self {
            chunk_size,
            overlap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub post_id: String,
    pub seq: usize,
    pub text: String,
    pub token_count: usize,
    /// Token range `[start, end)` within the source text.
    pub token_start: usize,
    pub token_end: usize,
}

impl Chunk {
    /// Stable identifier used as the index entry id.
    pub fn entry_id(&self) -> String {
        format!("{}#{}", self.post_id, self.seq)
    }
}

/// Split-point preference, strongest last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Boundary {
    Space,
    SentenceEnd,
    Newline,
    BlankLine,
}

fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

fn ends_sentence(token: &str) -> bool {
    token
        .trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}'])
        .ends_with(['.', '!', '?'])
}

/// Splits `text` into chunks of at most `chunk_size` tokens where each chunk
/// starts `overlap` tokens before the previous one ended.
///
/// Split points prefer, in order, blank lines, newlines, sentence ends and
/// finally any space. A structural split point is only taken when the chunk
/// would still hold more than `max(overlap, chunk_size / 2)` tokens.
pub fn chunk(post_id: &str, text: &str, config: ChunkConfig) -> Result<Vec<Chunk>, CorpusError> {
    let ChunkConfig {
        chunk_size,
        overlap,
    } = ChunkConfig::new(config.chunk_size, config.overlap)?;
    let spans = token_spans(text);
    let n = spans.len();

    let boundary_at = |i: usize| -> Boundary {
        let gap = &text[spans[i - 1].1..spans[i].0];
        match gap.matches('\n').count() {
            0 if ends_sentence(&text[spans[i - 1].0..spans[i - 1].1]) => Boundary::SentenceEnd,
            0 => Boundary::Space,
            1 => Boundary::Newline,
            _ => Boundary::BlankLine,
        }
    };

    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = if n - start <= chunk_size {
            n
        } else {
            let hard = start + chunk_size;
            let lowest = start + overlap.max(chunk_size / 2) + 1;
            // max_by_key keeps the last maximum, i.e. the latest strongest split.
            (lowest..=hard).max_by_key(|&i| boundary_at(i)).unwrap_or(hard)
        };
        chunks.push(Chunk {
            post_id: post_id.to_string(),
            seq: chunks.len(),
            text: text[spans[start].0..spans[end - 1].1].to_string(),
            token_count: end - start,
            token_start: start,
            token_end: end,
        });
        if end == n {
            break;
        }
        start = end - overlap;
    }
    Ok(chunks)
}

pub fn chunk_posts(posts: &[CleanPost], config: ChunkConfig) -> Result<Vec<Chunk>, CorpusError> {
    let mut out = Vec::new();
    for post in posts {
        out.extend(chunk(&post.post_id, &post.text, config)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn post(id: &str, title: &str, content: &str) -> PostRecord {
        PostRecord {
            post_id: id.into(),
            submolt: "general".into(),
            author: "agent".into(),
            title: title.into(),
            content: content.into(),
            upvotes: 0,
            downvotes: 0,
            comment_count: 0,
        }
    }

    #[test]
    fn stopword_list_snapshot() {
        let sw = StopWords::english();
        assert_eq!(sw.len(), 179);
        assert!(sw.contains("the") && sw.contains("now") && sw.contains("don't"));
        assert!(!sw.contains("cat"));
    }

    #[test]
    fn two_entries_two_records() {
        let raw = r#"{"id":"a","submolt":"m","username":"u","title":"t","content":"c","upvotes":1,"downvotes":0,"comment_count":2}
{"id":"b","submolt":"m","username":"u","title":"t2","content":"c2","upvotes":0,"downvotes":3,"comment_count":0}"#;
        let report = ingest_str(raw).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.records[1].downvotes, 3);
        assert!(report.rejections.is_empty());
    }

    #[test]
    fn missing_content_rejected_with_id() {
        let raw = r#"{"id":"ok","title":"t","content":"c"}
{"id":"bad","title":"only a title"}
not json"#;
        let report = ingest_str(raw).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.rejections.len(), 2);
        assert_eq!(report.rejections[0].post_id.as_deref(), Some("bad"));
        assert_eq!(report.rejections[0].location, 2);
        assert!(report.rejections[0].reason.contains("content"));
        assert_eq!(report.rejections[1].location, 3);
    }

    #[test]
    fn array_archive_synthesizes_ids() {
        let raw = r#"[{"title":"a","content":"b"},{"title":"c","content":"d","upvotes":-1}]"#;
        let report = ingest_str(raw).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.records[0].post_id, "0");
        assert_eq!(report.rejections[0].post_id.as_deref(), Some("1"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let raw = "{\"id\":\"x\",\"title\":\"a\",\"content\":\"b\"}\n{\"id\":\"x\",\"title\":\"c\",\"content\":\"d\"}";
        let report = ingest_str(raw).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.rejections[0].reason, "duplicate post id");
    }

    #[test]
    fn all_stopwords_dropped() {
        let sw = StopWords::english();
        let out = preprocess(&[post("1", "The", "and of the it was to be")], &sw, 1).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn ten_word_boundary() {
        let sw = StopWords::english();
        let nine = post("9", "alpha bravo charlie", "delta echo foxtrot golf hotel india the of");
        let ten = post("10", "alpha bravo charlie", "delta echo foxtrot golf hotel india juliet");
        let out = preprocess(&[nine, ten], &sw, DEFAULT_MIN_WORDS).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].post_id, "10");
        assert_eq!(out[0].word_count, 10);
    }

    #[test]
    fn hand_counted_sentence() {
        // Surviving by hand: cat sat mat hat bat rat (the/on/with/a/and/now are listed).
        let sw = StopWords::english();
        let (text, count) =
            remove_stopwords("the cat sat on the mat with a hat and a bat and a rat now", &sw);
        assert_eq!(text, "cat sat mat hat bat rat");
        assert_eq!(count, 6);
        let out = preprocess(
            &[post("p", "", "the cat sat on the mat with a hat and a bat and a rat now")],
            &sw,
            10,
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn casing_and_line_breaks_preserved() {
        let sw = StopWords::english();
        let (text, _) = remove_stopwords("The Market is open.\n\nAnd the Bots trade.", &sw);
        assert_eq!(text, "Market open.\n\nBots trade.");
    }

    #[test]
    fn single_chunk_when_it_fits() {
        let chunks = chunk("p", &words(400), ChunkConfig::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].token_count, 400);
    }

    #[test]
    fn six_hundred_tokens_two_chunks() {
        let chunks = chunk("p", &words(600), ChunkConfig::default()).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!((chunks[0].token_start, chunks[0].token_end), (0, 512));
        assert_eq!((chunks[1].token_start, chunks[1].token_end), (448, 600));
        assert!(chunks[1].text.starts_with("w448 "));
        assert_eq!(chunks[1].entry_id(), "p#1");
    }

    #[test]
    fn overlap_equal_to_size_rejected() {
        assert!(matches!(
            chunk("p", "a b c", ChunkConfig { chunk_size: 4, overlap: 4 }),
            Err(CorpusError::InvalidChunkConfig { .. })
        ));
    }

    #[test]
    fn empty_text_no_chunks() {
        assert!(chunk("p", "  \n ", ChunkConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn prefers_paragraph_break() {
        // 8 tokens, blank line after token 6, window of 8 with size 7.
        let text = "a b c d e f\n\ng h";
        let chunks = chunk("p", text, ChunkConfig::new(7, 1).unwrap()).unwrap();
        assert_eq!(chunks[0].text, "a b c d e f");
        assert_eq!(chunks[1].token_start, 5);
    }
}
