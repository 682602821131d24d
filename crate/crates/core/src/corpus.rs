//! Documents, sentence segmentation and validated selections.
//!
//! All offsets are counted in Unicode scalar values (Rust `char`s), never
//! bytes, so that a client and the server agree on positions regardless of
//! encoding.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("empty span [{start}, {end})")]
    EmptySpan { start: usize, end: usize },
    #[error("span [{start}, {end}) contains only whitespace")]
    WhitespaceOnlySpan { start: usize, end: usize },
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("duplicate document `{0}`")]
    DuplicateDocument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub String);

impl DocId {
    pub fn new(id: impl Into<String>) -> Self {
        DocId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SelectionSpan {
    pub document_id: DocId,
    pub start: usize,
    pub end: usize,
}

impl SelectionSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Wire form of a document; sentences are always re-derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSource {
    pub id: DocId,
    #[serde(default)]
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "DocumentSource", into = "DocumentSource")]
pub struct Document {
    id: DocId,
    title: String,
    body: String,
    /// Byte offset of each char, plus the body length as a sentinel.
    byte_at: Vec<usize>,
    /// `nonws[i]` = number of non-whitespace chars in `[0, i)`.
    nonws: Vec<u32>,
    sentences: Vec<Sentence>,
}

impl From<DocumentSource> for Document {
    fn from(src: DocumentSource) -> Self {
        Document::new(src.id, src.title, src.body)
    }
}

impl From<Document> for DocumentSource {
    fn from(doc: Document) -> Self {
        DocumentSource {
            id: doc.id,
            title: doc.title,
            body: doc.body,
        }
    }
}

impl Document {
    pub fn new(id: DocId, title: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let mut byte_at = Vec::with_capacity(body.len() + 1);
        let mut nonws = Vec::with_capacity(body.len() + 1);
        nonws.push(0u32);
        let mut count = 0u32;
        for (b, c) in body.char_indices() {
            byte_at.push(b);
            if !c.is_whitespace() {
                count += 1;
            }
            nonws.push(count);
        }
        byte_at.push(body.len());
        let sentences = segment_sentences(&body);
        Document {
            id,
            title: title.into(),
            body,
            byte_at,
            nonws,
            sentences,
        }
    }

    pub fn id(&self) -> &DocId {
        &self.id
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Length in chars.
    pub fn len(&self) -> usize {
        self.byte_at.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    /// Text of the char range `[start, end)`; offsets past the end are clamped.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        let n = self.len();
        let (s, e) = (start.min(n), end.min(n).max(start.min(n)));
        &self.body[self.byte_at[s]..self.byte_at[e]]
    }

    pub fn span_text(&self, span: &SelectionSpan) -> &str {
        self.slice(span.start, span.end)
    }

    pub fn sentence_text(&self, index: usize) -> Option<&str> {
        self.sentences
            .get(index)
            .map(|s| self.slice(s.start, s.end))
    }

    /// Number of non-whitespace chars in `[start, end)`.
    pub fn non_whitespace_in(&self, start: usize, end: usize) -> usize {
        let n = self.len();
        let (s, e) = (start.min(n), end.min(n));
        if e <= s {
            return 0;
        }
        (self.nonws[e] - self.nonws[s]) as usize
    }

    pub fn resolve_span(&self, start: i64, end: i64) -> Result<SelectionSpan, CorpusError> {
        resolve_span(self, start, end)
    }

    pub fn sentences_overlapping(&self, span: &SelectionSpan) -> Vec<usize> {
        sentences_overlapping(self, span)
    }
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split `body` into sentences. A sentence ends at `.`, `!` or `?` when the
/// next char is whitespace or the end of text; a trailing fragment without
/// terminal punctuation is its own sentence. Spans never start or end on
/// whitespace.
pub fn segment_sentences(body: &str) -> Vec<Sentence> {
    let chars: Vec<char> = body.chars().collect();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    // last non-whitespace char index seen in the open sentence
    let mut last_nonws = 0usize;
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            continue;
        }
        if start.is_none() {
            start = Some(i);
        }
        last_nonws = i;
        let at_boundary = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if is_terminal(c) && at_boundary {
            out.push(Sentence {
                index: out.len(),
                start: start.take().unwrap(),
                end: i + 1,
            });
        }
    }
    if let Some(s) = start {
        out.push(Sentence {
            index: out.len(),
            start: s,
            end: last_nonws + 1,
        });
    }
    out
}

/// Validate a selection, clamping both ends into `[0, len]`.
pub fn resolve_span(doc: &Document, start: i64, end: i64) -> Result<SelectionSpan, CorpusError> {
    let n = doc.len() as i64;
    let s = start.clamp(0, n) as usize;
    let e = end.clamp(0, n) as usize;
    if s >= e {
        return Err(CorpusError::EmptySpan { start: s, end: e });
    }
    if doc.non_whitespace_in(s, e) == 0 {
        return Err(CorpusError::WhitespaceOnlySpan { start: s, end: e });
    }
    Ok(SelectionSpan {
        document_id: doc.id.clone(),
        start: s,
        end: e,
    })
}

/// Indices of every sentence sharing at least one non-whitespace char with
/// `span`, ascending.
pub fn sentences_overlapping(doc: &Document, span: &SelectionSpan) -> Vec<usize> {
    let sentences = doc.sentences();
    let first = sentences.partition_point(|s| s.end <= span.start);
    sentences[first..]
        .iter()
        .take_while(|s| s.start < span.end)
        .filter(|s| doc.non_whitespace_in(s.start.max(span.start), s.end.min(span.end)) > 0)
        .map(|s| s.index)
        .collect()
}

/// The documents of one session, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: BTreeMap<DocId, Document>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc: Document) -> Result<(), CorpusError> {
        if self.docs.contains_key(doc.id()) {
            return Err(CorpusError::DuplicateDocument(doc.id().to_string()));
        }
        self.docs.insert(doc.id().clone(), doc);
        Ok(())
    }

    pub fn get(&self, id: &DocId) -> Result<&Document, CorpusError> {
        self.docs
            .get(id)
            .ok_or_else(|| CorpusError::UnknownDocument(id.to_string()))
    }

    pub fn span_text(&self, span: &SelectionSpan) -> Result<&str, CorpusError> {
        Ok(self.get(&span.document_id)?.span_text(span))
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }
}

impl FromIterator<Document> for Corpus {
    fn from_iter<I: IntoIterator<Item = Document>>(iter: I) -> Self {
        Corpus {
            docs: iter.into_iter().map(|d| (d.id().clone(), d)).collect(),
        }
    }
}
