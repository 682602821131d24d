//! Code labels, annotations, two-level codebooks and equivalence maps.
//!
//! A code is identified by its normalized surface form. Two labels that mean
//! the same thing but are spelled differently stay distinct unless a human
//! supplied an [`EquivalenceMap`] entry joining them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::corpus::{DocId, SelectionSpan};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("duplicate first-level code `{0}`")]
    DuplicateFirstLevel(String),
    #[error("duplicate second-level code `{second}` under `{first}`")]
    DuplicateSecondLevel { first: String, second: String },
    #[error("codebook has no entries")]
    NoEntries,
    #[error("label `{label}` maps to both `{a}` and `{b}`")]
    ConflictingMapping { label: String, a: String, b: String },
    #[error("canonical label `{canonical}` is itself mapped to `{target}`")]
    NonCanonicalTarget { canonical: String, target: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed example `{0}` (expected doc:start-end)")]
    MalformedExample(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Trim, case-fold and collapse internal whitespace runs to single spaces.
pub fn normalize_text(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CodeLabel {
    raw: String,
    normalized: String,
}

impl CodeLabel {
    pub fn new(raw: impl Into<String>) -> Result<Self, CodebookError> {
        let raw = raw.into();
        let normalized = normalize_text(&raw);
        if normalized.is_empty() {
            return Err(CodebookError::EmptyLabel);
        }
        Ok(CodeLabel { raw, normalized })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn normalized(&self) -> &str {
        &self.normalized
    }
}

pub fn normalize_label(raw: &str) -> Result<CodeLabel, CodebookError> {
    CodeLabel::new(raw)
}

impl TryFrom<String> for CodeLabel {
    type Error = CodebookError;

    fn try_from(raw: String) -> Result<Self, Self::Error> {
        CodeLabel::new(raw)
    }
}

impl From<CodeLabel> for String {
    fn from(l: CodeLabel) -> String {
        l.raw
    }
}

// Identity is the normalized form.
impl PartialEq for CodeLabel {
    fn eq(&self, other: &Self) -> bool {
        self.normalized == other.normalized
    }
}

impl Eq for CodeLabel {}

impl std::hash::Hash for CodeLabel {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.normalized.hash(state)
    }
}

impl PartialOrd for CodeLabel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CodeLabel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.normalized.cmp(&other.normalized)
    }
}

impl fmt::Display for CodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoderId(pub String);

impl CoderId {
    pub fn new(id: impl Into<String>) -> Self {
        CoderId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationId(pub u64);

impl fmt::Display for AnnotationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub code: CodeLabel,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: AnnotationId,
    pub coder: CoderId,
    pub span: SelectionSpan,
    pub code: CodeLabel,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    /// Codes this annotation carried before, oldest first.
    pub revisions: Vec<Revision>,
    pub deleted: bool,
}

impl Annotation {
    pub fn new(
        id: AnnotationId,
        coder: CoderId,
        span: SelectionSpan,
        code: CodeLabel,
        at: Timestamp,
    ) -> Self {
        Annotation {
            id,
            coder,
            span,
            code,
            created_at: at,
            updated_at: at,
            revisions: Vec::new(),
            deleted: false,
        }
    }

    pub fn edit(&mut self, code: CodeLabel, at: Timestamp) {
        let old = std::mem::replace(&mut self.code, code);
        self.revisions.push(Revision {
            code: old,
            at: self.updated_at,
        });
        self.updated_at = at;
    }

    /// Soft delete; the annotation stays in history.
    pub fn delete(&mut self, at: Timestamp) {
        self.deleted = true;
        self.updated_at = at;
    }

    pub fn is_live(&self) -> bool {
        !self.deleted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    First,
    Second,
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(Level::First),
            "second" => Ok(Level::Second),
            other => Err(format!("unknown level `{other}` (expected first|second)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubCode {
    pub label: CodeLabel,
    #[serde(default)]
    pub examples: Vec<SelectionSpan>,
}

impl SubCode {
    pub fn new(label: CodeLabel) -> Self {
        SubCode {
            label,
            examples: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub first_level: CodeLabel,
    #[serde(default)]
    pub second_level: Vec<SubCode>,
}

impl CodeEntry {
    pub fn new(first: &str, seconds: &[&str]) -> Result<Self, CodebookError> {
        Ok(CodeEntry {
            first_level: CodeLabel::new(first)?,
            second_level: seconds
                .iter()
                .map(|s| CodeLabel::new(*s).map(SubCode::new))
                .collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Codebook {
    pub owner: String,
    entries: Vec<CodeEntry>,
}

#[derive(Deserialize)]
struct CodebookWire {
    #[serde(default)]
    owner: String,
    entries: Vec<CodeEntry>,
}

impl<'de> Deserialize<'de> for Codebook {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = CodebookWire::deserialize(d)?;
        if wire.entries.is_empty() {
            return Ok(Codebook::empty(wire.owner));
        }
        build_codebook(wire.owner, wire.entries).map_err(serde::de::Error::custom)
    }
}

/// Validate entries into a codebook.
pub fn build_codebook(
    owner: impl Into<String>,
    entries: Vec<CodeEntry>,
) -> Result<Codebook, CodebookError> {
    if entries.is_empty() {
        return Err(CodebookError::NoEntries);
    }
    let mut firsts = BTreeSet::new();
    for e in &entries {
        if !firsts.insert(e.first_level.normalized()) {
            return Err(CodebookError::DuplicateFirstLevel(
                e.first_level.normalized().to_string(),
            ));
        }
        let mut seconds = BTreeSet::new();
        for s in &e.second_level {
            if !seconds.insert(s.label.normalized()) {
                return Err(CodebookError::DuplicateSecondLevel {
                    first: e.first_level.normalized().to_string(),
                    second: s.label.normalized().to_string(),
                });
            }
        }
    }
    Ok(Codebook {
        owner: owner.into(),
        entries,
    })
}

impl Codebook {
    pub fn empty(owner: impl Into<String>) -> Self {
        Codebook {
            owner: owner.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[CodeEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<CodeEntry> {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Normalized labels at one level, deduplicated.
    pub fn labels(&self, level: Level) -> BTreeSet<String> {
        match level {
            Level::First => self
                .entries
                .iter()
                .map(|e| e.first_level.normalized().to_string())
                .collect(),
            Level::Second => self
                .entries
                .iter()
                .flat_map(|e| e.second_level.iter())
                .map(|s| s.label.normalized().to_string())
                .collect(),
        }
    }

    pub fn canonical_labels(&self, equiv: &EquivalenceMap, level: Level) -> BTreeSet<String> {
        self.labels(level)
            .iter()
            .map(|l| equiv.canonicalize(l).to_string())
            .collect()
    }

    pub fn to_json(&self) -> Result<String, CodebookError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CodebookError> {
        Ok(serde_json::from_str(s)?)
    }

    /// CSV with `first_level,second_level,example` columns. One row per
    /// example; a subcode without examples and an entry without subcodes get
    /// one row with the missing columns empty. Examples are written as
    /// `doc:start-end`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), CodebookError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["first_level", "second_level", "example"])?;
        for e in &self.entries {
            let first = e.first_level.raw();
            if e.second_level.is_empty() {
                out.write_record([first, "", ""])?;
            }
            for s in &e.second_level {
                if s.examples.is_empty() {
                    out.write_record([first, s.label.raw(), ""])?;
                }
                for ex in &s.examples {
                    let cell = format!("{}:{}-{}", ex.document_id, ex.start, ex.end);
                    out.write_record([first, s.label.raw(), cell.as_str()])?;
                }
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(owner: &str, r: R) -> Result<Self, CodebookError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut entries: Vec<CodeEntry> = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let first = CodeLabel::new(row.get(0).unwrap_or(""))?;
            let second = row.get(1).unwrap_or("").trim();
            let example = row.get(2).unwrap_or("").trim();
            let idx = match entries.iter().position(|e| e.first_level == first) {
                Some(i) => i,
                None => {
                    entries.push(CodeEntry {
                        first_level: first,
                        second_level: Vec::new(),
                    });
                    entries.len() - 1
                }
            };
            if second.is_empty() {
                continue;
            }
            let label = CodeLabel::new(second)?;
            let subs = &mut entries[idx].second_level;
            let sub = match subs.iter().position(|s| s.label == label) {
                Some(i) => &mut subs[i],
                None => {
                    subs.push(SubCode::new(label));
                    subs.last_mut().unwrap()
                }
            };
            if !example.is_empty() {
                sub.examples.push(parse_example(example)?);
            }
        }
        if entries.is_empty() {
            return Ok(Codebook::empty(owner));
        }
        build_codebook(owner, entries)
    }
}

fn parse_example(cell: &str) -> Result<SelectionSpan, CodebookError> {
    let bad = || CodebookError::MalformedExample(cell.to_string());
    let (doc, range) = cell.rsplit_once(':').ok_or_else(bad)?;
    let (s, e) = range.split_once('-').ok_or_else(bad)?;
    Ok(SelectionSpan {
        document_id: DocId::new(doc),
        start: s.parse().map_err(|_| bad())?,
        end: e.parse().map_err(|_| bad())?,
    })
}

/// Human-supplied mapping from labels to canonical labels. Unmapped labels
/// are their own canonical form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct EquivalenceMap {
    map: BTreeMap<String, String>,
}

impl<'de> Deserialize<'de> for EquivalenceMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        EquivalenceMap::from_pairs(raw).map_err(serde::de::Error::custom)
    }
}

impl EquivalenceMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from `(label, canonical)` pairs; both sides are normalized.
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self, CodebookError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (label, canonical) in pairs {
            let label = normalize_text(label.as_ref());
            let canonical = normalize_text(canonical.as_ref());
            if label.is_empty() || canonical.is_empty() {
                return Err(CodebookError::EmptyLabel);
            }
            if let Some(prev) = map.get(&label) {
                if *prev != canonical {
                    return Err(CodebookError::ConflictingMapping {
                        label,
                        a: prev.clone(),
                        b: canonical,
                    });
                }
            }
            map.insert(label, canonical);
        }
        for canonical in map.values() {
            if let Some(target) = map.get(canonical) {
                if target != canonical {
                    return Err(CodebookError::NonCanonicalTarget {
                        canonical: canonical.clone(),
                        target: target.clone(),
                    });
                }
            }
        }
        Ok(EquivalenceMap { map })
    }

    /// Maps every second-level label of `cb` to its first-level label.
    pub fn from_hierarchy(cb: &Codebook) -> Self {
        let mut map = BTreeMap::new();
        for e in cb.entries() {
            for s in &e.second_level {
                if s.label != e.first_level {
                    map.entry(s.label.normalized().to_string())
                        .or_insert_with(|| e.first_level.normalized().to_string());
                }
            }
        }
        // a second-level label that is also some entry's first level stays canonical
        for e in cb.entries() {
            map.remove(e.first_level.normalized());
        }
        EquivalenceMap { map }
    }

    /// `self` extended with the pairs of `other` for labels `self` leaves
    /// unmapped. Pairs of `other` whose target `self` remaps are chained.
    pub fn extended_with(&self, other: &EquivalenceMap) -> EquivalenceMap {
        let mut map = self.map.clone();
        for (label, canonical) in &other.map {
            if map.contains_key(label) || map.values().any(|c| c == label) {
                continue;
            }
            map.insert(label.clone(), self.canonicalize(canonical).to_string());
        }
        let fixed: Vec<_> = map
            .values()
            .filter(|c| map.get(*c).is_some_and(|t| t != *c))
            .cloned()
            .collect();
        for c in fixed {
            map.remove(&c);
        }
        EquivalenceMap { map }
    }

    /// Canonical form of an already-normalized label.
    pub fn canonicalize<'a>(&'a self, normalized: &'a str) -> &'a str {
        self.map
            .get(normalized)
            .map(String::as_str)
            .unwrap_or(normalized)
    }

    pub fn canonical_of(&self, label: &CodeLabel) -> String {
        self.canonicalize(label.normalized()).to_string()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }
}

/// Canonicalized labels present in both codebooks at `level`.
pub fn intersect(
    a: &Codebook,
    b: &Codebook,
    equiv: &EquivalenceMap,
    level: Level,
) -> BTreeSet<String> {
    let la = a.canonical_labels(equiv, level);
    let lb = b.canonical_labels(equiv, level);
    la.intersection(&lb).cloned().collect()
}

/// Union of several codebooks under `equiv`: first-level labels are
/// canonicalized and entries sharing a canonical label are merged. Never
/// invents equivalences beyond those in `equiv`.
pub fn union_codebooks(
    owner: &str,
    books: &[&Codebook],
    equiv: &EquivalenceMap,
) -> Result<Codebook, CodebookError> {
    let mut merged: BTreeMap<String, BTreeMap<String, SubCode>> = BTreeMap::new();
    for cb in books {
        for e in cb.entries() {
            let first = equiv.canonical_of(&e.first_level);
            let subs = merged.entry(first).or_default();
            for s in &e.second_level {
                let key = equiv.canonical_of(&s.label);
                let sub = subs
                    .entry(key.clone())
                    .or_insert_with(|| SubCode::new(CodeLabel::new(key).unwrap()));
                for ex in &s.examples {
                    if !sub.examples.contains(ex) {
                        sub.examples.push(ex.clone());
                    }
                }
            }
        }
    }
    if merged.is_empty() {
        return Ok(Codebook::empty(owner));
    }
    let entries = merged
        .into_iter()
        .map(|(first, subs)| {
            Ok(CodeEntry {
                first_level: CodeLabel::new(first)?,
                second_level: subs.into_values().collect(),
            })
        })
        .collect::<Result<Vec<_>, CodebookError>>()?;
    build_codebook(owner, entries)
}
