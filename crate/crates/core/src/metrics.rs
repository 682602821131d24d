//! Dependent variables of a session: phase durations, sentence-level
//! Cohen's κ on first-level codes, code diversity, code coverage against a
//! merged reference codebook, and per-coder completion.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::codebook::{
    build_codebook, Annotation, CodeEntry, CodeLabel, Codebook, CodebookError, EquivalenceMap,
    Level, SubCode,
};
use crate::corpus::{DocId, Document};
use crate::session::{Condition, EventBody, Phase, Session, SessionEvent};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label vectors are empty")]
    EmptyVector,
    #[error("label `{0}` has no class id")]
    UnmappedLabel(String),
    #[error("label mapping is invalid: {0}")]
    InvalidMapping(String),
    #[error("merged codebook has no {0:?}-level codes")]
    EmptyMergedCodebook(Level),
    #[error("malformed log: {0}")]
    MalformedLog(String),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

/// One class id per sentence; 0 means uncoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector(pub Vec<u32>);

impl LabelVector {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Canonical first-level label to class id. Injective, ids positive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u32>", into = "BTreeMap<String, u32>")]
pub struct LabelMapping(BTreeMap<String, u32>);

impl LabelMapping {
    pub fn new(map: BTreeMap<String, u32>) -> Result<Self, MetricsError> {
        let mut seen = BTreeSet::new();
        let mut out = BTreeMap::new();
        for (label, id) in map {
            if id == 0 {
                return Err(MetricsError::InvalidMapping(format!(
                    "`{label}` uses the reserved id 0"
                )));
            }
            if !seen.insert(id) {
                return Err(MetricsError::InvalidMapping(format!("id {id} used twice")));
            }
            let key = CodeLabel::new(label)?.normalized().to_string();
            if out.insert(key.clone(), id).is_some() {
                return Err(MetricsError::InvalidMapping(format!(
                    "`{key}` listed twice"
                )));
            }
        }
        Ok(LabelMapping(out))
    }

    /// Ids 1, 2, ... assigned in sorted label order.
    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let set: BTreeSet<String> = labels.into_iter().collect();
        LabelMapping(set.into_iter().zip(1..).collect())
    }

    pub fn class_of(&self, canonical: &str) -> Option<u32> {
        self.0.get(canonical).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<BTreeMap<String, u32>> for LabelMapping {
    type Error = MetricsError;

    fn try_from(m: BTreeMap<String, u32>) -> Result<Self, Self::Error> {
        LabelMapping::new(m)
    }
}

impl From<LabelMapping> for BTreeMap<String, u32> {
    fn from(m: LabelMapping) -> Self {
        m.0
    }
}

fn merged_nonws(doc: &Document, mut intervals: Vec<(usize, usize)>) -> usize {
    intervals.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(usize, usize)> = None;
    for (s, e) in intervals {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += doc.non_whitespace_in(cs, ce);
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += doc.non_whitespace_in(cs, ce);
    }
    total
}

/// Intervals of one class within a sentence and its earliest (created_at, id).
type ClassOverlap = (Vec<(usize, usize)>, (Timestamp, u64));

/// Class id per sentence of `doc`. When several codes overlap a sentence the
/// code covering the most non-whitespace chars wins; ties go to the code
/// whose earliest overlapping annotation is oldest, then the lowest id.
pub fn sentence_labels<'a, I>(
    annotations: I,
    doc: &Document,
    mapping: &LabelMapping,
    equiv: &EquivalenceMap,
) -> Result<LabelVector, MetricsError>
where
    I: IntoIterator<Item = &'a Annotation>,
{
    let mut classified = Vec::new();
    for a in annotations {
        if !a.is_live() || &a.span.document_id != doc.id() {
            continue;
        }
        let canonical = equiv.canonical_of(&a.code);
        let class = mapping
            .class_of(&canonical)
            .ok_or(MetricsError::UnmappedLabel(canonical))?;
        classified.push((a, class));
    }
    let mut labels = Vec::with_capacity(doc.sentences().len());
    for s in doc.sentences() {
        let mut per_class: BTreeMap<u32, ClassOverlap> = BTreeMap::new();
        for (a, class) in &classified {
            let (lo, hi) = (a.span.start.max(s.start), a.span.end.min(s.end));
            if lo >= hi || doc.non_whitespace_in(lo, hi) == 0 {
                continue;
            }
            let key = (a.created_at, a.id.0);
            let slot = per_class.entry(*class).or_insert_with(|| (Vec::new(), key));
            slot.0.push((lo, hi));
            slot.1 = slot.1.min(key);
        }
        let best = per_class
            .into_iter()
            .map(|(class, (iv, first))| (merged_nonws(doc, iv), first, class))
            .min_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        labels.push(best.map_or(0, |b| b.2));
    }
    Ok(LabelVector(labels))
}

/// Cohen's κ = (p_o − p_e) / (1 − p_e).
///
/// Computed from integer counts as (A·n − E) / (n² − E) with A the number of
/// agreeing positions and E = Σ_c a_c·b_c, which avoids cancellation. The
/// denominator vanishes only when p_e = 1, i.e. both vectors are constant
/// on the same label; then p_o = 1 as well and κ is defined as 1. Two
/// constant vectors on different labels give p_e = 0 and p_o = 0, so κ = 0
/// through the ordinary formula.
pub fn cohen_kappa(a: &[u32], b: &[u32]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyVector);
    }
    let n = a.len() as i128;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as i128;
    let mut ca: BTreeMap<u32, i128> = BTreeMap::new();
    let mut cb: BTreeMap<u32, i128> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let expected: i128 = ca
        .iter()
        .map(|(c, na)| na * cb.get(c).copied().unwrap_or(0))
        .sum();
    let denom = n * n - expected;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok((agree * n - expected) as f64 / denom as f64)
}

/// Unique (first-level, second-level) label counts.
pub fn code_diversity(cb: &Codebook) -> (usize, usize) {
    (
        cb.labels(Level::First).len(),
        cb.labels(Level::Second).len(),
    )
}

/// Share of the merged codebook's canonical labels at `level` that the
/// coders' codebook also contains.
pub fn code_coverage(
    coders: &Codebook,
    merged: &Codebook,
    equiv: &EquivalenceMap,
    level: Level,
) -> Result<f64, MetricsError> {
    let reference = merged.canonical_labels(equiv, level);
    if reference.is_empty() {
        return Err(MetricsError::EmptyMergedCodebook(level));
    }
    let own = coders.canonical_labels(equiv, level);
    let hit = reference.intersection(&own).count();
    Ok(hit as f64 / reference.len() as f64)
}

/// (covered, total) sentences of `doc`.
pub fn completion_counts<'a, I>(annotations: I, doc: &Document) -> (usize, usize)
where
    I: IntoIterator<Item = &'a Annotation>,
{
    let mut covered = vec![false; doc.sentences().len()];
    for a in annotations {
        if a.is_live() && &a.span.document_id == doc.id() {
            for i in doc.sentences_overlapping(&a.span) {
                covered[i] = true;
            }
        }
    }
    (covered.iter().filter(|c| **c).count(), covered.len())
}

/// Fraction of sentences overlapped by at least one live annotation.
pub fn completion_rate<'a, I>(annotations: I, doc: &Document) -> f64
where
    I: IntoIterator<Item = &'a Annotation>,
{
    ratio(completion_counts(annotations, doc))
}

fn ratio((covered, total): (usize, usize)) -> f64 {
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhaseTiming {
    pub started: [Option<Timestamp>; 3],
    /// `None` while a phase is still open.
    pub durations: [Option<Duration>; 3],
    pub finished: Option<Timestamp>,
}

impl PhaseTiming {
    /// Per phase, whether the closed duration exceeded its limit.
    pub fn overruns(&self, limits_secs: [u64; 3]) -> [bool; 3] {
        std::array::from_fn(|i| {
            self.durations[i].is_some_and(|d| d > Duration::from_secs(limits_secs[i]))
        })
    }
}

/// Phase durations recovered from the log's phase advances. A coder's
/// advance out of phase 1 or 3 only takes effect once both coders have
/// advanced; operator advances and phase-2 advances take effect at once.
pub fn phase_timing(log: &[SessionEvent]) -> Result<PhaseTiming, MetricsError> {
    let mut timing = PhaseTiming {
        started: [None; 3],
        durations: [None; 3],
        finished: None,
    };
    let mut current: Option<Phase> = None;
    let mut waiting = BTreeSet::new();
    let mut last = Timestamp(i64::MIN);
    for e in log {
        if e.ts < last {
            return Err(MetricsError::MalformedLog(format!(
                "timestamp {} precedes {}",
                e.ts.millis(),
                last.millis()
            )));
        }
        last = e.ts;
        let EventBody::PhaseAdvance { to } = e.body else {
            continue;
        };
        let Some(cur) = current else {
            if to != Phase::One {
                return Err(MetricsError::MalformedLog(format!(
                    "first phase advance targets phase {to}"
                )));
            }
            timing.started[0] = Some(e.ts);
            current = Some(Phase::One);
            continue;
        };
        if cur.next() != Some(to) {
            return Err(MetricsError::MalformedLog(format!(
                "advance from phase {cur} to {to}"
            )));
        }
        let transition = match &e.coder {
            None => true,
            Some(_) if cur == Phase::Two => true,
            Some(c) => {
                waiting.insert(c.clone());
                waiting.len() >= 2
            }
        };
        if transition {
            let ix = cur.index().expect("active phase");
            let start = timing.started[ix].expect("phase was entered");
            timing.durations[ix] = Some(e.ts.since(start));
            match to.index() {
                Some(j) => timing.started[j] = Some(e.ts),
                None => timing.finished = Some(e.ts),
            }
            current = Some(to);
            waiting.clear();
        }
    }
    if current.is_none() {
        return Err(MetricsError::MalformedLog("no phase advances".into()));
    }
    Ok(timing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPair<T> {
    pub first: T,
    pub second: T,
}

/// One row of dependent variables for a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub session: String,
    pub condition: Condition,
    pub phase_secs: [Option<f64>; 3],
    pub phase_overrun: [bool; 3],
    pub kappa_phase1: Option<f64>,
    pub kappa_phase3: Option<f64>,
    pub diversity_phase1: LevelPair<usize>,
    pub diversity_phase2: Option<LevelPair<usize>>,
    pub coverage_phase1: LevelPair<Option<f64>>,
    pub coverage_phase2: LevelPair<Option<f64>>,
    /// Indexed by coder position.
    pub completion_phase1: [f64; 2],
    pub completion_phase3: [Option<f64>; 2],
}

pub const CSV_COLUMNS: [&str; 22] = [
    "session",
    "condition",
    "phase1_secs",
    "phase2_secs",
    "phase3_secs",
    "phase1_overrun",
    "phase2_overrun",
    "phase3_overrun",
    "kappa_phase1",
    "kappa_phase3",
    "diversity_p1_first",
    "diversity_p1_second",
    "diversity_p2_first",
    "diversity_p2_second",
    "coverage_p1_first",
    "coverage_p1_second",
    "coverage_p2_first",
    "coverage_p2_second",
    "completion_p1_coder1",
    "completion_p1_coder2",
    "completion_p3_coder1",
    "completion_p3_coder2",
];

fn f6(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricsReport {
    /// Cells in [`CSV_COLUMNS`] order. Durations carry 3 decimals, ratios 6;
    /// missing values are empty cells.
    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![self.session.clone(), self.condition.to_string()];
        r.extend(
            self.phase_secs
                .iter()
                .map(|s| s.map(|v| format!("{v:.3}")).unwrap_or_default()),
        );
        r.extend(self.phase_overrun.iter().map(|b| b.to_string()));
        r.push(f6(self.kappa_phase1));
        r.push(f6(self.kappa_phase3));
        r.push(self.diversity_phase1.first.to_string());
        r.push(self.diversity_phase1.second.to_string());
        match &self.diversity_phase2 {
            Some(d) => {
                r.push(d.first.to_string());
                r.push(d.second.to_string());
            }
            None => r.extend([String::new(), String::new()]),
        }
        for c in [&self.coverage_phase1, &self.coverage_phase2] {
            r.push(f6(c.first));
            r.push(f6(c.second));
        }
        r.extend(self.completion_phase1.iter().map(|c| f6(Some(*c))));
        r.extend(self.completion_phase3.iter().map(|c| f6(*c)));
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Header plus one row per report.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in reports {
        w.write_record(r.csv_record()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

/// Phase-1 codebook derived from the coders' open codes: one entry per
/// canonical label, holding the distinct codes that canonicalize to it.
pub fn derive_initial_codebook<'a, I>(
    owner: &str,
    annotations: I,
    equiv: &EquivalenceMap,
) -> Result<Codebook, MetricsError>
where
    I: IntoIterator<Item = &'a Annotation>,
{
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for a in annotations.into_iter().filter(|a| a.is_live()) {
        groups
            .entry(equiv.canonical_of(&a.code))
            .or_default()
            .insert(a.code.normalized().to_string());
    }
    if groups.is_empty() {
        return Ok(Codebook::empty(owner));
    }
    let entries = groups
        .into_iter()
        .map(|(first, seconds)| {
            Ok(CodeEntry {
                first_level: CodeLabel::new(first)?,
                second_level: seconds
                    .into_iter()
                    .map(|s| CodeLabel::new(s).map(SubCode::new))
                    .collect::<Result<_, CodebookError>>()?,
            })
        })
        .collect::<Result<Vec<_>, CodebookError>>()?;
    Ok(build_codebook(owner, entries)?)
}

fn phase_kappa(
    session: &Session,
    docs: &[&DocId],
    equiv: &EquivalenceMap,
    mapping: Option<&LabelMapping>,
) -> Result<Option<f64>, MetricsError> {
    let live: Vec<&Annotation> = session
        .all_annotations()
        .iter()
        .filter(|a| a.is_live() && docs.contains(&&a.span.document_id))
        .collect();
    let derived;
    let mapping = match mapping {
        Some(m) => m,
        None => {
            derived = LabelMapping::from_labels(live.iter().map(|a| equiv.canonical_of(&a.code)));
            &derived
        }
    };
    let coders = &session.config().coders;
    let mut vectors = [Vec::new(), Vec::new()];
    for id in docs {
        let doc = session.corpus().get(id).expect("session document");
        for (v, coder) in vectors.iter_mut().zip(coders) {
            let own = live.iter().copied().filter(|a| &a.coder == coder);
            v.extend(sentence_labels(own, doc, mapping, equiv)?.0);
        }
    }
    if vectors[0].is_empty() {
        return Ok(None);
    }
    cohen_kappa(&vectors[0], &vectors[1]).map(Some)
}

fn coverage_pair(
    book: &Codebook,
    merged: Option<&Codebook>,
    equiv: &EquivalenceMap,
) -> LevelPair<Option<f64>> {
    let at = |level| merged.and_then(|m| code_coverage(book, m, equiv, level).ok());
    LevelPair {
        first: at(Level::First),
        second: at(Level::Second),
    }
}

/// Dependent variables of `session` as of its latest event.
pub fn session_report(session: &Session) -> Result<MetricsReport, MetricsError> {
    let config = session.config();
    let analysis = &config.analysis;
    let user_equiv = &analysis.equivalence;
    let mapping = analysis
        .label_mapping
        .clone()
        .map(LabelMapping::new)
        .transpose()?;
    let timing = phase_timing(session.log())?;
    let reached_three = session.phase() >= Phase::Three;

    let p1_docs: Vec<&DocId> = config.phase1_documents.iter().map(|d| &d.id).collect();
    let p3_docs = vec![&config.phase3_document.id];
    let p1_annotations = session
        .all_annotations()
        .iter()
        .filter(|a| p1_docs.contains(&&a.span.document_id));
    let initial = match &analysis.initial_codebook {
        Some(cb) => cb.clone(),
        None => derive_initial_codebook(&config.name, p1_annotations, user_equiv)?,
    };
    let equiv1 = user_equiv.extended_with(&EquivalenceMap::from_hierarchy(&initial));
    let kappa_phase1 = phase_kappa(session, &p1_docs, &equiv1, mapping.as_ref())?;
    let kappa_phase3 = match session.codebook() {
        Some(cb) if reached_three => {
            let equiv3 = user_equiv.extended_with(&EquivalenceMap::from_hierarchy(cb));
            phase_kappa(session, &p3_docs, &equiv3, mapping.as_ref())?
        }
        _ => None,
    };

    let merged = analysis.merged_codebook.as_ref();
    let d1 = code_diversity(&initial);
    let empty = Codebook::empty("");
    let completion = |docs: &[&DocId], ix: usize| {
        let coder = &config.coders[ix];
        let mut acc = (0, 0);
        for id in docs {
            let doc = session.corpus().get(id).expect("session document");
            let own = session
                .all_annotations()
                .iter()
                .filter(|a| &a.coder == coder);
            let (c, t) = completion_counts(own, doc);
            acc = (acc.0 + c, acc.1 + t);
        }
        ratio(acc)
    };
    Ok(MetricsReport {
        session: config.name.clone(),
        condition: config.condition,
        phase_secs: timing
            .durations
            .map(|d| d.map(|d| d.as_millis() as f64 / 1000.0)),
        phase_overrun: timing.overruns(config.phase_limits_secs),
        kappa_phase1,
        kappa_phase3,
        diversity_phase1: LevelPair {
            first: d1.0,
            second: d1.1,
        },
        diversity_phase2: session.codebook().map(|cb| {
            let (first, second) = code_diversity(cb);
            LevelPair { first, second }
        }),
        coverage_phase1: coverage_pair(&initial, merged, user_equiv),
        coverage_phase2: coverage_pair(session.codebook().unwrap_or(&empty), merged, user_equiv),
        completion_phase1: [completion(&p1_docs, 0), completion(&p1_docs, 1)],
        completion_phase3: if reached_three {
            [Some(completion(&p3_docs, 0)), Some(completion(&p3_docs, 1))]
        } else {
            [None, None]
        },
    })
}
