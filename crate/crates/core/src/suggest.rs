//! Training-set assembly and the code-suggestion classifier.
//!
//! Coding histories become a set of intents (one per normalized code) with
//! the coded text spans as examples. The classifier featurizes text as
//! TF-IDF weighted unigram and bigram counts and represents each intent by
//! the unit-normalized mean of its example vectors; a query is scored by
//! cosine similarity against every intent centroid.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::clock::Timestamp;
use crate::codebook::{Annotation, CoderId};
use crate::corpus::{Corpus, CorpusError};
use crate::par::Exec;

/// Suggestions returned per request unless the caller asks otherwise.
pub const DEFAULT_K: usize = 5;

/// Below this many centroids scoring runs sequentially regardless of `Exec`.
const PAR_SCORE_THRESHOLD: usize = 256;

/// Which coders' histories feed a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Coder(CoderId),
    Shared,
}

impl Scope {
    pub fn includes(&self, coder: &CoderId) -> bool {
        match self {
            Scope::Coder(c) => c == coder,
            Scope::Shared => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSet {
    /// normalized code -> example texts
    intents: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct NluFile {
    nlu: Vec<NluIntent>,
}

#[derive(Serialize, Deserialize)]
struct NluIntent {
    intent: String,
    examples: Vec<String>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one example; blank text is ignored. Returns whether the pair was new.
    pub fn add(&mut self, intent: &str, text: &str) -> bool {
        let text = text.trim();
        if text.is_empty() || intent.is_empty() {
            return false;
        }
        self.intents
            .entry(intent.to_string())
            .or_default()
            .insert(text.to_string())
    }

    pub fn intents(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.intents.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn examples(&self, intent: &str) -> Option<&BTreeSet<String>> {
        self.intents.get(intent)
    }

    pub fn intent_count(&self) -> usize {
        self.intents.len()
    }

    pub fn example_count(&self) -> usize {
        self.intents.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = NluFile {
            nlu: self
                .intents
                .iter()
                .map(|(k, v)| NluIntent {
                    intent: k.clone(),
                    examples: v.iter().cloned().collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("training set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let file: NluFile = serde_json::from_str(s)?;
        let mut ts = TrainingSet::new();
        for i in file.nlu {
            let intent = crate::codebook::normalize_text(&i.intent);
            for e in i.examples {
                ts.add(&intent, &e);
            }
        }
        Ok(ts)
    }

    /// The intent/examples layout of an `nlu.yml` training file.
    pub fn to_nlu_yaml(&self) -> String {
        let mut out = String::from("version: \"3.1\"\nnlu:\n");
        for (intent, examples) in &self.intents {
            out.push_str(&format!(
                "- intent: {}\n  examples: |\n",
                serde_json::to_string(intent).unwrap()
            ));
            for e in examples {
                let line = e.split_whitespace().collect::<Vec<_>>().join(" ");
                out.push_str(&format!("    - {line}\n"));
            }
        }
        out
    }
}

/// Group coded spans into intents.
///
/// Spans sharing a normalized code land in one intent; a span carrying two
/// different codes is an example of both; distinct surface forms stay
/// distinct intents; duplicate (intent, text) pairs collapse; deleted
/// annotations are skipped. With [`Scope::Coder`] only that coder's
/// annotations are used.
pub fn assemble_training_set(
    histories: &[&[Annotation]],
    corpus: &Corpus,
    scope: &Scope,
) -> Result<TrainingSet, CorpusError> {
    let mut ts = TrainingSet::new();
    for history in histories {
        for a in history.iter() {
            if a.deleted || !scope.includes(&a.coder) {
                continue;
            }
            let text = corpus.span_text(&a.span)?;
            ts.add(a.code.normalized(), text);
        }
    }
    Ok(ts)
}

/// Lowercased Unicode words followed by adjacent-word bigrams.
pub fn terms(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.unicode_words().collect();
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    out.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector(Vec<(u32, f64)>);

impl SparseVector {
    fn from_map(m: BTreeMap<u32, f64>) -> Self {
        SparseVector(m.into_iter().filter(|(_, v)| *v != 0.0).collect())
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for (_, v) in &mut self.0 {
                *v /= n;
            }
        }
        self
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.0.len() && j < other.0.len() {
            let (a, b) = (self.0[i], other.0[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub label: String,
    pub vector: SparseVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionModel {
    pub version: u64,
    vocabulary: BTreeMap<String, u32>,
    idf: Vec<f64>,
    centroids: Vec<Centroid>,
    pub trained_at: Timestamp,
    /// (intents, examples)
    pub training_size: (usize, usize),
}

impl SuggestionModel {
    /// A model with no intents; serves nothing.
    pub fn empty(version: u64, at: Timestamp) -> Self {
        SuggestionModel {
            version,
            vocabulary: BTreeMap::new(),
            idf: Vec::new(),
            centroids: Vec::new(),
            trained_at: at,
            training_size: (0, 0),
        }
    }

    pub fn intent_count(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, u32> {
        &self.vocabulary
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    /// Unit TF-IDF vector of `text` over this model's vocabulary; unknown
    /// terms are dropped.
    pub fn featurize(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for t in terms(text) {
            if let Some(&ix) = self.vocabulary.get(&t) {
                *counts.entry(ix).or_default() += 1.0;
            }
        }
        for (ix, v) in counts.iter_mut() {
            *v *= self.idf[*ix as usize];
        }
        SparseVector::from_map(counts).normalized()
    }

    pub fn predict(&self, text: &str, k: usize) -> SuggestionSet {
        self.predict_with(text, k, Exec::available())
    }

    pub fn predict_with(&self, text: &str, k: usize, exec: Exec) -> SuggestionSet {
        if self.centroids.is_empty() || k == 0 {
            return SuggestionSet::empty(self.version);
        }
        let q = self.featurize(text);
        let exec = if self.centroids.len() < PAR_SCORE_THRESHOLD {
            Exec::Sequential
        } else {
            exec
        };
        let mut scored: Vec<Suggestion> = exec.map(&self.centroids, |c| Suggestion {
            label: c.label.clone(),
            confidence: q.dot(&c.vector).clamp(0.0, 1.0),
        });
        scored.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| a.label.cmp(&b.label))
        });
        scored.truncate(k);
        SuggestionSet {
            items: scored,
            model_version: self.version,
        }
    }

    /// Predict many queries; parallel over queries under [`Exec::Parallel`].
    pub fn predict_batch(&self, texts: &[String], k: usize, exec: Exec) -> Vec<SuggestionSet> {
        exec.map(texts, |t| self.predict_with(t, k, Exec::Sequential))
    }
}

pub fn train(ts: &TrainingSet, version: u64, trained_at: Timestamp) -> SuggestionModel {
    train_with(ts, version, trained_at, Exec::available())
}

/// Fit the centroid classifier. Deterministic for a given training set.
pub fn train_with(
    ts: &TrainingSet,
    version: u64,
    trained_at: Timestamp,
    exec: Exec,
) -> SuggestionModel {
    // IDF is computed over distinct example texts.
    let docs: Vec<&String> = ts
        .intents
        .values()
        .flatten()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tokenized: Vec<Vec<String>> = exec.map(&docs, |d| terms(d));

    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for toks in &tokenized {
        for t in toks.iter().collect::<BTreeSet<_>>() {
            *df.entry(t.as_str()).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let vocabulary: BTreeMap<String, u32> = df
        .keys()
        .enumerate()
        .map(|(i, t)| (t.to_string(), i as u32))
        .collect();
    let idf: Vec<f64> = df
        .values()
        .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
        .collect();

    let mut model = SuggestionModel {
        version,
        vocabulary,
        idf,
        centroids: Vec::new(),
        trained_at,
        training_size: (ts.intent_count(), ts.example_count()),
    };

    let vectors: Vec<SparseVector> = exec.map(&docs, |d| model.featurize(d));
    let by_text: BTreeMap<&str, &SparseVector> = docs
        .iter()
        .map(|d| d.as_str())
        .zip(vectors.iter())
        .collect();

    let intents: Vec<(&String, &BTreeSet<String>)> = ts.intents.iter().collect();
    model.centroids = exec.map(&intents, |(label, examples)| {
        let mut sum: BTreeMap<u32, f64> = BTreeMap::new();
        for e in examples.iter() {
            for &(ix, v) in by_text[e.as_str()].entries() {
                *sum.entry(ix).or_default() += v;
            }
        }
        let m = examples.len() as f64;
        for v in sum.values_mut() {
            *v /= m;
        }
        Centroid {
            label: (*label).clone(),
            vector: SparseVector::from_map(sum).normalized(),
        }
    });
    model
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionSet {
    pub items: Vec<Suggestion>,
    pub model_version: u64,
}

impl SuggestionSet {
    pub fn empty(model_version: u64) -> Self {
        SuggestionSet {
            items: Vec::new(),
            model_version,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.items.iter().map(|s| s.label.as_str()).collect()
    }
}
