//! Acceptance driver: runs criteria 1 to 9 in order and prints one
//! PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use qcollab_core::clock::{Clock, ManualClock, Timestamp};
use qcollab_core::codebook::{
    build_codebook, Annotation, AnnotationId, CodeEntry, CodeLabel, Codebook, CoderId,
    EquivalenceMap, Level,
};
use qcollab_core::corpus::{Corpus, DocId, Document, DocumentSource, SelectionSpan};
use qcollab_core::metrics::{
    code_coverage, code_diversity, cohen_kappa, phase_timing, reports_to_csv,
};
use qcollab_core::par::Exec;
use qcollab_core::replay::{replay, replay_many, replay_text, replay_to_csv, ReplayScript};
use qcollab_core::serving::{RetrainMode, ServingConfig, ServingEngine, SlotId};
use qcollab_core::session::{
    Condition, Effect, EventBody, Phase, Session, SessionConfig, SessionError, SessionEvent,
    SuggestPayload,
};
use qcollab_core::suggest::{assemble_training_set, train, Scope, SuggestionModel, TrainingSet};
use qcollab_service::config::RetrainChoice;
use qcollab_service::{router, AppState, ServiceConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixtures().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const FIXTURE_LOGS: [&str; 3] = ["pair_A", "pair_B", "pair_D_smoke"];

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("kappa oracle", kappa_oracle),
        ("coverage and diversity exactness", coverage_diversity),
        ("training-set assembly", training_assembly),
        ("suggestion contract", suggestion_contract),
        ("hot-swap liveness", hot_swap_liveness),
        ("condition semantics", condition_semantics),
        ("replay determinism", replay_determinism),
        ("crash recovery", crash_recovery),
        ("timing and reminders", timing_reminders),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = t0.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{took:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {why} [{took:.2?}]", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- criterion 1

/// κ from an explicit contingency table of observed proportions.
fn kappa_table_oracle(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mut table: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1.0;
    }
    let labels: BTreeSet<u32> = a.iter().chain(b).copied().collect();
    let po: f64 = labels
        .iter()
        .map(|l| table.get(&(*l, *l)).unwrap_or(&0.0))
        .sum::<f64>()
        / n;
    let pe: f64 = labels
        .iter()
        .map(|l| {
            let row: f64 = table
                .iter()
                .filter(|((x, _), _)| x == l)
                .map(|(_, c)| c)
                .sum();
            let col: f64 = table
                .iter()
                .filter(|((_, y), _)| y == l)
                .map(|(_, c)| c)
                .sum();
            (row / n) * (col / n)
        })
        .sum();
    if pe == 1.0 {
        1.0
    } else {
        (po - pe) / (1.0 - pe)
    }
}

fn kappa_oracle() -> Outcome {
    let t0 = Instant::now();
    let hand: [(&[u32], &[u32], f64); 5] = [
        (&[1, 1, 0, 0], &[1, 0, 0, 0], 0.5),
        (&[1, 0], &[0, 1], -1.0),
        (&[1, 2, 3, 1], &[1, 2, 3, 1], 1.0),
        (&[4, 4, 4], &[4, 4, 4], 1.0),
        (&[0, 1, 1, 2, 5], &[0, 1, 1, 2, 5], 1.0),
    ];
    for (a, b, want) in hand {
        let got = cohen_kappa(a, b).map_err(|e| e.to_string())?;
        check!(got == want, "kappa({a:?}, {b:?}) = {got}, expected {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=50);
        let alphabet = rng.gen_range(1..=6u32);
        let a: Vec<u32> = (0..len).map(|_| rng.gen_range(0..alphabet)).collect();
        let b: Vec<u32> = (0..len).map(|_| rng.gen_range(0..alphabet)).collect();
        let got = cohen_kappa(&a, &b).map_err(|e| e.to_string())?;
        let want = kappa_table_oracle(&a, &b);
        let diff = (got - want).abs();
        worst = worst.max(diff);
        check!(diff <= 1e-12, "a={a:?} b={b:?}: {got} vs oracle {want}");
    }
    let took = t0.elapsed();
    check!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!(
        "1000 pairs, max |diff| {worst:.1e}, 5 hand cases exact"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn flat_book(owner: &str, labels: &[&str]) -> Codebook {
    build_codebook(
        owner,
        labels
            .iter()
            .map(|l| CodeEntry::new(l, &[]).unwrap())
            .collect(),
    )
    .unwrap()
}

fn coverage_diversity() -> Outcome {
    let reference =
        Codebook::from_json(&fixture("reference_codebook.json")).map_err(|e| e.to_string())?;
    let d = code_diversity(&reference);
    check!(d == (5, 10), "reference diversity {d:?}");

    let none = EquivalenceMap::new();
    let abc = flat_book("coders", &["a", "b", "c"]);
    let abde = flat_book("merged", &["a", "b", "d", "e"]);
    let cases = [
        (code_coverage(&abc, &abde, &none, Level::First), 0.5),
        (code_coverage(&abde, &abde, &none, Level::First), 1.0),
        (
            code_coverage(&reference, &reference, &none, Level::Second),
            1.0,
        ),
        (
            code_coverage(&flat_book("x", &["p", "q"]), &abde, &none, Level::First),
            0.0,
        ),
    ];
    for (got, want) in cases {
        let got = got.map_err(|e| e.to_string())?;
        check!(got == want, "coverage {got}, expected {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = [
        "career",
        "Career ",
        "goal",
        "hobby",
        "art",
        "music",
        "LEADING",
        "leadership",
        "team",
        "teamwork",
        "initiative",
        "family",
    ];
    for _ in 0..500 {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for l in &pool[1..5] {
            if rng.gen_bool(0.5) {
                pairs.push((l, ["canon x", "canon y"][rng.gen_range(0..2)]));
            }
        }
        let equiv = EquivalenceMap::from_pairs(pairs).map_err(|e| e.to_string())?;
        let book = |owner: &str, rng: &mut ChaCha8Rng| {
            let firsts: BTreeSet<String> = (0..rng.gen_range(1..6))
                .map(|_| pool[rng.gen_range(0..pool.len())].trim().to_lowercase())
                .collect();
            let entries = firsts
                .iter()
                .map(|f| {
                    let seconds: BTreeSet<String> = (0..rng.gen_range(0..3))
                        .map(|_| pool[rng.gen_range(0..pool.len())].trim().to_lowercase())
                        .filter(|s| s != f)
                        .collect();
                    let seconds: Vec<&str> = seconds.iter().map(String::as_str).collect();
                    CodeEntry::new(f, &seconds).unwrap()
                })
                .collect();
            build_codebook(owner, entries).unwrap()
        };
        let coders = book("coders", &mut rng);
        let merged = book("merged", &mut rng);
        for level in [Level::First, Level::Second] {
            let m = merged.canonical_labels(&equiv, level);
            let c = coders.canonical_labels(&equiv, level);
            match code_coverage(&coders, &merged, &equiv, level) {
                Ok(v) => {
                    check!((0.0..=1.0).contains(&v), "coverage {v} out of range");
                    check!(
                        (v == 1.0) == m.is_subset(&c),
                        "coverage {v} vs subset {}",
                        m.is_subset(&c)
                    );
                }
                Err(_) => check!(m.is_empty(), "coverage failed on nonempty merged book"),
            }
        }
    }
    Ok(
        "reference codebook (5, 10); 0.5 / 1.0 / 0.0 fixtures; 500 random codebook pairs in [0,1]"
            .into(),
    )
}

// ---------------------------------------------------------------- criterion 3

const SURFACE_FORMS: [&str; 9] = [
    "Career Goal",
    "career goal",
    "  CAREER   goal ",
    "Careergoal",
    "Leadership",
    "leadership ",
    "Team work",
    "Teamwork",
    "Initiative",
];

fn canon(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn training_assembly() -> Outcome {
    let docs = fixture_config("pair_D_smoke");
    let mut corpus = Corpus::new();
    for d in docs.phase1_documents.iter().chain([&docs.phase3_document]) {
        corpus.insert(Document::from(d.clone())).unwrap();
    }
    let doc_list: Vec<Document> = corpus.documents().cloned().collect();
    let coders = [CoderId::new("c1"), CoderId::new("c2")];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dual_seen = 0;
    for _ in 0..300 {
        let mut history: Vec<Annotation> = Vec::new();
        for i in 0..rng.gen_range(0..30) {
            let (span, coder) = if !history.is_empty() && rng.gen_bool(0.25) {
                let prev = &history[rng.gen_range(0..history.len())];
                (prev.span.clone(), prev.coder.clone())
            } else {
                let doc = &doc_list[rng.gen_range(0..doc_list.len())];
                let start = rng.gen_range(0..doc.len() - 1);
                let end = rng.gen_range(start + 1..=doc.len().min(start + 80));
                let span = SelectionSpan {
                    document_id: doc.id().clone(),
                    start,
                    end,
                };
                (span, coders[rng.gen_range(0..2)].clone())
            };
            let code =
                CodeLabel::new(SURFACE_FORMS[rng.gen_range(0..SURFACE_FORMS.len())]).unwrap();
            let mut a = Annotation::new(AnnotationId(i), coder, span, code, Timestamp(i as i64));
            if rng.gen_bool(0.2) {
                a.delete(Timestamp(i as i64 + 1));
            }
            history.push(a);
        }
        let (h1, h2): (Vec<Annotation>, Vec<Annotation>) =
            history.iter().cloned().partition(|a| a.coder == coders[0]);
        for scope in [
            Scope::Shared,
            Scope::Coder(coders[0].clone()),
            Scope::Coder(coders[1].clone()),
        ] {
            let ts =
                assemble_training_set(&[&h1, &h2], &corpus, &scope).map_err(|e| e.to_string())?;
            let live: Vec<&Annotation> = history
                .iter()
                .filter(|a| !a.deleted && scope.includes(&a.coder))
                .collect();
            // examples are trimmed; whitespace-only spans carry no example
            let text_of = |a: &Annotation| corpus.span_text(&a.span).unwrap().trim().to_string();
            let mut want: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
            for a in live.iter().filter(|a| !text_of(a).is_empty()) {
                want.entry(canon(a.code.raw()))
                    .or_default()
                    .insert(text_of(a));
            }
            let got: BTreeMap<String, BTreeSet<String>> = ts
                .intents()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect();
            // same-code grouping and surface-form distinctness
            check!(
                got == want,
                "intents differ from oracle: {got:?} vs {want:?}"
            );
            let distinct_codes: BTreeSet<String> = live
                .iter()
                .filter(|a| !text_of(a).is_empty())
                .map(|a| canon(a.code.raw()))
                .collect();
            check!(ts.intent_count() == distinct_codes.len(), "intent count");
            // dedup
            let pairs: BTreeSet<(String, String)> = live
                .iter()
                .filter(|a| !text_of(a).is_empty())
                .map(|a| (canon(a.code.raw()), text_of(a)))
                .collect();
            check!(
                ts.example_count() == pairs.len(),
                "example count {} vs {}",
                ts.example_count(),
                pairs.len()
            );
            // dual-code duplication
            let mut codes_by_text: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
            for (c, t) in &pairs {
                codes_by_text
                    .entry(t.as_str())
                    .or_default()
                    .insert(c.clone());
            }
            for (text, codes) in codes_by_text.iter().filter(|(_, c)| c.len() > 1) {
                dual_seen += 1;
                for c in codes {
                    check!(
                        ts.examples(c).is_some_and(|e| e.contains(*text)),
                        "dual-coded text missing from {c}"
                    );
                }
            }
            // soft delete exclusion
            for a in history
                .iter()
                .filter(|a| a.deleted && scope.includes(&a.coder))
            {
                let pair = (canon(a.code.raw()), text_of(a));
                if !pairs.contains(&pair) {
                    check!(
                        !ts.examples(&pair.0).is_some_and(|e| e.contains(&pair.1)),
                        "deleted annotation {} leaked into training",
                        a.id.0
                    );
                }
            }
        }
    }
    check!(dual_seen > 0, "no dual-coded spans were generated");
    Ok(format!(
        "300 random histories x 3 scopes, {dual_seen} dual-coded spans"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn word(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| rng.gen_range(b'a'..=b'z') as char)
        .collect()
}

/// Dense TF-IDF centroid scores over whitespace tokens and bigrams.
fn cosine_oracle(ts: &TrainingSet, query: &str) -> BTreeMap<String, f64> {
    fn grams(text: &str) -> Vec<String> {
        let w: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        let mut out = w.clone();
        for i in 1..w.len() {
            out.push(format!("{} {}", w[i - 1], w[i]));
        }
        out
    }
    let docs: BTreeSet<&String> = ts.intents().flat_map(|(_, e)| e.iter()).collect();
    let doc_grams: Vec<BTreeSet<String>> = docs
        .iter()
        .map(|d| grams(d).into_iter().collect())
        .collect();
    let vocab: BTreeSet<String> = doc_grams.iter().flatten().cloned().collect();
    let vocab: Vec<String> = vocab.into_iter().collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> = vocab
        .iter()
        .map(|t| {
            let df = doc_grams.iter().filter(|g| g.contains(t)).count() as f64;
            ((1.0 + n) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let unit = |text: &str| -> Vec<f64> {
        let g = grams(text);
        let mut v: Vec<f64> = vocab
            .iter()
            .zip(&idf)
            .map(|(t, w)| g.iter().filter(|x| *x == t).count() as f64 * w)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    };
    let q = unit(query);
    ts.intents()
        .map(|(label, examples)| {
            let mut c = vec![0.0; vocab.len()];
            for e in examples {
                for (ci, x) in c.iter_mut().zip(unit(e)) {
                    *ci += x / examples.len() as f64;
                }
            }
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = q.iter().zip(&c).map(|(a, b)| a * b).sum();
            let score = if norm > 0.0 { dot / norm } else { 0.0 };
            (label.to_string(), score.clamp(0.0, 1.0))
        })
        .collect()
}

fn suggestion_contract() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words: Vec<String> = (0..40).map(|_| word(&mut rng, 5)).collect();
    let sentence = |rng: &mut ChaCha8Rng, n: usize| -> String {
        (0..n)
            .map(|_| words[rng.gen_range(0..words.len())].clone())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut queries_checked = 0;
    for m in 0..150 {
        let mut ts = TrainingSet::new();
        let intents = rng.gen_range(1..=20);
        for i in 0..intents {
            for _ in 0..rng.gen_range(1..=4) {
                let len = rng.gen_range(3..=12);
                ts.add(&format!("intent {i:02}"), &sentence(&mut rng, len));
            }
        }
        let model = train(&ts, 1, Timestamp::ZERO);
        let mut queries: Vec<String> = ts
            .intents()
            .flat_map(|(_, e)| e.iter().cloned())
            .take(4)
            .collect();
        queries.push(sentence(&mut rng, 6));
        queries.push(format!("{} unseenword", sentence(&mut rng, 2)));
        queries.push("zzzz qqqq".into());
        queries.push(String::new());
        for q in &queries {
            let top = model.predict(q, 5);
            check!(
                top.items.len() <= 5.min(ts.intent_count()),
                "model {m}: {} items",
                top.items.len()
            );
            check!(
                top.items
                    .windows(2)
                    .all(|w| w[0].confidence >= w[1].confidence),
                "model {m}: confidences increase"
            );
            check!(
                top.items
                    .iter()
                    .all(|s| (0.0..=1.0).contains(&s.confidence)),
                "model {m}: confidence out of range"
            );
            let seq = model.predict_with(q, 5, Exec::Sequential);
            let par = model.predict_with(q, 5, Exec::Parallel);
            check!(seq == par, "model {m}: sequential and parallel differ");

            let oracle = cosine_oracle(&ts, q);
            let full = model.predict(q, ts.intent_count());
            let mut sorted: Vec<f64> = oracle.values().copied().collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            check!(
                full.items.len() == oracle.len(),
                "model {m}: ranking length"
            );
            for (i, s) in full.items.iter().enumerate() {
                check!(
                    (s.confidence - sorted[i]).abs() <= 1e-9
                        && (oracle[&s.label] - s.confidence).abs() <= 1e-9,
                    "model {m} query {q:?}: rank {i} {} {} vs oracle {}",
                    s.label,
                    s.confidence,
                    oracle[&s.label]
                );
            }
            queries_checked += 1;
        }
    }

    let mut single_min = 1.0f64;
    for _ in 0..200 {
        let mut ts = TrainingSet::new();
        let len = rng.gen_range(1..=15);
        let text = sentence(&mut rng, len);
        ts.add("only", &text);
        let model = train(&ts, 1, Timestamp::ZERO);
        let top = model.predict(&text, 5);
        check!(
            top.items.len() == 1,
            "single-intent model returned {} items",
            top.items.len()
        );
        single_min = single_min.min(top.items[0].confidence);
        check!(
            (top.items[0].confidence - 1.0).abs() <= 1e-12,
            "verbatim confidence {}",
            top.items[0].confidence
        );
    }

    // 50 intents x 3 examples: each intent has its own topic words mixed
    // with filler shared by every intent.
    let filler: Vec<String> = (0..30).map(|_| word(&mut rng, 4)).collect();
    let mut ts = TrainingSet::new();
    for i in 0..50 {
        let topic: Vec<String> = (0..5).map(|_| word(&mut rng, 7)).collect();
        for _ in 0..3 {
            let mut toks: Vec<&String> = topic.choose_multiple(&mut rng, 3).collect();
            toks.extend(filler.choose_multiple(&mut rng, 4));
            toks.shuffle(&mut rng);
            let text = toks
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            ts.add(&format!("intent {i:02}"), &text);
        }
    }
    check!(
        ts.intent_count() == 50 && ts.example_count() == 150,
        "synthetic set shape"
    );
    let model = train(&ts, 1, Timestamp::ZERO);
    let mut hits = 0;
    for (label, examples) in ts.intents() {
        for e in examples {
            if model.predict(e, 1).labels() == [label] {
                hits += 1;
            }
        }
    }
    check!(hits == 150, "top-1 retrieval {hits}/150");
    let took = t0.elapsed();
    check!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!(
        "{queries_checked} queries on 150 random models match the oracle; single-intent verbatim min {single_min}; retrieval {hits}/150"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn tiny_model(version: u64) -> SuggestionModel {
    let mut ts = TrainingSet::new();
    ts.add("leadership", "I led the robotics team");
    ts.add("career goal", "I want to become a doctor");
    train(&ts, version, Timestamp::ZERO)
}

fn hot_swap_liveness() -> Outcome {
    // 1. 600 requests over 60 virtual seconds against a background worker
    // whose every retrain takes 5 virtual seconds.
    let clock = Arc::new(ManualClock::new(Timestamp::ZERO));
    let engine = Arc::new(ServingEngine::new(
        ServingConfig {
            min_retrain_interval: Duration::from_secs(10),
            mode: RetrainMode::Background,
            training_delay: Duration::from_secs(5),
        },
        Timestamp::ZERO,
    ));
    let worker = engine.spawn_worker(clock.clone() as Arc<dyn Clock>);
    let mut ts = TrainingSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut during, mut idle) = (Vec::new(), Vec::new());
    let mut max_wall = Duration::ZERO;
    for i in 0..600 {
        clock.set(Timestamp(i * 100));
        ts.add(
            &format!("code {}", i % 7),
            &format!("example {} {}", i, word(&mut rng, 5)),
        );
        engine.notify_history_changed(ts.clone(), clock.now());
        let stats = engine.stats();
        let training = stats.retrains_started > stats.retrains_completed;
        let (v0, w0) = (clock.now(), Instant::now());
        let r = engine.request_suggestions("example text", 5);
        let (v1, wall) = (clock.now(), w0.elapsed());
        check!(r.is_ok(), "request {i} failed: {r:?}");
        max_wall = max_wall.max(wall);
        if training {
            during.push(v1.0 - v0.0);
        } else {
            idle.push(v1.0 - v0.0);
        }
        // give the worker a chance to observe the new time
        std::thread::sleep(Duration::from_micros(300));
    }
    clock.set(Timestamp(70_000));
    let deadline = Instant::now() + Duration::from_secs(5);
    while engine.stats().retrains_started > engine.stats().retrains_completed
        && Instant::now() < deadline
    {
        std::thread::sleep(Duration::from_millis(2));
    }
    worker.stop();
    let stats = engine.stats();
    check!(!during.is_empty(), "no request overlapped a retrain");
    check!(
        stats.retrains_completed >= 5,
        "only {} retrains completed",
        stats.retrains_completed
    );
    check!(
        during.iter().chain(&idle).all(|d| *d == 0),
        "virtual service time depends on training state"
    );
    check!(
        max_wall < Duration::from_millis(250),
        "slowest request took {max_wall:?}"
    );

    // 2. Randomized interleavings of swap steps and requests.
    let engine = ServingEngine::new(ServingConfig::default(), Timestamp::ZERO);
    let base = tiny_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut observations = 0u64;
    for v in 1..=10_000u64 {
        let mut model = base.clone();
        model.version = v;
        let mut plan = engine.begin_swap(model).map_err(|e| e.to_string())?;
        loop {
            for _ in 0..rng.gen_range(0..3) {
                let p = engine.slot_state(SlotId::Primary);
                let s = engine.slot_state(SlotId::Secondary);
                check!(p.is_ready() || s.is_ready(), "no ready slot at version {v}");
                let r = engine.request_suggestions("I led the team", 2);
                check!(
                    r.as_ref().is_ok_and(|r| r.model_version + 1 >= v),
                    "request failed: {r:?}"
                );
                observations += 1;
            }
            if !plan.step() {
                break;
            }
            check!(
                engine.slot_state(SlotId::Primary).is_ready()
                    || engine.slot_state(SlotId::Secondary).is_ready(),
                "no ready slot mid-swap at version {v}"
            );
            observations += 1;
        }
    }

    // 3. Concurrent readers against a writer swapping as fast as it can.
    let engine = Arc::new(ServingEngine::new(
        ServingConfig::default(),
        Timestamp::ZERO,
    ));
    let stop = Arc::new(AtomicBool::new(false));
    let served = Arc::new(AtomicU64::new(0));
    let failures = Arc::new(AtomicU64::new(0));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (e, stop, served, failures) = (
                engine.clone(),
                stop.clone(),
                served.clone(),
                failures.clone(),
            );
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match e.request_suggestions("I led the team", 2) {
                        Ok(_) => served.fetch_add(1, Ordering::Relaxed),
                        Err(_) => failures.fetch_add(1, Ordering::Relaxed),
                    };
                }
            })
        })
        .collect();
    for v in 1..=2000 {
        let mut m = base.clone();
        m.version = v;
        engine.swap_in(m).map_err(|e| e.to_string())?;
    }
    stop.store(true, Ordering::Relaxed);
    for r in readers {
        r.join().unwrap();
    }
    let failures = failures.load(Ordering::Relaxed);
    check!(failures == 0, "{failures} concurrent requests failed");
    Ok(format!(
        "600 requests ({} during retrains), {} retrains, max wall {max_wall:.2?}; 10000 interleavings ({observations} checks); {} concurrent requests, 0 failures",
        during.len(),
        stats.retrains_completed,
        served.load(Ordering::Relaxed)
    ))
}

// ---------------------------------------------------------------- criterion 6

fn fixture_config(name: &str) -> SessionConfig {
    ReplayScript::parse(&fixture(&format!("{name}.jsonl")))
        .unwrap()
        .config
}

fn phase1_sentences(config: &SessionConfig) -> Vec<(DocId, i64, i64)> {
    config
        .phase1_documents
        .iter()
        .flat_map(|d| {
            let doc = Document::from(d.clone());
            doc.sentences()
                .iter()
                .map(|s| (d.id.clone(), s.start as i64, s.end as i64))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn session_for(condition: Condition) -> (Session, Vec<(DocId, i64, i64)>) {
    let mut config = fixture_config("pair_D_smoke");
    config.condition = condition;
    config.analysis = Default::default();
    let sentences = phase1_sentences(&config);
    (Session::create(config, Timestamp::ZERO).unwrap(), sentences)
}

fn suggest_event(
    ts: i64,
    coder: &CoderId,
    s: &(DocId, i64, i64),
    k: Option<usize>,
) -> SessionEvent {
    SessionEvent::new(
        Timestamp(ts),
        Some(coder),
        EventBody::RequestSuggestions(SuggestPayload {
            doc: s.0.clone(),
            start: s.1,
            end: s.2,
            k,
        }),
    )
}

fn suggestions_of(effects: &[Effect]) -> Option<(Vec<String>, bool, String)> {
    effects.iter().find_map(|e| match e {
        Effect::Suggestions {
            suggestions,
            disabled,
            ..
        } => Some((
            suggestions.labels().iter().map(|s| s.to_string()).collect(),
            *disabled,
            serde_json::to_string(e).unwrap(),
        )),
        _ => None,
    })
}

const CODES: [&str; 6] = [
    "career goal",
    "leadership",
    "hobby",
    "teamwork",
    "initiative",
    "family",
];

fn condition_semantics() -> Outcome {
    let c1 = CoderId::new("c1");
    let c2 = CoderId::new("c2");

    // (a)
    let (mut s, sent) = session_for(Condition::A);
    check!(s.engines().is_empty(), "condition A has engines");
    s.apply_event(SessionEvent::annotate(
        Timestamp(1000),
        &c1,
        "t1",
        sent[0].1,
        sent[0].2,
        "career",
    ))
    .map_err(|e| e.to_string())?;
    for (i, coder) in [&c1, &c2].into_iter().enumerate() {
        let fx = s
            .apply_event(suggest_event(2000 + i as i64, coder, &sent[0], None))
            .map_err(|e| e.to_string())?;
        let (labels, disabled, _) = suggestions_of(&fx).ok_or("no suggestions effect")?;
        check!(
            disabled && labels.is_empty(),
            "condition A served {labels:?}"
        );
    }

    // (b)
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut compared = 0;
    for _ in 0..30 {
        let mut c2_events = Vec::new();
        let mut c1_events = Vec::new();
        for i in 0..40i64 {
            let s = &sent[rng.gen_range(0..sent.len())];
            let code = CODES[rng.gen_range(0..CODES.len())];
            c2_events.push(if rng.gen_bool(0.6) {
                SessionEvent::annotate(
                    Timestamp(i * 4000 + 2000),
                    &c2,
                    s.0.as_str(),
                    s.1,
                    s.2,
                    code,
                )
            } else {
                suggest_event(i * 4000 + 2000, &c2, s, None)
            });
            let s = &sent[rng.gen_range(0..sent.len())];
            let code = CODES[rng.gen_range(0..CODES.len())];
            c1_events.push(if rng.gen_bool(0.7) {
                SessionEvent::annotate(
                    Timestamp(i * 4000 + 1000),
                    &c1,
                    s.0.as_str(),
                    s.1,
                    s.2,
                    code,
                )
            } else {
                suggest_event(i * 4000 + 1000, &c1, s, None)
            });
        }
        let run = |with_c1: bool| -> Result<Vec<String>, SessionError> {
            let (mut s, _) = session_for(Condition::B);
            let mut events: Vec<&SessionEvent> = c2_events.iter().collect();
            if with_c1 {
                events.extend(&c1_events);
            }
            events.sort_by_key(|e| e.ts);
            let mut out = Vec::new();
            for e in events {
                let fx = s.apply_event(e.clone())?;
                if e.coder.as_ref() == Some(&c2) {
                    out.extend(suggestions_of(&fx).map(|x| x.2));
                }
            }
            Ok(out)
        };
        let alone = run(false).map_err(|e| e.to_string())?;
        let together = run(true).map_err(|e| e.to_string())?;
        check!(
            alone == together,
            "coder2 responses changed with coder1 activity"
        );
        check!(
            alone.iter().any(|j| j.contains("\"label\"")),
            "coder2 never received a suggestion"
        );
        compared += alone.len();
    }

    // (c)
    let mut rejected = 0;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (mut s, _) = session_for(Condition::C);
        let mut ops: Vec<bool> = (0..rng.gen_range(2..8)).map(|_| true).collect();
        ops.extend((0..rng.gen_range(1..5)).map(|_| false));
        ops.shuffle(&mut rng);
        let mut t = 0i64;
        let mut c1_codes = BTreeSet::new();
        for is_c1 in ops {
            t += 1000;
            let x = &sent[rng.gen_range(0..sent.len())];
            let code = CODES[rng.gen_range(0..CODES.len())];
            let who = if is_c1 { &c1 } else { &c2 };
            let r = s.apply_event(SessionEvent::annotate(
                Timestamp(t),
                who,
                x.0.as_str(),
                x.1,
                x.2,
                code,
            ));
            if is_c1 {
                r.map_err(|e| e.to_string())?;
                c1_codes.insert(code.to_string());
            } else {
                check!(
                    matches!(r, Err(SessionError::OrderingViolation)),
                    "seed {seed}: coder2 annotation before coder1 finished gave {r:?}"
                );
                rejected += 1;
            }
        }
        t += 1000;
        s.apply_event(SessionEvent::advance(Timestamp(t), Some(&c1), Phase::Two))
            .map_err(|e| e.to_string())?;
        let x = &sent[rng.gen_range(0..sent.len())];
        let fx = s
            .apply_event(suggest_event(t + 1000, &c2, x, Some(50)))
            .map_err(|e| e.to_string())?;
        let (labels, disabled, _) = suggestions_of(&fx).ok_or("no suggestions effect")?;
        let labels: BTreeSet<String> = labels.into_iter().collect();
        check!(
            !disabled && labels == c1_codes,
            "seed {seed}: first suggestions {labels:?}, coder1 coded {c1_codes:?}"
        );
        s.apply_event(SessionEvent::annotate(
            Timestamp(t + 2000),
            &c2,
            x.0.as_str(),
            x.1,
            x.2,
            "family",
        ))
        .map_err(|e| format!("seed {seed}: coder2 still blocked: {e}"))?;
    }

    // (d)
    let probe = &sent[2];
    let (mut base, _) = session_for(Condition::D);
    let fx = base
        .apply_event(suggest_event(2000, &c2, probe, None))
        .map_err(|e| e.to_string())?;
    let without = suggestions_of(&fx).ok_or("no suggestions effect")?;
    let (mut witness, _) = session_for(Condition::D);
    witness
        .apply_event(SessionEvent::annotate(
            Timestamp(1000),
            &c1,
            probe.0.as_str(),
            probe.1,
            probe.2,
            "leadership",
        ))
        .map_err(|e| e.to_string())?;
    let fx = witness
        .apply_event(suggest_event(2000, &c2, probe, None))
        .map_err(|e| e.to_string())?;
    let with = suggestions_of(&fx).ok_or("no suggestions effect")?;
    check!(
        with.2 != without.2,
        "coder1 history did not change coder2 suggestions"
    );
    check!(
        with.0.first().map(String::as_str) == Some("leadership"),
        "witness suggestions {:?}",
        with.0
    );

    Ok(format!(
        "A disabled; B {compared} coder2 responses identical over 30 scripts; C {rejected} early annotations rejected over 200 interleavings; D witness {:?} -> {:?}",
        without.0, with.0
    ))
}

// ---------------------------------------------------------------- criterion 7

fn replay_determinism() -> Outcome {
    let mut scripts = Vec::new();
    let mut golden = Vec::new();
    for name in FIXTURE_LOGS {
        let log = fixture(&format!("{name}.jsonl"));
        let want = fixture(&format!("{name}.csv"));
        for pass in 0..2 {
            let got = replay_to_csv(&log).map_err(|e| format!("{name}: {e}"))?;
            check!(
                got == want,
                "{name} pass {pass}: CSV differs\n{got}\nvs\n{want}"
            );
        }
        scripts.push(ReplayScript::parse(&log).unwrap());
        golden.push(want);
    }
    for exec in [Exec::Sequential, Exec::Parallel] {
        for (r, want) in replay_many(&scripts, exec).into_iter().zip(&golden) {
            let got = reports_to_csv(&[r.map_err(|e| e.to_string())?]);
            check!(&got == want, "replay_many({exec:?}) differs");
        }
    }

    // Sessions built so that sentence labels agree on a known fraction.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0f64;
    for round in 0..50 {
        let n_docs = rng.gen_range(1..=3);
        let per_doc = rng.gen_range(2..=12);
        let docs: Vec<DocumentSource> = (0..n_docs)
            .map(|d| DocumentSource {
                id: DocId::new(format!("d{d}")),
                title: String::new(),
                body: (0..per_doc)
                    .map(|i| format!("Sentence {i} of document {d} is here."))
                    .collect::<Vec<_>>()
                    .join(" "),
            })
            .collect();
        let mut config = SessionConfig::new(
            Condition::A,
            ["c1", "c2"],
            docs,
            DocumentSource {
                id: DocId::new("p3"),
                title: String::new(),
                body: "Only one sentence.".into(),
            },
        );
        config.name = format!("kappa_{round}");
        let classes = rng.gen_range(2..=5u32);
        config.analysis.label_mapping =
            Some((1..=classes).map(|c| (format!("class {c}"), c)).collect());
        let sentences = phase1_sentences(&config);
        let n = sentences.len();
        let a: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=classes)).collect();
        let agree = rng.gen_range(0..=n);
        let b: Vec<u32> = (0..n)
            .map(|i| {
                if i < agree {
                    a[i]
                } else {
                    rng.gen_range(1..=classes)
                }
            })
            .collect();
        let mut events = vec![SessionEvent::advance(Timestamp::ZERO, None, Phase::One)];
        let mut t = 0;
        for (i, s) in sentences.iter().enumerate() {
            for (coder, labels) in [("c1", &a), ("c2", &b)] {
                t += 1000;
                let code = format!("Class {}", labels[i]);
                events.push(SessionEvent::annotate(
                    Timestamp(t),
                    &CoderId::new(coder),
                    s.0.as_str(),
                    s.1,
                    s.2,
                    &code,
                ));
            }
        }
        let text = ReplayScript { config, events }.to_jsonl();
        let report = replay_text(&text).map_err(|e| e.to_string())?;
        let got = report.kappa_phase1.ok_or("no phase-1 kappa")?;
        // hand oracle from the agreement fraction and the marginals
        let nf = n as f64;
        let p_o = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / nf;
        let p_e: f64 = (1..=classes)
            .map(|c| {
                let pa = a.iter().filter(|x| **x == c).count() as f64 / nf;
                let pb = b.iter().filter(|x| **x == c).count() as f64 / nf;
                pa * pb
            })
            .sum();
        let want = if p_e == 1.0 {
            1.0
        } else {
            (p_o - p_e) / (1.0 - p_e)
        };
        worst = worst.max((got - want).abs());
        check!(
            (got - want).abs() <= 1e-12,
            "round {round}: kappa {got} vs {want}"
        );
    }
    Ok(format!(
        "3 fixture CSVs byte-identical; 50 synthesized logs, max |diff| {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 8

struct Live {
    state: Arc<AppState>,
    id: String,
    tokens: [String; 2],
    operator: String,
}

async fn call(
    state: &Arc<AppState>,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = router(state.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn service_config(dir: &std::path::Path) -> ServiceConfig {
    let mut config = ServiceConfig::with_storage(dir);
    config.retrain = RetrainChoice::Inline;
    config.snapshot_every = 7;
    config
}

async fn send(live: &Live, event: &SessionEvent) -> Result<(), String> {
    let token = match &event.coder {
        None => live.operator.clone(),
        Some(c) => live.tokens[if c.as_str() == "c1" { 0 } else { 1 }].clone(),
    };
    let base = format!("/sessions/{}", live.id);
    let (method, uri, body) = match &event.body {
        EventBody::Annotate(p) => (
            Method::POST,
            format!("{base}/annotations?token={token}"),
            Some(json!({ "doc": p.doc, "start": p.start, "end": p.end, "code": p.code })),
        ),
        EventBody::AcceptSuggestion(p) => (
            Method::POST,
            format!("{base}/annotations?token={token}"),
            Some(
                json!({ "doc": p.doc, "start": p.start, "end": p.end, "code": p.code,
                         "from_suggestion": true, "confidence": p.confidence }),
            ),
        ),
        EventBody::EditCode { annotation, code } => (
            Method::PATCH,
            format!("{base}/annotations/{}?token={token}", annotation.0),
            Some(json!({ "code": code })),
        ),
        EventBody::DeleteCode { annotation } => (
            Method::DELETE,
            format!("{base}/annotations/{}?token={token}", annotation.0),
            None,
        ),
        EventBody::RequestSuggestions(p) => {
            let k = p.k.map(|k| format!("&k={k}")).unwrap_or_default();
            (
                Method::GET,
                format!(
                    "{base}/suggestions?token={token}&doc={}&start={}&end={}{k}",
                    p.doc, p.start, p.end
                ),
                None,
            )
        }
        EventBody::PhaseAdvance { to } => {
            let next = live
                .state
                .get(&live.id)
                .unwrap()
                .with_session(|s| s.phase().next());
            if next != Some(*to) {
                return Err(format!(
                    "advance to {to} but the service would advance to {next:?}"
                ));
            }
            (
                Method::POST,
                format!("{base}/phase/advance?token={token}"),
                None,
            )
        }
        EventBody::CodebookCommit { entries } => (
            Method::PUT,
            format!("{base}/codebook?token={token}"),
            Some(json!({ "entries": entries })),
        ),
        EventBody::Reminder(_) => return Ok(()),
    };
    let (status, bytes) = call(&live.state, method, &uri, body).await;
    if !status.is_success() {
        return Err(format!(
            "{uri}: {status} {}",
            String::from_utf8_lossy(&bytes)
        ));
    }
    Ok(())
}

/// Drive a fixture through the HTTP API, restarting after every event for
/// which `restart` holds. Returns the final snapshot hash, the metrics CSV
/// and the number of restarts.
async fn drive(
    script: &ReplayScript,
    restart: impl Fn(usize) -> bool,
) -> Result<(String, String, usize), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clock = Arc::new(ManualClock::new(script.events[0].ts));
    let open = || {
        AppState::open(service_config(dir.path()), clock.clone() as Arc<dyn Clock>)
            .map_err(|e| e.to_string())
    };
    let state = open()?;
    let c = &script.config;
    let req = json!({
        "name": c.name,
        "condition": c.condition,
        "coders": c.coders,
        "documents": c.phase1_documents,
        "phase3_document": c.phase3_document,
        "phase_limits": c.phase_limits_secs,
        "reminder_offsets": c.reminder_offsets_secs,
        "suggestion_k": c.suggestion_k,
        "reveal_suggestion_origin": c.reveal_suggestion_origin,
        "analysis": c.analysis,
    });
    let (status, bytes) = call(&state, Method::POST, "/sessions", Some(req)).await;
    check!(
        status == StatusCode::CREATED || status == StatusCode::OK,
        "create: {status}"
    );
    let created: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    let token = |i: usize| {
        created["coder_links"][i]["token"]
            .as_str()
            .unwrap()
            .to_string()
    };
    let mut live = Live {
        state,
        id: created["session_id"].as_str().unwrap().to_string(),
        tokens: [token(0), token(1)],
        operator: created["operator_token"].as_str().unwrap().to_string(),
    };
    let mut restarts = 0;
    for (i, event) in script.events.iter().enumerate().skip(1) {
        clock.set(event.ts);
        send(&live, event)
            .await
            .map_err(|e| format!("event {i}: {e}"))?;
        if restart(i) {
            let before = live.state.get(&live.id).unwrap().snapshot().hash();
            live.state.shutdown();
            drop(std::mem::replace(&mut live.state, open()?));
            let after = live
                .state
                .get(&live.id)
                .map_err(|e| e.to_string())?
                .snapshot()
                .hash();
            check!(
                before == after,
                "state differs after restart following event {i}"
            );
            restarts += 1;
        }
    }
    let hash = live.state.get(&live.id).unwrap().snapshot().hash();
    let uri = format!(
        "/sessions/{}/metrics?token={}&format=csv",
        live.id, live.operator
    );
    let (status, csv) = call(&live.state, Method::GET, &uri, None).await;
    check!(status == StatusCode::OK, "metrics: {status}");
    Ok((hash, String::from_utf8(csv).unwrap(), restarts))
}

fn crash_recovery() -> Outcome {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap();
    let mut total = 0;
    for name in FIXTURE_LOGS {
        let script = ReplayScript::parse(&fixture(&format!("{name}.jsonl"))).unwrap();
        let golden = fixture(&format!("{name}.csv"));
        let (hash, csv, _) = rt
            .block_on(drive(&script, |_| false))
            .map_err(|e| format!("{name}: {e}"))?;
        check!(
            csv == golden,
            "{name}: live metrics differ from replayed golden\n{csv}"
        );
        let replayed = replay(&script)
            .map_err(|e| e.to_string())?
            .session
            .snapshot()
            .hash();
        check!(
            hash == replayed,
            "{name}: live state differs from offline replay"
        );
        let (rhash, rcsv, restarts) = rt
            .block_on(drive(&script, |_| true))
            .map_err(|e| format!("{name}: {e}"))?;
        check!(
            rhash == hash && rcsv == golden,
            "{name}: restarted run diverged"
        );
        total += restarts;
    }
    Ok(format!(
        "{total} restarts across 3 fixture logs, every snapshot hash preserved"
    ))
}

// ---------------------------------------------------------------- criterion 9

fn timing_reminders() -> Outcome {
    let mut config = fixture_config("pair_D_smoke");
    config.condition = Condition::A;
    let c1 = CoderId::new("c1");
    let c2 = CoderId::new("c2");
    let m = |x: i64| Timestamp::from_mins(x);
    let entries = config
        .analysis
        .merged_codebook
        .clone()
        .unwrap()
        .into_entries();
    let events = vec![
        SessionEvent::advance(m(0), None, Phase::One),
        SessionEvent::advance(m(19), Some(&c1), Phase::Two),
        SessionEvent::advance(m(19), Some(&c2), Phase::Two),
        SessionEvent::commit(m(45), Some(&c1), entries),
        SessionEvent::advance(m(46), Some(&c2), Phase::Three),
        SessionEvent::advance(m(52), Some(&c1), Phase::Done),
        SessionEvent::advance(m(52), Some(&c2), Phase::Done),
    ];
    let script = ReplayScript { config, events };
    let outcome = replay(&script).map_err(|e| e.to_string())?;
    let timing = phase_timing(outcome.session.log()).map_err(|e| e.to_string())?;
    let mins: Vec<Option<u64>> = timing
        .durations
        .iter()
        .map(|d| d.map(|d| d.as_secs() / 60))
        .collect();
    check!(mins == [Some(19), Some(27), Some(6)], "durations {mins:?}");
    check!(
        timing
            .durations
            .iter()
            .all(|d| d.is_some_and(|d| d.as_secs() % 60 == 0)),
        "durations are not whole minutes"
    );
    check!(
        timing.overruns([1200, 2400, 600]) == [false; 3],
        "overrun flagged"
    );
    check!(
        outcome.report.phase_secs == [Some(1140.0), Some(1620.0), Some(360.0)],
        "report phase_secs"
    );

    let reminders: Vec<(i64, Phase, u64)> = outcome
        .session
        .log()
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Reminder(r) => Some((e.ts.millis(), r.phase, r.remaining_secs)),
            _ => None,
        })
        .collect();
    let want = vec![
        (m(5).millis(), Phase::One, 900),
        (m(15).millis(), Phase::One, 300),
        (m(44).millis(), Phase::Two, 900),
        (m(51).millis(), Phase::Three, 300),
    ];
    check!(
        reminders == want,
        "reminders {reminders:?}, expected {want:?}"
    );

    // Reminders also fire on a clock tick with no coder activity.
    let mut s = Session::create(script.config.clone(), m(0)).map_err(|e| e.to_string())?;
    let fx = s.tick(m(16));
    let fired: Vec<u64> = fx
        .iter()
        .filter_map(|e| match e {
            Effect::Reminder { remaining_secs, .. } => Some(*remaining_secs),
            _ => None,
        })
        .collect();
    check!(fired == [900, 300], "tick at 16 min fired {fired:?}");
    Ok("durations (19, 27, 6) min, no overrun; reminders at 5, 15, 44, 51 min".into())
}
