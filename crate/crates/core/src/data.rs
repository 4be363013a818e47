//! Dataset schemas, per-task-family triplet construction, and procedural
//! toy-corpus generators for desk-scale experiments.
//!
//! [`RawExample`] mirrors the JSONL schema one line at a time; file IO lives
//! in the companion crate. Unknown fields round-trip through `extra`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{render_input, InstructedInput};
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, subsystem_seed};

/// Fixed instruction for STS pairs (applied to query, positive, and
/// negatives alike).
pub const STS_INSTRUCTION: &str = "Retrieve semantically similar text.";

/// Bitext pairs are treated as a symmetric retrieval family with this
/// instruction; no dedicated recipe exists upstream, so the STS treatment is
/// the closest analogue.
pub const BITEXT_INSTRUCTION: &str = "Retrieve parallel sentences.";

/// Instructions used by the toy generators; kept short so desk-scale
/// sequences stay small.
pub const TOY_RETRIEVAL_INSTRUCTION: &str = "same topic";
pub const TOY_CLASSIFICATION_INSTRUCTION: &str = "topic label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Retrieval,
    Classification,
    Sts,
    Bitext,
}

impl TaskFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::Retrieval => "retrieval",
            TaskFamily::Classification => "classification",
            TaskFamily::Sts => "sts",
            TaskFamily::Bitext => "bitext",
        }
    }
}

/// One dataset line. Field names are the wire schema; which fields are
/// required depends on `task_family`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub task_family: TaskFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misleading_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    /// Unknown fields, preserved on round-trip.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl RawExample {
    fn empty(task_family: TaskFamily) -> Self {
        RawExample {
            task_family,
            instruction: None,
            query: None,
            positive: None,
            negatives: None,
            text: None,
            label: None,
            misleading_labels: None,
            text_a: None,
            text_b: None,
            sentence: None,
            translation: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn retrieval(
        instruction: impl Into<String>,
        query: impl Into<String>,
        positive: impl Into<String>,
        negatives: Vec<String>,
    ) -> Self {
        RawExample {
            instruction: Some(instruction.into()),
            query: Some(query.into()),
            positive: Some(positive.into()),
            negatives: Some(negatives),
            ..RawExample::empty(TaskFamily::Retrieval)
        }
    }

    pub fn classification(
        instruction: impl Into<String>,
        text: impl Into<String>,
        label: impl Into<String>,
        misleading_labels: Vec<String>,
    ) -> Self {
        RawExample {
            instruction: Some(instruction.into()),
            text: Some(text.into()),
            label: Some(label.into()),
            misleading_labels: Some(misleading_labels),
            ..RawExample::empty(TaskFamily::Classification)
        }
    }

    pub fn sts(text_a: impl Into<String>, text_b: impl Into<String>, negatives: Vec<String>) -> Self {
        RawExample {
            text_a: Some(text_a.into()),
            text_b: Some(text_b.into()),
            negatives: Some(negatives),
            ..RawExample::empty(TaskFamily::Sts)
        }
    }

    pub fn bitext(
        sentence: impl Into<String>,
        translation: impl Into<String>,
        negatives: Vec<String>,
    ) -> Self {
        RawExample {
            sentence: Some(sentence.into()),
            translation: Some(translation.into()),
            negatives: Some(negatives),
            ..RawExample::empty(TaskFamily::Bitext)
        }
    }

    /// Check that the family's required payload fields are present and
    /// non-empty.
    pub fn validate(&self) -> Result<()> {
        let need = |field: &Option<String>, name: &str| -> Result<()> {
            match field {
                Some(s) if !s.is_empty() => Ok(()),
                _ => Err(Error::Validation(format!(
                    "{} example missing required field '{name}'",
                    self.task_family.name()
                ))),
            }
        };
        match self.task_family {
            TaskFamily::Retrieval => {
                need(&self.instruction, "instruction")?;
                need(&self.query, "query")?;
                need(&self.positive, "positive")?;
            }
            TaskFamily::Classification => {
                need(&self.instruction, "instruction")?;
                need(&self.text, "text")?;
                need(&self.label, "label")?;
                match &self.misleading_labels {
                    Some(m) if !m.is_empty() => {}
                    _ => {
                        return Err(Error::Validation(
                            "classification example needs at least one misleading label".into(),
                        ))
                    }
                }
            }
            TaskFamily::Sts => {
                need(&self.text_a, "text_a")?;
                need(&self.text_b, "text_b")?;
            }
            TaskFamily::Bitext => {
                need(&self.sentence, "sentence")?;
                need(&self.translation, "translation")?;
            }
        }
        Ok(())
    }
}

/// Instruction-rendered (query, positive, negatives) ready for the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriplet {
    pub query_text: String,
    pub positive_text: String,
    pub negative_texts: Vec<String>,
}

impl TrainingTriplet {
    pub fn validate(&self) -> Result<()> {
        if self.negative_texts.iter().any(|n| *n == self.positive_text) {
            return Err(Error::Validation(
                "triplet negative duplicates the positive".into(),
            ));
        }
        Ok(())
    }
}

fn rendered(instruction: &str, body: &str) -> String {
    render_input(&InstructedInput::instructed(instruction, body))
}

/// Drop negatives that exactly match the positive.
fn dedup_against_positive(negatives: Vec<String>, positive: &str) -> Vec<String> {
    negatives.into_iter().filter(|n| n != positive).collect()
}

/// Retrieval: the query gets its instruction; documents pass through
/// unmodified. At least one hard negative must survive dedup.
pub fn build_retrieval_triplet(ex: &RawExample) -> Result<TrainingTriplet> {
    if ex.task_family != TaskFamily::Retrieval {
        return Err(Error::Contract(format!(
            "build_retrieval_triplet on a {} example",
            ex.task_family.name()
        )));
    }
    ex.validate()?;
    let positive = ex.positive.clone().expect("validated");
    let negatives = dedup_against_positive(ex.negatives.clone().unwrap_or_default(), &positive);
    if negatives.is_empty() {
        return Err(Error::Validation(
            "retrieval training requires at least one hard negative".into(),
        ));
    }
    let triplet = TrainingTriplet {
        query_text: rendered(
            ex.instruction.as_deref().expect("validated"),
            ex.query.as_deref().expect("validated"),
        ),
        positive_text: positive,
        negative_texts: negatives,
    };
    triplet.validate()?;
    Ok(triplet)
}

/// Classification: the input text is the instructed anchor; the correct
/// label name is the positive and the misleading label names the negatives,
/// all label names verbatim.
pub fn build_classification_triplet(ex: &RawExample) -> Result<TrainingTriplet> {
    if ex.task_family != TaskFamily::Classification {
        return Err(Error::Contract(format!(
            "build_classification_triplet on a {} example",
            ex.task_family.name()
        )));
    }
    ex.validate()?;
    let label = ex.label.clone().expect("validated");
    let misleading = ex.misleading_labels.clone().expect("validated");
    if misleading.iter().any(|m| *m == label) {
        return Err(Error::Validation(format!(
            "label '{label}' appears among the misleading labels"
        )));
    }
    let triplet = TrainingTriplet {
        query_text: rendered(
            ex.instruction.as_deref().expect("validated"),
            ex.text.as_deref().expect("validated"),
        ),
        positive_text: label,
        negative_texts: misleading,
    };
    triplet.validate()?;
    Ok(triplet)
}

/// STS: symmetric expansion (A -> B) and (B -> A). Query, positive, and
/// negatives all carry the fixed STS instruction prefix.
pub fn build_sts_triplets(ex: &RawExample) -> Result<Vec<TrainingTriplet>> {
    if ex.task_family != TaskFamily::Sts {
        return Err(Error::Contract(format!(
            "build_sts_triplets on a {} example",
            ex.task_family.name()
        )));
    }
    ex.validate()?;
    let a = ex.text_a.as_deref().expect("validated");
    let b = ex.text_b.as_deref().expect("validated");
    let negatives = ex.negatives.clone().unwrap_or_default();
    Ok(symmetric_pair(STS_INSTRUCTION, a, b, &negatives))
}

/// Bitext: treated as a symmetric pair like STS, with the parallel sentence
/// as the positive.
pub fn build_bitext_triplets(ex: &RawExample) -> Result<Vec<TrainingTriplet>> {
    if ex.task_family != TaskFamily::Bitext {
        return Err(Error::Contract(format!(
            "build_bitext_triplets on a {} example",
            ex.task_family.name()
        )));
    }
    ex.validate()?;
    let a = ex.sentence.as_deref().expect("validated");
    let b = ex.translation.as_deref().expect("validated");
    let negatives = ex.negatives.clone().unwrap_or_default();
    Ok(symmetric_pair(BITEXT_INSTRUCTION, a, b, &negatives))
}

fn symmetric_pair(
    instruction: &str,
    a: &str,
    b: &str,
    negatives: &[String],
) -> Vec<TrainingTriplet> {
    let rendered_negs: Vec<String> = negatives.iter().map(|n| rendered(instruction, n)).collect();
    let make = |query: &str, positive: &str| -> TrainingTriplet {
        let positive_text = rendered(instruction, positive);
        TrainingTriplet {
            query_text: rendered(instruction, query),
            negative_texts: dedup_against_positive(rendered_negs.clone(), &positive_text),
            positive_text,
        }
    };
    alloc::vec![make(a, b), make(b, a)]
}

/// Build the triplets for one example, whatever its family.
pub fn build_triplets(ex: &RawExample) -> Result<Vec<TrainingTriplet>> {
    match ex.task_family {
        TaskFamily::Retrieval => Ok(alloc::vec![build_retrieval_triplet(ex)?]),
        TaskFamily::Classification => Ok(alloc::vec![build_classification_triplet(ex)?]),
        TaskFamily::Sts => build_sts_triplets(ex),
        TaskFamily::Bitext => build_bitext_triplets(ex),
    }
}

/// Build triplets for a whole dataset, reporting the failing example index.
pub fn build_all_triplets(examples: &[RawExample]) -> Result<Vec<TrainingTriplet>> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let mut triplets = build_triplets(ex)
            .map_err(|e| Error::Validation(format!("example {i}: {e}")))?;
        out.append(&mut triplets);
    }
    Ok(out)
}

// ── Toy corpus generation ───────────────────────────────────────────────

/// Per-cluster topic vocabulary size.
const TOPIC_POOL: usize = 12;
/// Topic words per document; its query repeats exactly these words, so a
/// pair is identified by a word combination, never by unseen tokens.
const DOC_TOPIC_WORDS: usize = 3;
/// Shared filler words per text; they carry no pairing signal, so training
/// has to learn to ignore them.
const FILLERS_PER_TEXT: usize = 2;
const MIN_FILLER_POOL: usize = 24;

pub const TOY_EXTRA_CLUSTER: &str = "cluster";
pub const TOY_EXTRA_GOLD: &str = "gold_score";

// C(n, k) with saturation, used to bound distinct subset counts.
fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Deterministic synthetic retrieval pairs in `n_clusters` topical clusters
/// over a shared vocabulary of `vocab_words` topic words.
///
/// Each cluster samples a 12-word pool from the global vocabulary; pools
/// overlap, so clusters share token distributions without being separable by
/// cluster identity alone. Every document is a globally unique 3-word
/// combination from its cluster pool, and its query repeats exactly those
/// three words in fresh order. The positive therefore matches its query in
/// all three words while every other document matches in at most two —
/// resolving that margin requires word-combination features, not cluster
/// features. Held-out pairs are new combinations of words seen in training.
/// The cluster index is recorded in the `cluster` extra field.
pub fn generate_toy_corpus(
    seed: u64,
    n_clusters: usize,
    n_per_cluster: usize,
    vocab_words: usize,
) -> Result<Vec<RawExample>> {
    if n_clusters < 2 {
        return Err(Error::Config(format!(
            "toy corpus needs at least 2 clusters, got {n_clusters}"
        )));
    }
    if n_per_cluster == 0 {
        return Err(Error::Config("n_per_cluster must be >= 1".into()));
    }
    if vocab_words < TOPIC_POOL + 2 {
        return Err(Error::Config(format!(
            "vocab of {vocab_words} words cannot host {TOPIC_POOL}-word cluster pools"
        )));
    }
    let n_docs = n_clusters * n_per_cluster;
    if n_per_cluster > binomial(TOPIC_POOL, DOC_TOPIC_WORDS)
        || n_docs * 2 > binomial(vocab_words, DOC_TOPIC_WORDS)
    {
        return Err(Error::Config(format!(
            "{n_docs} documents exceed the distinct {DOC_TOPIC_WORDS}-word combinations \
             available from {vocab_words} words in {TOPIC_POOL}-word pools"
        )));
    }

    let mut rng = seeded_rng(subsystem_seed(seed, "toy-corpus"));
    let vocab = make_words(&mut rng, vocab_words, 3);
    let mut used: alloc::collections::BTreeSet<Vec<usize>> = alloc::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n_docs);
    for cluster in 0..n_clusters {
        let pool = sample_distinct_indices(&mut rng, vocab_words, TOPIC_POOL);
        for _ in 0..n_per_cluster {
            let mut attempts = 0;
            let subset = loop {
                let mut pick = sample_distinct_indices(&mut rng, TOPIC_POOL, DOC_TOPIC_WORDS);
                pick.sort_unstable();
                let global: Vec<usize> = pick.iter().map(|&i| pool[i]).collect();
                let mut key = global.clone();
                key.sort_unstable();
                if used.insert(key) {
                    break global;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(
                        "could not find enough distinct word combinations; \
                         increase vocab_words or lower n_per_cluster"
                            .into(),
                    ));
                }
            };
            let mut words: Vec<String> = subset.iter().map(|&i| vocab[i].clone()).collect();
            words.shuffle(&mut rng);
            let doc = words.join(" ");
            words.shuffle(&mut rng);
            let query = words.join(" ");

            let mut ex = RawExample::retrieval(TOY_RETRIEVAL_INSTRUCTION, query, doc, Vec::new());
            ex.extra.insert(
                TOY_EXTRA_CLUSTER.to_string(),
                serde_json::Value::from(cluster as u64),
            );
            out.push(ex);
        }
    }
    Ok(out)
}

/// Split a cluster-major toy corpus into train and held-out parts, taking
/// the last `holdout_per_cluster` pairs of each cluster.
pub fn split_retrieval_holdout(
    examples: &[RawExample],
    n_clusters: usize,
    n_per_cluster: usize,
    holdout_per_cluster: usize,
) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
    if examples.len() != n_clusters * n_per_cluster {
        return Err(Error::Validation(format!(
            "expected {} examples ({n_clusters} x {n_per_cluster}), got {}",
            n_clusters * n_per_cluster,
            examples.len()
        )));
    }
    if holdout_per_cluster >= n_per_cluster {
        return Err(Error::Config(format!(
            "holdout {holdout_per_cluster} per cluster leaves no training data"
        )));
    }
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for cluster in 0..n_clusters {
        let chunk = &examples[cluster * n_per_cluster..(cluster + 1) * n_per_cluster];
        let split = n_per_cluster - holdout_per_cluster;
        train.extend_from_slice(&chunk[..split]);
        holdout.extend_from_slice(&chunk[split..]);
    }
    Ok((train, holdout))
}

/// Deterministic synthetic classification set: each label is an anchor word
/// that also appears in its texts; misleading labels are the other anchors.
pub fn generate_toy_classification(
    seed: u64,
    n_labels: usize,
    n_per_label: usize,
) -> Result<Vec<RawExample>> {
    if n_labels < 2 {
        return Err(Error::Config(format!(
            "toy classification needs at least 2 labels, got {n_labels}"
        )));
    }
    let mut rng = seeded_rng(subsystem_seed(seed, "toy-classification"));
    let anchors = make_words(&mut rng, n_labels, 3);
    let topics = make_words(&mut rng, n_labels * TOPIC_POOL, 3);
    let fillers = make_words(&mut rng, MIN_FILLER_POOL, 5);

    let mut out = Vec::new();
    for label in 0..n_labels {
        let pool = &topics[label * TOPIC_POOL..(label + 1) * TOPIC_POOL];
        for _ in 0..n_per_label {
            let mut doc_words = sample_distinct(&mut rng, pool, 2);
            doc_words.push(anchors[label].clone());
            let text = compose_text(&mut rng, &doc_words, &fillers);
            let mut misleading: Vec<String> = (0..n_labels)
                .filter(|&l| l != label)
                .map(|l| anchors[l].clone())
                .collect();
            misleading.shuffle(&mut rng);
            let mut ex = RawExample::classification(
                TOY_CLASSIFICATION_INSTRUCTION,
                text,
                anchors[label].clone(),
                misleading,
            );
            ex.extra.insert(
                TOY_EXTRA_CLUSTER.to_string(),
                serde_json::Value::from(label as u64),
            );
            out.push(ex);
        }
    }
    Ok(out)
}

/// Deterministic synthetic STS pairs: the partner text replaces a controlled
/// number of words, and the surviving-overlap fraction is stored as the gold
/// score in the `gold_score` extra field.
pub fn generate_toy_sts(seed: u64, n_pairs: usize) -> Result<Vec<RawExample>> {
    if n_pairs < 3 {
        return Err(Error::Config(format!(
            "toy STS needs at least 3 pairs, got {n_pairs}"
        )));
    }
    const WORDS_PER_TEXT: usize = 5;
    let mut rng = seeded_rng(subsystem_seed(seed, "toy-sts"));
    let pool = make_words(&mut rng, 48.max(4 * n_pairs), 4);

    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let base = sample_distinct(&mut rng, &pool, WORDS_PER_TEXT);
        // Cycle replacement counts so gold scores cover the full range.
        let replaced = i % (WORDS_PER_TEXT + 1);
        let mut partner = base.clone();
        let swap_at = sample_distinct_indices(&mut rng, WORDS_PER_TEXT, replaced);
        for &j in &swap_at {
            partner[j] = pool[rng.gen_range(0..pool.len())].clone();
        }
        let gold = (WORDS_PER_TEXT - replaced) as f64 / WORDS_PER_TEXT as f64;
        let negatives: Vec<String> = (0..4)
            .map(|_| sample_distinct(&mut rng, &pool, WORDS_PER_TEXT).join(" "))
            .collect();
        let mut ex = RawExample::sts(base.join(" "), partner.join(" "), negatives);
        ex.extra
            .insert(TOY_EXTRA_GOLD.to_string(), serde_json::Value::from(gold));
        out.push(ex);
    }
    Ok(out)
}

/// Pronounceable distinct words from alternating consonant/vowel syllables.
fn make_words(rng: &mut impl Rng, count: usize, syllables: usize) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bcdfglmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut seen = alloc::collections::BTreeSet::new();
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn sample_distinct_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

fn sample_distinct(rng: &mut impl Rng, pool: &[String], k: usize) -> Vec<String> {
    let idx = sample_distinct_indices(rng, pool.len(), k);
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

fn compose_text(rng: &mut impl Rng, topic_words: &[String], fillers: &[String]) -> String {
    let mut words: Vec<String> = Vec::with_capacity(topic_words.len() + FILLERS_PER_TEXT);
    words.extend(topic_words.iter().cloned());
    for _ in 0..FILLERS_PER_TEXT {
        words.push(fillers[rng.gen_range(0..fillers.len())].clone());
    }
    words.shuffle(rng);
    words.join(" ")
}

/// Cluster index stored by the toy generators, if present.
pub fn toy_cluster_of(ex: &RawExample) -> Option<u64> {
    ex.extra.get(TOY_EXTRA_CLUSTER).and_then(|v| v.as_u64())
}

/// Gold STS score stored by the toy generator, if present.
pub fn toy_gold_of(ex: &RawExample) -> Option<f64> {
    ex.extra.get(TOY_EXTRA_GOLD).and_then(|v| v.as_f64())
}
