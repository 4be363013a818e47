//! Hard-negative mining with the top-k percent-to-positive threshold rule.
//!
//! For a query with positive similarity `s+`, only candidates strictly below
//! `percent_threshold · s+` are eligible; the top `k` eligible by similarity
//! (ties broken by ascending corpus id) are returned. The rule is applied
//! literally even when `s+ <= 0`, where the cutoff `0.95·s+` sits above `s+`
//! itself. Similarities are exact brute force over the full corpus; at desk
//! scale oracle equality is the acceptance bar and an approximate index
//! would only add noise.

use alloc::format;
use alloc::string::String;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::RawExample;
use crate::encoder::{InstructedInput, TextEmbedder};
use crate::error::{Error, Result};
use crate::tensor::cosine;

/// Extra field set on pairs for which no eligible negative existed.
pub const MINING_FLAG_FIELD: &str = "no_eligible_negatives";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub k: usize,
    pub percent_threshold: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 4,
            percent_threshold: 0.95,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("mining k must be >= 1".into()));
        }
        if !(self.percent_threshold > 0.0 && self.percent_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "percent_threshold must lie in (0, 1], got {}",
                self.percent_threshold
            )));
        }
        Ok(())
    }
}

/// One selected negative: corpus id plus its similarity under the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinedNegative {
    pub corpus_id: usize,
    pub similarity: f64,
}

// Total order: higher similarity first, ties by ascending corpus id.
// Only constructed after finiteness validation.
#[derive(PartialEq)]
struct Ranked(MinedNegative);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.0
            .similarity
            .partial_cmp(&other.0.similarity)
            .expect("similarities validated finite")
            .then_with(|| other.0.corpus_id.cmp(&self.0.corpus_id))
    }
}

/// Apply the threshold-and-top-k rule to precomputed similarities.
///
/// Selection runs through a bounded min-heap rather than a full sort, so the
/// brute-force sort oracle in the tests checks an independent path.
pub fn select_hard_negatives(
    s_pos: f64,
    sims: &[(usize, f64)],
    cfg: &MiningConfig,
) -> Result<Vec<MinedNegative>> {
    cfg.validate()?;
    if !s_pos.is_finite() {
        return Err(Error::NonFinite("positive similarity is not finite".into()));
    }
    if let Some((id, s)) = sims.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite(format!(
            "similarity for corpus id {id} is not finite: {s}"
        )));
    }
    let cutoff = cfg.percent_threshold * s_pos;
    let mut heap: alloc::collections::BinaryHeap<core::cmp::Reverse<Ranked>> =
        alloc::collections::BinaryHeap::with_capacity(cfg.k + 1);
    for &(corpus_id, similarity) in sims {
        if similarity < cutoff {
            heap.push(core::cmp::Reverse(Ranked(MinedNegative {
                corpus_id,
                similarity,
            })));
            if heap.len() > cfg.k {
                heap.pop();
            }
        }
    }
    let mut out: Vec<MinedNegative> = heap.into_iter().map(|r| r.0 .0).collect();
    out.sort_by(|a, b| Ranked(*b).cmp(&Ranked(*a)));
    Ok(out)
}

/// Embed every corpus document (bare, no instruction) under one teacher.
pub fn embed_corpus(teacher: &dyn TextEmbedder, corpus: &[String]) -> Result<Vec<Vec<f64>>> {
    corpus
        .iter()
        .map(|doc| teacher.embed(&InstructedInput::bare(doc.clone())))
        .collect()
}

/// Mine one query against embedded corpus documents under one teacher.
pub fn mine_from_embeddings(
    query_embedding: &[f64],
    positive_id: usize,
    doc_embeddings: &[Vec<f64>],
    cfg: &MiningConfig,
) -> Result<Vec<MinedNegative>> {
    if doc_embeddings.is_empty() {
        return Err(Error::Validation("mining over an empty corpus".into()));
    }
    if positive_id >= doc_embeddings.len() {
        return Err(Error::Validation(format!(
            "positive id {positive_id} outside corpus of {} documents",
            doc_embeddings.len()
        )));
    }
    let s_pos = cosine(query_embedding, &doc_embeddings[positive_id])?;
    let mut sims = Vec::with_capacity(doc_embeddings.len() - 1);
    for (id, doc) in doc_embeddings.iter().enumerate() {
        if id != positive_id {
            sims.push((id, cosine(query_embedding, doc)?));
        }
    }
    select_hard_negatives(s_pos, &sims, cfg)
}

/// Mine one query with a single teacher, embedding the corpus on the fly.
pub fn mine(
    query: &InstructedInput,
    positive_id: usize,
    corpus: &[String],
    teacher: &dyn TextEmbedder,
    cfg: &MiningConfig,
) -> Result<Vec<MinedNegative>> {
    if corpus.is_empty() {
        return Err(Error::Validation("mining over an empty corpus".into()));
    }
    let docs = embed_corpus(teacher, corpus)?;
    let q = teacher.embed(query)?;
    mine_from_embeddings(&q, positive_id, &docs, cfg)
}

/// Round-robin interleave per-teacher rankings in teacher order, dropping
/// repeated corpus ids (first occurrence wins), truncated to `k`.
pub fn interleave_dedup(lists: &[Vec<MinedNegative>], k: usize) -> Vec<MinedNegative> {
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut seen = alloc::collections::BTreeSet::new();
    let mut out = Vec::new();
    'fill: for round in 0..longest {
        for list in lists {
            if let Some(neg) = list.get(round) {
                if seen.insert(neg.corpus_id) {
                    out.push(*neg);
                    if out.len() == k {
                        break 'fill;
                    }
                }
            }
        }
    }
    out
}

/// Mine one query under an ensemble of teachers.
pub fn mine_ensemble(
    query: &InstructedInput,
    positive_id: usize,
    corpus: &[String],
    teachers: &[&dyn TextEmbedder],
    cfg: &MiningConfig,
) -> Result<Vec<MinedNegative>> {
    if teachers.is_empty() {
        return Err(Error::Config("mining requires at least one teacher".into()));
    }
    let mut lists = Vec::with_capacity(teachers.len());
    for teacher in teachers {
        lists.push(mine(query, positive_id, corpus, *teacher, cfg)?);
    }
    Ok(interleave_dedup(&lists, cfg.k))
}

/// Per-teacher query embedding + selection against precomputed corpus
/// embeddings; the pure per-pair step used by the dataset drivers.
pub fn mine_pair(
    query: &InstructedInput,
    positive_id: usize,
    corpus_embeddings: &[Vec<Vec<f64>>],
    teachers: &[&dyn TextEmbedder],
    cfg: &MiningConfig,
) -> Result<Vec<MinedNegative>> {
    let mut lists = Vec::with_capacity(teachers.len());
    for (teacher, docs) in teachers.iter().zip(corpus_embeddings) {
        let q = teacher.embed(query)?;
        lists.push(mine_from_embeddings(&q, positive_id, docs, cfg)?);
    }
    Ok(interleave_dedup(&lists, cfg.k))
}

/// The candidate pool for a retrieval dataset: its positive documents,
/// exact-string deduplicated in first-occurrence order.
pub fn corpus_from_positives(pairs: &[RawExample]) -> Vec<String> {
    let mut seen = alloc::collections::BTreeSet::new();
    let mut corpus = Vec::new();
    for ex in pairs {
        if let Some(p) = &ex.positive {
            if seen.insert(p.clone()) {
                corpus.push(p.clone());
            }
        }
    }
    corpus
}

/// Attach mined negatives to every retrieval pair. Pairs whose eligible pool
/// is empty get an empty negative list and the `no_eligible_negatives` flag.
pub fn mine_dataset(
    pairs: &[RawExample],
    corpus: &[String],
    teachers: &[&dyn TextEmbedder],
    cfg: &MiningConfig,
) -> Result<Vec<RawExample>> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(Error::Config("mining requires at least one teacher".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Validation("mining over an empty corpus".into()));
    }
    let mut corpus_embeddings = Vec::with_capacity(teachers.len());
    for teacher in teachers {
        corpus_embeddings.push(embed_corpus(*teacher, corpus)?);
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (i, ex) in pairs.iter().enumerate() {
        out.push(mine_one_pair(ex, i, corpus, &corpus_embeddings, teachers, cfg)?);
    }
    Ok(out)
}

/// Mine a single dataset pair against precomputed corpus embeddings.
/// Exposed so callers can parallelize over pairs.
pub fn mine_one_pair(
    ex: &RawExample,
    index: usize,
    corpus: &[String],
    corpus_embeddings: &[Vec<Vec<f64>>],
    teachers: &[&dyn TextEmbedder],
    cfg: &MiningConfig,
) -> Result<RawExample> {
    ex.validate()
        .map_err(|e| Error::Validation(format!("pair {index}: {e}")))?;
    let positive = ex.positive.as_deref().unwrap_or_default();
    let query = ex.query.as_deref().unwrap_or_default();
    let instruction = ex.instruction.as_deref().unwrap_or_default();
    let positive_id = corpus
        .iter()
        .position(|doc| doc == positive)
        .ok_or_else(|| {
            Error::Validation(format!(
                "pair {index}: positive document not found in corpus (query '{query}')"
            ))
        })?;
    let input = InstructedInput::instructed(instruction, query);
    let mined = mine_pair(&input, positive_id, corpus_embeddings, teachers, cfg)?;
    let mut updated = ex.clone();
    updated.negatives = Some(mined.iter().map(|n| corpus[n.corpus_id].clone()).collect());
    if mined.is_empty() {
        updated.extra.insert(
            MINING_FLAG_FIELD.to_string(),
            serde_json::Value::Bool(true),
        );
    }
    Ok(updated)
}
