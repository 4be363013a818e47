//! Task scorers (retrieval, classification, STS) and leaderboard-style
//! aggregation: Mean(Task), Mean(Type), and Borda votes/ranks.
//!
//! Borda treats each task as a preference voter: the model ranked r-th of M
//! on a task receives M−r votes, tied models share the arithmetic mean of
//! the votes their positions span, and the final rank orders models by total
//! votes (competition ranking, ties take the better rank).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::cosine;

/// Macro-averaged retrieval quality of ranked runs against relevance
/// judgments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalScores {
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
}

/// `run`: per query, documents in ranked order. `qrels`: per query, the set
/// of relevant documents (every query needs at least one). nDCG uses binary
/// gains with a log2 discount.
pub fn score_retrieval(
    run: &[(String, Vec<String>)],
    qrels: &BTreeMap<String, BTreeSet<String>>,
    k: usize,
) -> Result<RetrievalScores> {
    if k < 1 {
        return Err(Error::Contract("retrieval cutoff k must be >= 1".into()));
    }
    if run.is_empty() {
        return Err(Error::EmptyInput("empty retrieval run".into()));
    }
    let mut recall_sum = 0.0;
    let mut ndcg_sum = 0.0;
    for (query, ranking) in run {
        let relevant = qrels
            .get(query)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| {
                Error::Validation(format!("query '{query}' has no relevant documents"))
            })?;
        let top = &ranking[..ranking.len().min(k)];
        let hits = top.iter().filter(|d| relevant.contains(*d)).count();
        recall_sum += hits as f64 / relevant.len() as f64;

        let mut dcg = 0.0;
        for (i, doc) in top.iter().enumerate() {
            if relevant.contains(doc) {
                dcg += 1.0 / math::log2((i + 2) as f64);
            }
        }
        let ideal_hits = relevant.len().min(k);
        let mut idcg = 0.0;
        for i in 0..ideal_hits {
            idcg += 1.0 / math::log2((i + 2) as f64);
        }
        ndcg_sum += dcg / idcg;
    }
    let n = run.len() as f64;
    Ok(RetrievalScores {
        recall_at_k: recall_sum / n,
        ndcg_at_k: ndcg_sum / n,
    })
}

/// Nearest-label accuracy: the fraction of texts whose closest label
/// embedding (by cosine, ties to the earlier label) is the true label.
pub fn score_classification(
    embeddings: &[Vec<f64>],
    label_embeddings: &[(String, Vec<f64>)],
    truth: &[String],
) -> Result<f64> {
    if label_embeddings.len() < 2 {
        return Err(Error::Contract(format!(
            "classification needs at least 2 labels, got {}",
            label_embeddings.len()
        )));
    }
    if embeddings.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} truth labels",
            embeddings.len(),
            truth.len()
        )));
    }
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("no texts to classify".into()));
    }
    let mut correct = 0usize;
    for (emb, truth_label) in embeddings.iter().zip(truth) {
        let mut best: Option<(f64, &str)> = None;
        for (label, lab_emb) in label_embeddings {
            let sim = cosine(emb, lab_emb)?;
            if best.map_or(true, |(s, _)| sim > s) {
                best = Some((sim, label));
            }
        }
        if best.expect("at least two labels").1 == truth_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth.len() as f64)
}

/// Spearman rank correlation with average-rank tie handling.
pub fn score_sts(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} gold scores",
            predicted.len(),
            gold.len()
        )));
    }
    if predicted.len() < 3 {
        return Err(Error::Contract(format!(
            "Spearman needs at least 3 pairs, got {}",
            predicted.len()
        )));
    }
    let rp = average_ranks(predicted);
    let rg = average_ranks(gold);
    pearson(&rp, &rg)
}

/// 1-based ranks; tied values share the mean of the positions they span.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite scores"));
    let mut ranks = alloc::vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean 1-based rank.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &orig in &idx[i..=j] {
            ranks[orig] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateInput(
            "correlation undefined for a constant score vector".into(),
        ));
    }
    Ok(cov / math::sqrt(va * vb))
}

/// A task column in the score matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub task_type: String,
}

/// Complete model-by-task score table (no missing cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    models: Vec<String>,
    tasks: Vec<TaskInfo>,
    /// Row-major `[model][task]`.
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(models: Vec<String>, tasks: Vec<TaskInfo>, scores: Vec<f64>) -> Result<Self> {
        if models.is_empty() || tasks.is_empty() {
            return Err(Error::Validation(
                "score matrix needs at least one model and one task".into(),
            ));
        }
        if scores.len() != models.len() * tasks.len() {
            return Err(Error::Validation(format!(
                "score matrix has {} cells, expected {} models x {} tasks",
                scores.len(),
                models.len(),
                tasks.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score matrix contains non-finite cells".into()));
        }
        let unique: BTreeSet<&String> = models.iter().collect();
        if unique.len() != models.len() {
            return Err(Error::Validation("duplicate model names".into()));
        }
        let unique_tasks: BTreeSet<&String> = tasks.iter().map(|t| &t.name).collect();
        if unique_tasks.len() != tasks.len() {
            return Err(Error::Validation("duplicate task names".into()));
        }
        Ok(ScoreMatrix {
            models,
            tasks,
            scores,
        })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn tasks(&self) -> &[TaskInfo] {
        &self.tasks
    }

    pub fn score(&self, model: usize, task: usize) -> f64 {
        self.scores[model * self.tasks.len() + task]
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m == name)
    }
}

/// Unweighted mean over all tasks for one model.
pub fn mean_task(matrix: &ScoreMatrix, model: usize) -> f64 {
    let t = matrix.tasks().len();
    (0..t).map(|j| matrix.score(model, j)).sum::<f64>() / t as f64
}

/// Mean over tasks within each type, then mean over types.
pub fn mean_type(matrix: &ScoreMatrix, model: usize) -> Result<f64> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, task) in matrix.tasks().iter().enumerate() {
        groups.entry(&task.task_type).or_default().push(j);
    }
    if groups.is_empty() {
        return Err(Error::Validation("no task types present".into()));
    }
    let mut total = 0.0;
    for (_, tasks) in &groups {
        let within: f64 =
            tasks.iter().map(|&j| matrix.score(model, j)).sum::<f64>() / tasks.len() as f64;
        total += within;
    }
    Ok(total / groups.len() as f64)
}

/// Votes and 1-based competition ranks per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BordaOutcome {
    pub votes: Vec<f64>,
    pub ranks: Vec<usize>,
}

/// Borda count over the matrix: each task votes, totals decide the rank.
pub fn borda_rank(matrix: &ScoreMatrix) -> BordaOutcome {
    let m = matrix.models().len();
    let t = matrix.tasks().len();
    let mut votes = alloc::vec![0.0; m];
    for task in 0..t {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            matrix
                .score(b, task)
                .partial_cmp(&matrix.score(a, task))
                .expect("finite scores")
        });
        // Walk tie groups; positions p..=q (0-based) share the mean votes.
        let mut p = 0;
        while p < m {
            let mut q = p;
            while q + 1 < m && matrix.score(order[q + 1], task) == matrix.score(order[p], task) {
                q += 1;
            }
            // Votes for 0-based position r are (m - 1 - r).
            let span_votes: f64 = (p..=q).map(|r| (m - 1 - r) as f64).sum();
            let shared = span_votes / (q - p + 1) as f64;
            for &model in &order[p..=q] {
                votes[model] += shared;
            }
            p = q + 1;
        }
    }
    // Competition ranking by descending votes: ties share the better rank.
    let mut ranks = alloc::vec![0usize; m];
    for i in 0..m {
        let better = (0..m).filter(|&j| votes[j] > votes[i]).count();
        ranks[i] = better + 1;
    }
    BordaOutcome { votes, ranks }
}
