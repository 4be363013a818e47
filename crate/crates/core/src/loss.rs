//! InfoNCE contrastive loss with the four denominator compositions.
//!
//! Every variant scores the positive against a candidate set via a
//! temperature-scaled softmax over cosine similarities; the variants differ
//! only in which extra candidates join the per-row denominator:
//!
//! * `hn_only` — the row's positive and its mined hard negatives, nothing else
//! * `gemini`  — `hn_only` plus the other rows' positives (in-batch negatives)
//! * `gecko`   — `gemini` plus the other rows' queries (same-tower negatives)
//! * `qwen3`   — `gecko` plus the other rows' hard negatives
//!
//! Candidates that happen to be bit-identical to the positive are still
//! included; false-negative avoidance belongs to mining and variant choice,
//! not to in-loss filtering. Rows are reduced by arithmetic mean.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{cosine, Tape, Tensor, TensorId};

/// Denominator composition, in increasing candidate-set order for B >= 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    HnOnly,
    Gecko,
    Qwen3,
    Gemini,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::HnOnly,
        LossVariant::Gemini,
        LossVariant::Gecko,
        LossVariant::Qwen3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::HnOnly => "hn_only",
            LossVariant::Gecko => "gecko",
            LossVariant::Qwen3 => "qwen3",
            LossVariant::Gemini => "gemini",
        }
    }
}

impl core::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hn_only" => Ok(LossVariant::HnOnly),
            "gecko" => Ok(LossVariant::Gecko),
            "qwen3" => Ok(LossVariant::Qwen3),
            "gemini" => Ok(LossVariant::Gemini),
            other => Err(Error::Config(format!("unknown loss variant '{other}'"))),
        }
    }
}

/// Temperature plus variant. The 0.02 default mirrors the reference
/// hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.02,
            variant: LossVariant::HnOnly,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Value-level batch: per-row query, positive, and hard-negative embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub hard_negatives: Vec<Vec<Vec<f64>>>,
}

impl ContrastiveBatch {
    pub fn batch_size(&self) -> usize {
        self.queries.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::EmptyInput("contrastive batch with no rows".into()));
        }
        if self.positives.len() != self.queries.len()
            || self.hard_negatives.len() != self.queries.len()
        {
            return Err(Error::Validation(format!(
                "row count mismatch: {} queries, {} positives, {} negative lists",
                self.queries.len(),
                self.positives.len(),
                self.hard_negatives.len()
            )));
        }
        let nonzero = |v: &[f64], what: &str, row: usize| -> Result<()> {
            if v.iter().all(|&x| x == 0.0) {
                return Err(Error::DegenerateInput(format!(
                    "zero {what} vector in row {row}"
                )));
            }
            Ok(())
        };
        for (i, q) in self.queries.iter().enumerate() {
            nonzero(q, "query", i)?;
            nonzero(&self.positives[i], "positive", i)?;
            for n in &self.hard_negatives[i] {
                nonzero(n, "negative", i)?;
            }
        }
        Ok(())
    }

    /// Register every embedding as a tape leaf (differentiable when
    /// `requires_grad`), preserving row structure.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> Result<BatchIds> {
        self.validate()?;
        let mut leaf = |data: &Vec<f64>| -> Result<TensorId> {
            let t = Tensor::new(data.clone(), alloc::vec![data.len()])?;
            let t = if requires_grad { t.with_grad() } else { t };
            tape.leaf(t)
        };
        let queries: Vec<TensorId> = self
            .queries
            .iter()
            .map(&mut leaf)
            .collect::<Result<_>>()?;
        let positives: Vec<TensorId> = self
            .positives
            .iter()
            .map(&mut leaf)
            .collect::<Result<_>>()?;
        let negatives: Vec<Vec<TensorId>> = self
            .hard_negatives
            .iter()
            .map(|row| row.iter().map(&mut leaf).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        Ok(BatchIds {
            queries,
            positives,
            negatives,
        })
    }
}

/// Tape-level batch: ids of embedding nodes (typically encoder outputs).
#[derive(Debug, Clone)]
pub struct BatchIds {
    pub queries: Vec<TensorId>,
    pub positives: Vec<TensorId>,
    pub negatives: Vec<Vec<TensorId>>,
}

impl BatchIds {
    pub fn batch_size(&self) -> usize {
        self.queries.len()
    }
}

/// Candidate set for one row under the given variant. The row's positive is
/// always first; order after it is own negatives, other positives, other
/// queries, other rows' negatives.
pub fn denominator_set(variant: LossVariant, batch: &BatchIds, row: usize) -> Result<Vec<TensorId>> {
    let b = batch.batch_size();
    if row >= b {
        return Err(Error::Contract(format!(
            "row {row} out of range for batch of {b}"
        )));
    }
    let mut cands = Vec::new();
    cands.push(batch.positives[row]);
    cands.extend(batch.negatives[row].iter().copied());
    if matches!(
        variant,
        LossVariant::Gemini | LossVariant::Gecko | LossVariant::Qwen3
    ) {
        for j in 0..b {
            if j != row {
                cands.push(batch.positives[j]);
            }
        }
    }
    if matches!(variant, LossVariant::Gecko | LossVariant::Qwen3) {
        for j in 0..b {
            if j != row {
                cands.push(batch.queries[j]);
            }
        }
    }
    if matches!(variant, LossVariant::Qwen3) {
        for j in 0..b {
            if j != row {
                cands.extend(batch.negatives[j].iter().copied());
            }
        }
    }
    Ok(cands)
}

/// One row of the InfoNCE objective:
/// `-log( exp(sim(q,d+)/τ) / Σ_c exp(sim(q,c)/τ) )`, max-subtracted.
///
/// `positive` must appear in `candidates`; its first occurrence is the
/// numerator.
pub fn infonce_row(
    tape: &mut Tape,
    query: TensorId,
    positive: TensorId,
    candidates: &[TensorId],
    temperature: f64,
) -> Result<TensorId> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let target = candidates
        .iter()
        .position(|&c| c == positive)
        .ok_or_else(|| {
            Error::Contract("positive embedding missing from candidate set".into())
        })?;
    let sims: Vec<TensorId> = candidates
        .iter()
        .map(|&c| tape.cosine_sim(query, c))
        .collect::<Result<_>>()?;
    let stacked = tape.stack_scalars(&sims)?;
    // Logits are exactly sim/τ: rounded once, by true division.
    let logits = tape.div_scalar(stacked, temperature)?;
    tape.neg_log_softmax(logits, target)
}

/// Mean of `infonce_row` over all rows with variant-defined denominators.
/// Differentiable end-to-end through every candidate embedding.
pub fn loss_batch(tape: &mut Tape, batch: &BatchIds, cfg: &LossConfig) -> Result<TensorId> {
    cfg.validate()?;
    if batch.batch_size() == 0 {
        return Err(Error::EmptyInput("loss over an empty batch".into()));
    }
    if batch.positives.len() != batch.queries.len()
        || batch.negatives.len() != batch.queries.len()
    {
        return Err(Error::Validation("ragged contrastive batch".into()));
    }
    let mut rows = Vec::with_capacity(batch.batch_size());
    for i in 0..batch.batch_size() {
        let cands = denominator_set(cfg.variant, batch, i)?;
        rows.push(infonce_row(
            tape,
            batch.queries[i],
            batch.positives[i],
            &cands,
            cfg.temperature,
        )?);
    }
    let stacked = tape.stack_scalars(&rows)?;
    tape.mean_axis(stacked, 0)
}

/// Value-level convenience: evaluate the batch loss on a private tape.
pub fn loss_batch_value(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = batch.to_tape(&mut tape, false)?;
    let loss = loss_batch(&mut tape, &ids, cfg)?;
    Ok(tape.data(loss)[0])
}

/// Row loss from raw similarities, sharing the exact logit construction
/// (`sim/τ`, one rounding) with the tape path. Used by tests and invariants.
pub fn row_loss_from_sims(sims: &[f64], target: usize, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if target >= sims.len() {
        return Err(Error::Contract(format!(
            "target {target} out of range for {} sims",
            sims.len()
        )));
    }
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    Ok(crate::tensor::neg_log_softmax_value(&logits, target))
}

/// Cosine similarities of a query against candidate embeddings (value level).
pub fn sims_against(query: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
    candidates.iter().map(|c| cosine(query, c)).collect()
}

/// ln(2), the row loss when one negative ties the positive.
pub const LN_2: f64 = core::f64::consts::LN_2;

/// Frozen oracle value for sim(q,d+)=1, sim(q,n)=0 at τ=0.02:
/// ln(1 + e^{-50}).
pub fn uniform_gap_tail_loss() -> f64 {
    math::ln_1p(math::exp(-50.0))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use crate::tensor::gradcheck::{central_diff, max_rel_err, FD_STEP};
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_batch(rng: &mut impl Rng, b: usize, k: usize, d: usize) -> ContrastiveBatch {
        let mut vec_of = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect()
        };
        ContrastiveBatch {
            queries: vec_of(b),
            positives: vec_of(b),
            hard_negatives: (0..b).map(|_| vec_of(k)).collect(),
        }
    }

    #[test]
    fn denominator_sets_match_enumeration() {
        let mut tape = Tape::new();
        let batch = random_batch(&mut seeded_rng(1), 2, 1, 4);
        let ids = batch.to_tape(&mut tape, false).unwrap();

        // B=2, K=1, gemini, row 0 -> {d+_0, n_0, d+_1}.
        let gemini = denominator_set(LossVariant::Gemini, &ids, 0).unwrap();
        assert_eq!(
            gemini,
            alloc::vec![ids.positives[0], ids.negatives[0][0], ids.positives[1]]
        );

        // B=2, K=1, qwen3, row 0 -> {d+_0, n_0, d+_1, q_1, n_1}.
        let qwen3 = denominator_set(LossVariant::Qwen3, &ids, 0).unwrap();
        assert_eq!(
            qwen3,
            alloc::vec![
                ids.positives[0],
                ids.negatives[0][0],
                ids.positives[1],
                ids.queries[1],
                ids.negatives[1][0]
            ]
        );

        // gecko row 1 -> gemini ∪ {q_0}.
        let gecko = denominator_set(LossVariant::Gecko, &ids, 1).unwrap();
        assert_eq!(
            gecko,
            alloc::vec![
                ids.positives[1],
                ids.negatives[1][0],
                ids.positives[0],
                ids.queries[0]
            ]
        );
    }

    #[test]
    fn single_row_batches_collapse_to_hn_only() {
        let mut tape = Tape::new();
        let batch = random_batch(&mut seeded_rng(2), 1, 3, 5);
        let ids = batch.to_tape(&mut tape, false).unwrap();
        let base = denominator_set(LossVariant::HnOnly, &ids, 0).unwrap();
        for variant in LossVariant::ALL {
            assert_eq!(denominator_set(variant, &ids, 0).unwrap(), base);
        }
    }

    #[test]
    fn infonce_row_examples() {
        // Candidates = {d+} only -> exactly zero.
        let mut tape = Tape::new();
        let q = tape.constant(alloc::vec![1.0, 0.0], alloc::vec![2]).unwrap();
        let pos = tape.constant(alloc::vec![1.0, 0.0], alloc::vec![2]).unwrap();
        let loss = infonce_row(&mut tape, q, pos, &[pos], 0.02).unwrap();
        assert_eq!(tape.data(loss)[0], 0.0);

        // One negative with sim(q,n) = sim(q,d+) -> ln 2, any temperature.
        for tau in [0.02, 0.5, 3.0] {
            let mut tape = Tape::new();
            let q = tape.constant(alloc::vec![1.0, 0.0], alloc::vec![2]).unwrap();
            let pos = tape.constant(alloc::vec![1.0, 1.0], alloc::vec![2]).unwrap();
            let neg = tape.constant(alloc::vec![1.0, -1.0], alloc::vec![2]).unwrap();
            let loss = infonce_row(&mut tape, q, pos, &[pos, neg], tau).unwrap();
            assert!((tape.data(loss)[0] - LN_2).abs() < 1e-12, "tau {tau}");
        }

        // sim(q,d+)=1, sim(q,n)=0, τ=0.02: ln(1 + e^{-50}) ≈ 1.9287e-22,
        // resolved to full relative precision by the ln(1+x) tail.
        let mut tape = Tape::new();
        let q = tape.constant(alloc::vec![1.0, 0.0], alloc::vec![2]).unwrap();
        let pos = tape.constant(alloc::vec![1.0, 0.0], alloc::vec![2]).unwrap();
        let neg = tape.constant(alloc::vec![0.0, 1.0], alloc::vec![2]).unwrap();
        let loss = infonce_row(&mut tape, q, pos, &[pos, neg], 0.02).unwrap();
        let got = tape.data(loss)[0];
        assert_eq!(got, uniform_gap_tail_loss());
        let frozen = 1.9287498479639178e-22;
        assert!(((got - frozen) / frozen).abs() < 1e-10, "got {got}");
    }

    #[test]
    fn infonce_row_contract_errors() {
        let mut tape = Tape::new();
        let q = tape.constant(alloc::vec![1.0, 0.0], alloc::vec![2]).unwrap();
        let pos = tape.constant(alloc::vec![1.0, 1.0], alloc::vec![2]).unwrap();
        let other = tape.constant(alloc::vec![0.5, 1.0], alloc::vec![2]).unwrap();
        assert!(matches!(
            infonce_row(&mut tape, q, pos, &[other], 0.02),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            infonce_row(&mut tape, q, pos, &[pos], 0.0),
            Err(Error::Config(_))
        ));
        let zero = tape.constant(alloc::vec![0.0, 0.0], alloc::vec![2]).unwrap();
        assert!(matches!(
            infonce_row(&mut tape, q, pos, &[pos, zero], 0.02),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn duplicate_of_positive_still_counts() {
        // A candidate bit-identical to d+ is kept: loss = ln 2.
        let mut tape = Tape::new();
        let q = tape.constant(alloc::vec![1.0, 0.0], alloc::vec![2]).unwrap();
        let pos = tape.constant(alloc::vec![1.0, 0.2], alloc::vec![2]).unwrap();
        let dup = tape.constant(alloc::vec![1.0, 0.2], alloc::vec![2]).unwrap();
        let loss = infonce_row(&mut tape, q, pos, &[pos, dup], 0.02).unwrap();
        assert!((tape.data(loss)[0] - LN_2).abs() < 1e-12);
    }

    #[test]
    fn variants_agree_at_batch_size_one() {
        let mut rng = seeded_rng(3);
        for _ in 0..20 {
            let batch = random_batch(&mut rng, 1, 2, 6);
            let mut values = Vec::new();
            for variant in LossVariant::ALL {
                let cfg = LossConfig {
                    temperature: 0.02,
                    variant,
                };
                values.push(loss_batch_value(&batch, &cfg).unwrap());
            }
            for v in &values[1..] {
                assert!((v - values[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variant_monotonicity_row_wise() {
        // Superset denominators can only increase the loss.
        let mut rng = seeded_rng(4);
        for _ in 0..20 {
            let b = rng.gen_range(2..5);
            let k = rng.gen_range(1..3);
            let batch = random_batch(&mut rng, b, k, 6);
            let eval = |variant: LossVariant| -> f64 {
                loss_batch_value(
                    &batch,
                    &LossConfig {
                        temperature: 0.05,
                        variant,
                    },
                )
                .unwrap()
            };
            let hn = eval(LossVariant::HnOnly);
            let gemini = eval(LossVariant::Gemini);
            let gecko = eval(LossVariant::Gecko);
            let qwen3 = eval(LossVariant::Qwen3);
            assert!(gemini >= hn);
            assert!(gecko >= gemini);
            assert!(qwen3 >= gecko);
        }
    }

    #[test]
    fn appending_a_candidate_never_decreases_row_loss() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let d = 5;
            let q = unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let pos = unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let extra = unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let s_pos = cosine(&q, &pos).unwrap();
            let s_extra = cosine(&q, &extra).unwrap();
            let before = row_loss_from_sims(&[s_pos], 0, 0.1).unwrap();
            let after = row_loss_from_sims(&[s_pos, s_extra], 0, 0.1).unwrap();
            assert!(after >= before);
            assert!(before >= 0.0 && after >= 0.0);
        }
    }

    #[test]
    fn logits_are_sims_over_tau_exactly() {
        let mut rng = seeded_rng(6);
        let sims: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = 0.02;
        let mut tape = Tape::new();
        let ids: Vec<_> = sims
            .iter()
            .map(|&s| tape.constant(alloc::vec![s], alloc::vec![]).unwrap())
            .collect();
        let stacked = tape.stack_scalars(&ids).unwrap();
        let logits = tape.div_scalar(stacked, tau).unwrap();
        for (l, s) in tape.data(logits).iter().zip(&sims) {
            assert_eq!(*l, s / tau);
        }
        // τ -> τ/c is the same computation as logits scaled by c.
        let c = 4.0;
        let a = row_loss_from_sims(&sims, 0, tau / c).unwrap();
        let scaled: Vec<f64> = sims.iter().map(|s| s / tau * c).collect();
        let b = row_loss_from_sims(&scaled, 0, 1.0).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn row_loss_translation_invariant() {
        let mut rng = seeded_rng(7);
        for _ in 0..50 {
            let n = rng.gen_range(2..6);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let base = crate::tensor::neg_log_softmax_value(&logits, 0);
            let c = rng.gen_range(-20.0..20.0);
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let moved = crate::tensor::neg_log_softmax_value(&shifted, 0);
            assert!((base - moved).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        // B=4, K=2: flatten all embeddings into one parameter vector and
        // check the analytic gradient of every variant against central
        // differences.
        let d = 5;
        let b = 4;
        let k = 2;
        let mut rng = seeded_rng(8);
        let batch0 = random_batch(&mut rng, b, k, d);

        let flatten = |batch: &ContrastiveBatch| -> Vec<f64> {
            let mut flat = Vec::new();
            for q in &batch.queries {
                flat.extend(q);
            }
            for p in &batch.positives {
                flat.extend(p);
            }
            for row in &batch.hard_negatives {
                for n in row {
                    flat.extend(n);
                }
            }
            flat
        };
        let unflatten = |flat: &[f64]| -> ContrastiveBatch {
            let mut it = flat.chunks(d).map(|c| c.to_vec());
            let queries: Vec<_> = (0..b).map(|_| it.next().unwrap()).collect();
            let positives: Vec<_> = (0..b).map(|_| it.next().unwrap()).collect();
            let hard_negatives: Vec<Vec<_>> = (0..b)
                .map(|_| (0..k).map(|_| it.next().unwrap()).collect())
                .collect();
            ContrastiveBatch {
                queries,
                positives,
                hard_negatives,
            }
        };

        for variant in LossVariant::ALL {
            let cfg = LossConfig {
                temperature: 0.05,
                variant,
            };
            let mut tape = Tape::new();
            let ids = batch0.to_tape(&mut tape, true).unwrap();
            let loss = loss_batch(&mut tape, &ids, &cfg).unwrap();
            tape.backward(loss).unwrap();

            let mut analytic = Vec::new();
            let mut harvest = |id: TensorId| {
                analytic.extend(tape.grad(id).unwrap().to_vec());
            };
            for &q in &ids.queries {
                harvest(q);
            }
            for &p in &ids.positives {
                harvest(p);
            }
            for row in &ids.negatives {
                for &n in row {
                    harvest(n);
                }
            }

            let flat0 = flatten(&batch0);
            let numeric = central_diff(
                |probe| loss_batch_value(&unflatten(probe), &cfg).unwrap(),
                &flat0,
                FD_STEP,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-4, "variant {}: max rel err {err}", variant.name());
        }
    }
}
