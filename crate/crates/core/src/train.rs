//! Two-stage contrastive training: AdamW with linear warmup/decay, seeded
//! batch assembly, and the stage orchestration that links checkpoints by
//! content hash.
//!
//! One training step is a serial critical section over the model parameters:
//! fresh tape, embed the batch, `loss_batch`, backward, AdamW update. Batches
//! are drawn from a seeded per-epoch shuffle with the last partial batch
//! dropped, so a (config, seed) pair fully determines the loss trace.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint, CheckpointMeta};
use crate::encoder::{EncoderConfig, InstructedInput, Model};
use crate::error::{Error, Result};
use crate::loss::{loss_batch, BatchIds, LossConfig, LossVariant};
use crate::math;
use crate::rng::{seeded_rng, subsystem_seed};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub n_hard_negatives: usize,
    pub temperature: f64,
    pub loss_variant: LossVariant,
    pub seed: u64,
}

impl StageConfig {
    /// Reference pretraining hyperparameters (8B-scale; kept for the
    /// "paper" preset, not meant to run at desk scale).
    pub fn paper_pretrain() -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            peak_lr: 1e-5,
            batch_size: 2048,
            n_steps: 5_773,
            warmup_steps: 100,
            weight_decay: 0.01,
            n_hard_negatives: 1,
            temperature: 0.02,
            loss_variant: LossVariant::HnOnly,
            seed: 0,
        }
    }

    /// Reference fine-tuning hyperparameters.
    pub fn paper_finetune() -> Self {
        StageConfig {
            stage: Stage::Finetune,
            peak_lr: 2e-6,
            batch_size: 128,
            n_steps: 33_668,
            warmup_steps: 100,
            weight_decay: 0.01,
            n_hard_negatives: 4,
            temperature: 0.02,
            loss_variant: LossVariant::HnOnly,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "peak_lr must be > 0, got {}",
                self.peak_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.warmup_steps > self.n_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds n_steps {}",
                self.warmup_steps, self.n_steps
            )));
        }
        if self.n_hard_negatives == 0 {
            return Err(Error::Config("n_hard_negatives must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            variant: self.loss_variant,
        }
    }
}

/// Learning rate at `step`: linear from 0 to `peak_lr` over the warmup, then
/// linear decay to exactly 0 at `n_steps`.
pub fn lr_at(step: usize, cfg: &StageConfig) -> Result<f64> {
    if step > cfg.n_steps {
        return Err(Error::Contract(format!(
            "step {step} outside schedule of {} steps",
            cfg.n_steps
        )));
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.peak_lr);
        }
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let remaining = (cfg.n_steps - step) as f64;
    let decay_span = (cfg.n_steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * remaining / decay_span)
}

/// Adam moment hyperparameters (reference values; the paper leaves them
/// unstated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model, hyper: AdamHyper) -> Self {
        let m = model
            .params()
            .iter()
            .map(|p| alloc::vec![0.0; p.data.len()])
            .collect::<Vec<_>>();
        OptimizerState {
            hyper,
            step: 0,
            m: m.clone(),
            v: m,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `θ ← θ − lr·( m̂/(√v̂+ε) + wd·θ )`.
pub fn adamw_step(
    model: &mut Model,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let params = model.params_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer saw {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.data.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match parameter '{}' ({})",
                grads[i].len(),
                p.name,
                p.data.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let bias1 = 1.0 - math::powf(beta1, t);
    let bias2 = 1.0 - math::powf(beta2, t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.data.len() {
            let g = grads[i][j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p.data[j] -= lr * (m_hat / (math::sqrt(v_hat) + eps) + weight_decay * p.data[j]);
        }
    }
    Ok(())
}

/// A triplet ready for batching: texts are already instruction-rendered, so
/// they embed as bare inputs.
#[derive(Debug, Clone)]
struct TrainRow {
    query: InstructedInput,
    positive: InstructedInput,
    negatives: Vec<InstructedInput>,
}

/// Run one stage over the triplets, mutating the model in place. Returns the
/// per-step loss trace. Rows with fewer than `n_hard_negatives` negatives are
/// rejected at load; a NaN loss aborts with the step number.
pub fn train_stage(
    model: &mut Model,
    triplets: &[crate::data::TrainingTriplet],
    cfg: &StageConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let rows: Vec<TrainRow> = triplets
        .iter()
        .filter(|t| t.negative_texts.len() >= cfg.n_hard_negatives)
        .map(|t| TrainRow {
            query: InstructedInput::bare(t.query_text.clone()),
            positive: InstructedInput::bare(t.positive_text.clone()),
            negatives: t.negative_texts[..cfg.n_hard_negatives]
                .iter()
                .map(|n| InstructedInput::bare(n.clone()))
                .collect(),
        })
        .collect();
    if cfg.n_steps == 0 {
        return Ok(Vec::new());
    }
    if rows.len() < cfg.batch_size {
        return Err(Error::Validation(format!(
            "{} usable rows cannot fill a batch of {} \
             (rows with fewer than {} negatives are rejected at load)",
            rows.len(),
            cfg.batch_size,
            cfg.n_hard_negatives
        )));
    }

    let mut shuffle_rng = seeded_rng(subsystem_seed(cfg.seed, "batch-shuffle"));
    let loss_cfg = cfg.loss_config();
    let batches_per_epoch = rows.len() / cfg.batch_size;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut trace = Vec::with_capacity(cfg.n_steps);
    let mut opt = OptimizerState::new(model, AdamHyper::default());

    for step in 0..cfg.n_steps {
        let batch_in_epoch = step % batches_per_epoch;
        if batch_in_epoch == 0 {
            order.shuffle(&mut shuffle_rng);
        }
        let ids = &order[batch_in_epoch * cfg.batch_size..(batch_in_epoch + 1) * cfg.batch_size];

        let mut tape = Tape::new();
        let graph = model.register(&mut tape, true)?;
        let mut batch = BatchIds {
            queries: Vec::with_capacity(ids.len()),
            positives: Vec::with_capacity(ids.len()),
            negatives: Vec::with_capacity(ids.len()),
        };
        for &r in ids {
            let row = &rows[r];
            batch.queries.push(graph.embed_input(&mut tape, &row.query)?);
            batch
                .positives
                .push(graph.embed_input(&mut tape, &row.positive)?);
            let negs = row
                .negatives
                .iter()
                .map(|n| graph.embed_input(&mut tape, n))
                .collect::<Result<Vec<_>>>()?;
            batch.negatives.push(negs);
        }
        let loss = loss_batch(&mut tape, &batch, &loss_cfg)?;
        let loss_value = tape.data(loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite loss at step {step}, aborting"
            )));
        }
        tape.backward(loss)?;

        let grads: Vec<Vec<f64>> = graph
            .ids()
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| alloc::vec![0.0; tape.data(id).len()])
            })
            .collect();
        let lr = lr_at(step, cfg)?;
        adamw_step(model, &grads, &mut opt, lr, cfg.weight_decay)?;
        trace.push(loss_value);
    }
    Ok(trace)
}

/// Train one stage and snapshot the result.
pub fn train_stage_checkpoint(
    model: &mut Model,
    triplets: &[crate::data::TrainingTriplet],
    cfg: &StageConfig,
    lineage: Vec<String>,
) -> Result<(Checkpoint, Vec<f64>)> {
    let trace = train_stage(model, triplets, cfg)?;
    let ckpt = Checkpoint::from_model(
        model,
        CheckpointMeta {
            stage: Some(cfg.stage.name().into()),
            step: cfg.n_steps as u64,
            seed: cfg.seed,
            lineage,
            merge_sources: Vec::new(),
        },
    );
    Ok((ckpt, trace))
}

/// Both stages plus traces; the fine-tune lineage names the pretrain
/// checkpoint hash.
#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub pretrain: Checkpoint,
    pub pretrain_trace: Vec<f64>,
    pub finetune: Checkpoint,
    pub finetune_trace: Vec<f64>,
}

/// Initialize from the encoder config, pretrain, then fine-tune from the
/// stage-1 checkpoint through an encode/decode round trip (the bit-exact
/// load contract), recording lineage.
pub fn run_two_stage(
    encoder: &EncoderConfig,
    pretrain_cfg: &StageConfig,
    finetune_cfg: &StageConfig,
    pretrain_data: &[crate::data::TrainingTriplet],
    finetune_data: &[crate::data::TrainingTriplet],
) -> Result<TwoStageOutcome> {
    if pretrain_cfg.stage != Stage::Pretrain || finetune_cfg.stage != Stage::Finetune {
        return Err(Error::Validation(
            "two-stage run needs a pretrain config followed by a finetune config".into(),
        ));
    }
    pretrain_cfg.validate()?;
    finetune_cfg.validate()?;

    let mut model = Model::init(encoder.clone())?;
    let (pretrain, pretrain_trace) =
        train_stage_checkpoint(&mut model, pretrain_data, pretrain_cfg, Vec::new())?;

    let stage1_bytes = pretrain.encode()?;
    let stage1_hash = sha256_hex(&stage1_bytes);
    let reloaded = Checkpoint::decode(&stage1_bytes)?;
    let mut model2 = reloaded.to_model()?;

    let (finetune, finetune_trace) = train_stage_checkpoint(
        &mut model2,
        finetune_data,
        finetune_cfg,
        alloc::vec![stage1_hash],
    )?;
    Ok(TwoStageOutcome {
        pretrain,
        pretrain_trace,
        finetune,
        finetune_trace,
    })
}

/// Moving average of a loss trace with the given window; entry `i` covers
/// the window ending at `i` and the result starts at index `window - 1`.
pub fn moving_average(trace: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || trace.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(trace.len() - window + 1);
    let mut sum: f64 = trace[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..trace.len() {
        sum += trace[i] - trace[i - window];
        out.push(sum / window as f64);
    }
    out
}
