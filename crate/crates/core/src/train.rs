//! Pretraining and retrieval fine-tuning loops.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{serialize, Encoder, Modality, SerializedInput};
use crate::error::{Error, Result};
use crate::objectives::{
    infonce_with_negatives, pool, total_loss, AnchorNegatives, LossConfig, Objective, Similarity,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::qa::CellSelectionHead;
use crate::retrieval::{dense_run, pair_gold, recall_at_k};
use crate::rng::{self, purpose};
use crate::table::TableTextPair;
use crate::tensor::{Graph, Var};
use crate::tokenize::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub tau: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Fine-tuning only.
    pub hard_negatives_per_query: usize,
    pub similarity: Similarity,
    pub symmetric_cmcr: bool,
    pub objective: Objective,
}

impl TrainConfig {
    /// Pretraining defaults: batch 16, lr 5e-5, 10 epochs, decay 0.01.
    pub fn pretrain() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 5e-5,
            epochs: 10,
            weight_decay: 0.01,
            tau: 0.05,
            seed: 0,
            eval_every: 0,
            hard_negatives_per_query: 0,
            similarity: Similarity::Dot,
            symmetric_cmcr: false,
            objective: Objective::FULL,
        }
    }

    /// Retrieval fine-tuning defaults: batch 32, lr 2e-5, 100 epochs, decay
    /// 0.01, at most 8 hard negatives per query when a negatives map is given.
    pub fn finetune() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 2e-5,
            epochs: 100,
            hard_negatives_per_query: 8,
            ..Self::pretrain()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            similarity: self.similarity,
            symmetric: self.symmetric_cmcr,
            objective: self.objective,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.learning_rate, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidConfig {
                name,
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        self.loss().validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_mlm")]
    pub mlm: f64,
    #[serde(rename = "L_cmcr")]
    pub cmcr: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Hooks called during training. Errors abort the run.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called at every evaluation point and once at the end, with the
    /// encoder as of that step.
    fn on_eval(&mut self, _record: &EvalRecord, _encoder: &Encoder) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Everything needed to run a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub vocab: Vocab,
    pub similarity: Similarity,
    pub qa_head: Option<CellSelectionHead>,
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, purpose::SHUFFLE, epoch as u64);
    order.shuffle(&mut r);
    order
}

/// Dev R@1 and R@10 of text-to-table retrieval over the dev tables.
pub fn retrieval_metrics(
    enc: &Encoder,
    vocab: &Vocab,
    dev: &[TableTextPair],
    similarity: Similarity,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if dev.is_empty() {
        return Ok(out);
    }
    let run = dense_run(enc, vocab, dev, similarity, 10)?;
    let m = recall_at_k(&run, &pair_gold(dev), &[1, 10])?;
    for (k, r) in m.recall {
        out.insert(alloc::format!("R@{k}"), r);
    }
    Ok(out)
}

/// Pretraining loss on `dev` with a fixed masking stream, in batches of the
/// training size (last batch may be partial).
pub fn dev_loss(enc: &Encoder, vocab: &Vocab, dev: &[TableTextPair], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    let mut batches = 0;
    for (i, chunk) in dev.chunks(cfg.batch_size).enumerate() {
        let mut g = Graph::new();
        let bound = enc.bind(&mut g, false);
        let mut masking = rng::stream(cfg.seed, purpose::EVAL, i as u64);
        let parts = total_loss(enc, &mut g, &bound, chunk, vocab, &cfg.loss(), &mut masking, None)?;
        sum += g.value(parts.total).item();
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { sum / batches as f64 })
}

fn pretrain_eval(
    enc: &Encoder,
    vocab: &Vocab,
    dev: &[TableTextPair],
    cfg: &TrainConfig,
    step: usize,
) -> Result<EvalRecord> {
    let mut metrics = retrieval_metrics(enc, vocab, dev, cfg.similarity)?;
    if !dev.is_empty() {
        metrics.insert("L".into(), dev_loss(enc, vocab, dev, cfg)?);
    }
    Ok(EvalRecord { step, metrics })
}

/// Multi-task pretraining: each step draws `batch_size` pairs from a seeded
/// per-epoch shuffle (the last partial batch is dropped) and minimizes
/// `L_cmcr + L_mlm`.
pub fn pretrain(
    enc: &mut Encoder,
    vocab: &Vocab,
    train: &[TableTextPair],
    dev: &[TableTextPair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::NoFullBatch {
            corpus: train.len(),
            batch: cfg.batch_size,
        });
    }
    let loss_cfg = cfg.loss();
    let opt_cfg = cfg.optimizer();
    let mut opt = AdamW::new();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        for idx in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<TableTextPair> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut masking = rng::stream(cfg.seed, purpose::MASKING, step as u64);
            let mut dropout = rng::stream(cfg.seed, purpose::DROPOUT, step as u64);
            let mut g = Graph::new();
            let bound = enc.bind(&mut g, true);
            let parts = total_loss(
                enc,
                &mut g,
                &bound,
                &batch,
                vocab,
                &loss_cfg,
                &mut masking,
                Some(&mut dropout),
            )?;
            let rec = StepRecord {
                step,
                loss: g.value(parts.total).item(),
                mlm: g.value(parts.mlm).item(),
                cmcr: g.value(parts.cmcr).item(),
                lr: cfg.learning_rate,
            };
            if !(rec.loss.is_finite() && rec.mlm.is_finite() && rec.cmcr.is_finite()) {
                return Err(Error::NonFiniteLoss(step));
            }
            g.backward(parts.total)?;
            let grads = enc.params().grads(&g, &bound.vars);
            opt.step(enc.params_mut(), &grads, &opt_cfg)?;
            observer.on_step(&rec)?;
            log.steps.push(rec);
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let ev = pretrain_eval(enc, vocab, dev, cfg, step)?;
                observer.on_eval(&ev, enc)?;
                log.evals.push(ev);
            }
        }
    }
    if log.evals.last().map(|e| e.step) != Some(step) {
        let ev = pretrain_eval(enc, vocab, dev, cfg, step)?;
        observer.on_eval(&ev, enc)?;
        log.evals.push(ev);
    }
    Ok(log)
}

/// Checks that every listed negative is a known non-gold table of the pool.
pub fn validate_hard_negatives(
    pool: &[TableTextPair],
    negatives: &BTreeMap<String, Vec<String>>,
) -> Result<()> {
    let ids: BTreeMap<&str, ()> = pool.iter().map(|p| (p.id.as_str(), ())).collect();
    for (q, tables) in negatives {
        for t in tables {
            if t == q {
                return Err(Error::HardNegativeIsGold {
                    query: q.clone(),
                    table: t.clone(),
                });
            }
            if !ids.contains_key(t.as_str()) {
                return Err(Error::UnknownTable {
                    query: q.clone(),
                    table: t.clone(),
                });
            }
        }
    }
    Ok(())
}

fn text_input(pair: &TableTextPair, vocab: &Vocab, enc: &Encoder) -> Result<SerializedInput> {
    let ids = vocab.encode_text(&pair.text);
    serialize(Some(&ids), None, Modality::Text, vocab, enc.config())
}

fn table_input(pair: &TableTextPair, vocab: &Vocab, enc: &Encoder) -> Result<SerializedInput> {
    serialize(None, Some(&pair.table), Modality::Table, vocab, enc.config())
}

fn pooled_rows(
    enc: &Encoder,
    g: &mut Graph,
    bound: &crate::encoder::Bound,
    inputs: &[&SerializedInput],
    dropout: &mut crate::rng::Rng,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(inputs.len());
    for x in inputs {
        let h = enc.forward(g, bound, x, Some(dropout))?;
        let r = pool(g, h, &x.attention_mask)?;
        let d = g.shape(r)[0];
        rows.push(g.reshape(r, &[1, d])?);
    }
    g.concat_rows(&rows)
}

/// Bi-encoder fine-tuning: queries as text-only inputs, tables as table-only
/// inputs, in-batch contrastive loss. Each query's mined negatives (at most
/// `hard_negatives_per_query`) join only that query's denominator. Partial
/// batches are kept.
pub fn finetune_retrieval(
    enc: &mut Encoder,
    vocab: &Vocab,
    train: &[TableTextPair],
    dev: &[TableTextPair],
    cfg: &TrainConfig,
    hard_negatives: Option<&BTreeMap<String, Vec<String>>>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(h) = hard_negatives {
        validate_hard_negatives(train, h)?;
    }
    let pos: BTreeMap<&str, usize> = train.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let k = if hard_negatives.is_some() { cfg.hard_negatives_per_query } else { 0 };
    let texts: Vec<SerializedInput> =
        train.iter().map(|p| text_input(p, vocab, enc)).collect::<Result<_>>()?;
    let tables: Vec<SerializedInput> =
        train.iter().map(|p| table_input(p, vocab, enc)).collect::<Result<_>>()?;

    let loss_cfg = cfg.loss();
    let opt_cfg = cfg.optimizer();
    let mut opt = AdamW::new();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        for idx in order.chunks(cfg.batch_size) {
            // tables to encode: the batch's gold tables first, then negatives
            let mut needed: Vec<usize> = idx.to_vec();
            let mut slot: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(s, &i)| (i, s)).collect();
            let mut neg_rows = Vec::with_capacity(idx.len() * k);
            let mut valid = Vec::with_capacity(idx.len() * k);
            for &q in idx {
                let listed: &[String] = hard_negatives
                    .and_then(|h| h.get(&train[q].id))
                    .map(|v| v.as_slice())
                    .unwrap_or(&[]);
                for j in 0..k {
                    match listed.get(j) {
                        Some(t) => {
                            let ti = pos[t.as_str()];
                            let s = *slot.entry(ti).or_insert_with(|| {
                                needed.push(ti);
                                needed.len() - 1
                            });
                            neg_rows.push(s);
                            valid.push(true);
                        }
                        None => {
                            neg_rows.push(0);
                            valid.push(false);
                        }
                    }
                }
            }

            let mut dropout = rng::stream(cfg.seed, purpose::DROPOUT, step as u64);
            let mut g = Graph::new();
            let bound = enc.bind(&mut g, true);
            let q_in: Vec<&SerializedInput> = idx.iter().map(|&i| &texts[i]).collect();
            let t_in: Vec<&SerializedInput> = needed.iter().map(|&i| &tables[i]).collect();
            let anchors = pooled_rows(enc, &mut g, &bound, &q_in, &mut dropout)?;
            let all_tables = pooled_rows(enc, &mut g, &bound, &t_in, &mut dropout)?;
            let gold_rows: Vec<usize> = (0..idx.len()).collect();
            let positives = g.gather_rows(all_tables, &gold_rows)?;
            let negs = if k > 0 {
                Some(AnchorNegatives {
                    reps: g.gather_rows(all_tables, &neg_rows)?,
                    per_anchor: k,
                    valid: &valid,
                })
            } else {
                None
            };
            let loss = infonce_with_negatives(&mut g, anchors, positives, negs, &loss_cfg)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            g.backward(loss)?;
            let grads = enc.params().grads(&g, &bound.vars);
            opt.step(enc.params_mut(), &grads, &opt_cfg)?;
            let rec = StepRecord {
                step,
                loss: value,
                mlm: 0.0,
                cmcr: value,
                lr: cfg.learning_rate,
            };
            observer.on_step(&rec)?;
            log.steps.push(rec);
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let ev = EvalRecord {
                    step,
                    metrics: retrieval_metrics(enc, vocab, dev, cfg.similarity)?,
                };
                observer.on_eval(&ev, enc)?;
                log.evals.push(ev);
            }
        }
    }
    if log.evals.last().map(|e| e.step) != Some(step) {
        let ev = EvalRecord {
            step,
            metrics: retrieval_metrics(enc, vocab, dev, cfg.similarity)?,
        };
        observer.on_eval(&ev, enc)?;
        log.evals.push(ev);
    }
    Ok(log)
}
