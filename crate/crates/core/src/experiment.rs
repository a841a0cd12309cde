//! Desk-scale retrieval and QA recipes shared by the command line and the
//! acceptance tests.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{Bound, Encoder, ModelConfig};
use crate::error::Result;
use crate::gradcheck::{gradcheck_many, Coverage, GradcheckReport};
use crate::objectives::{total_loss, LossConfig, Objective, Similarity};
use crate::qa::{evaluate_qa, finetune_qa, CellSelectionHead, QaTrainConfig};
use crate::retrieval::{dense_run, mine_hard_negatives, pair_gold, recall_at_k, RecallMetrics};
use crate::synthetic::{generate_qa, generate_synthetic, SyntheticConfig};
use crate::table::{split_corpus, Corpus, TableTextPair};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;
use crate::tokenize::{build_vocab, Vocab};
use crate::train::{finetune_retrieval, pretrain, TrainConfig, TrainLog};

/// Pretrain then fine-tune a bi-encoder on a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecipe {
    pub corpus: SyntheticConfig,
    /// Held-out share of the corpus; `None` trains and evaluates on all pairs.
    pub dev_fraction: Option<f64>,
    /// `vocab_size` is replaced by the built vocabulary's size.
    pub model: ModelConfig,
    pub pretrain: Option<TrainConfig>,
    pub finetune: TrainConfig,
    /// Mined with the pretrained encoder before fine-tuning; 0 disables.
    pub hard_negatives: usize,
}

impl RetrievalRecipe {
    /// 64 pairs, d = 32, two layers; trained and evaluated on the same pairs.
    pub fn desk() -> Self {
        let corpus = SyntheticConfig::default();
        Self {
            corpus,
            dev_fraction: None,
            model: ModelConfig::desk(0),
            pretrain: Some(TrainConfig {
                batch_size: 16,
                learning_rate: 1e-3,
                epochs: 10,
                similarity: Similarity::Cosine,
                ..TrainConfig::pretrain()
            }),
            finetune: TrainConfig {
                batch_size: 16,
                learning_rate: 1e-3,
                epochs: 30,
                similarity: Similarity::Cosine,
                ..TrainConfig::finetune()
            },
            hard_negatives: 0,
        }
    }

    /// Held-out variant for comparing objectives and negatives.
    pub fn held_out() -> Self {
        let mut r = Self::desk();
        r.corpus.n_pairs = 96;
        r.dev_fraction = Some(0.25);
        r
    }

    /// Applies `seed` to the corpus, split, model init, and both training runs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.seed = seed;
        if let Some(p) = self.pretrain.as_mut() {
            p.seed = seed;
        }
        self.finetune.seed = seed;
        self
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        if let Some(p) = self.pretrain.as_mut() {
            p.objective = objective;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub vocab: Vocab,
    pub encoder: Encoder,
    /// Untrained encoder on the evaluation pairs.
    pub untrained: RecallMetrics,
    /// Trained encoder on the training pairs.
    pub train: RecallMetrics,
    /// Trained encoder on the held-out pairs, when there are any.
    pub dev: Option<RecallMetrics>,
    pub pretrain_log: Option<TrainLog>,
    pub finetune_log: TrainLog,
}

/// R@1, R@10, R@50 of text-to-table retrieval among `pairs`.
pub fn evaluate_pairs(enc: &Encoder, vocab: &Vocab, pairs: &[TableTextPair], cfg: &TrainConfig) -> Result<RecallMetrics> {
    let run = dense_run(enc, vocab, pairs, cfg.similarity, 50)?;
    recall_at_k(&run, &pair_gold(pairs), &[1, 10, 50])
}

pub fn run_retrieval(recipe: &RetrievalRecipe) -> Result<RetrievalOutcome> {
    let corpus = generate_synthetic(&recipe.corpus)?;
    let vocab = build_vocab(&corpus, 1);
    let (train, dev) = match recipe.dev_fraction {
        Some(f) => {
            let (t, d) = split_corpus(&corpus, f, recipe.corpus.seed)?;
            (t.into_pairs(), d.into_pairs())
        }
        None => (corpus.into_pairs(), Vec::new()),
    };
    run_retrieval_on(recipe, &vocab, &train, &dev)
}

/// [`run_retrieval`] on given splits; the corpus settings are ignored.
pub fn run_retrieval_on(
    recipe: &RetrievalRecipe,
    vocab: &Vocab,
    train: &[TableTextPair],
    dev: &[TableTextPair],
) -> Result<RetrievalOutcome> {
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..recipe.model.clone()
    };
    let mut enc = Encoder::init(model)?;
    let untrained = evaluate_pairs(&enc, vocab, train, &recipe.finetune)?;
    let pretrain_log = match &recipe.pretrain {
        Some(cfg) => Some(pretrain(&mut enc, vocab, train, &[], cfg, &mut ())?),
        None => None,
    };
    let negatives = if recipe.hard_negatives > 0 {
        Some(mine_hard_negatives(&enc, vocab, train, recipe.hard_negatives, recipe.finetune.similarity)?.negatives)
    } else {
        None
    };
    let ft = TrainConfig {
        hard_negatives_per_query: recipe.hard_negatives,
        ..recipe.finetune
    };
    let finetune_log = finetune_retrieval(&mut enc, vocab, train, &[], &ft, negatives.as_ref(), &mut ())?;
    let train_m = evaluate_pairs(&enc, vocab, train, &ft)?;
    let dev_m = if dev.is_empty() {
        None
    } else {
        Some(evaluate_pairs(&enc, vocab, dev, &ft)?)
    };
    Ok(RetrievalOutcome {
        vocab: vocab.clone(),
        encoder: enc,
        untrained,
        train: train_m,
        dev: dev_m,
        pretrain_log,
        finetune_log,
    })
}

/// Dev recall after fine-tuning without and then with `n` mined negatives
/// per query, both starting from one shared pretrained encoder.
pub fn compare_hard_negatives(recipe: &RetrievalRecipe, n: usize) -> Result<(RecallMetrics, RecallMetrics)> {
    let corpus = generate_synthetic(&recipe.corpus)?;
    let vocab = build_vocab(&corpus, 1);
    let (train, dev) = split_corpus(&corpus, recipe.dev_fraction.unwrap_or(0.1), recipe.corpus.seed)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..recipe.model.clone()
    };
    let mut base = Encoder::init(model)?;
    if let Some(cfg) = &recipe.pretrain {
        pretrain(&mut base, &vocab, train.pairs(), &[], cfg, &mut ())?;
    }
    let mut out = Vec::with_capacity(2);
    for k in [0, n] {
        let mut enc = base.clone();
        let ft = TrainConfig {
            hard_negatives_per_query: k,
            ..recipe.finetune
        };
        let negatives = if k > 0 {
            Some(mine_hard_negatives(&enc, &vocab, train.pairs(), k, ft.similarity)?.negatives)
        } else {
            None
        };
        finetune_retrieval(&mut enc, &vocab, train.pairs(), &[], &ft, negatives.as_ref(), &mut ())?;
        out.push(evaluate_pairs(&enc, &vocab, dev.pairs(), &ft)?);
    }
    let with = out.pop().unwrap();
    Ok((out.pop().unwrap(), with))
}

/// Dev-split recall of the pretrained encoder with no retrieval fine-tuning,
/// so differences come from the pretraining objective alone.
pub fn pretrained_dev_recall(recipe: &RetrievalRecipe) -> Result<RecallMetrics> {
    let corpus = generate_synthetic(&recipe.corpus)?;
    let vocab = build_vocab(&corpus, 1);
    let (train, dev) = split_corpus(&corpus, recipe.dev_fraction.unwrap_or(0.1), recipe.corpus.seed)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..recipe.model.clone()
    };
    let mut enc = Encoder::init(model)?;
    let cfg = recipe.pretrain.unwrap_or_else(TrainConfig::pretrain);
    pretrain(&mut enc, &vocab, train.pairs(), &[], &cfg, &mut ())?;
    evaluate_pairs(&enc, &vocab, dev.pairs(), &cfg)
}

/// Dev R@1 per temperature, each from an identically seeded run.
/// Falls back to training-set R@1 when there is no dev split.
pub fn tau_sweep(recipe: &RetrievalRecipe, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let corpus = generate_synthetic(&recipe.corpus)?;
    let vocab = build_vocab(&corpus, 1);
    let (train, dev) = match recipe.dev_fraction {
        Some(f) => {
            let (t, d) = split_corpus(&corpus, f, recipe.corpus.seed)?;
            (t.into_pairs(), d.into_pairs())
        }
        None => (corpus.into_pairs(), Vec::new()),
    };
    tau_sweep_on(recipe, &vocab, &train, &dev, taus)
}

/// [`tau_sweep`] on given splits.
pub fn tau_sweep_on(
    recipe: &RetrievalRecipe,
    vocab: &Vocab,
    train: &[TableTextPair],
    dev: &[TableTextPair],
    taus: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut r = recipe.clone();
        if let Some(p) = r.pretrain.as_mut() {
            p.tau = tau;
        }
        r.finetune.tau = tau;
        let out = run_retrieval_on(&r, vocab, train, dev)?;
        let r1 = out.dev.as_ref().unwrap_or(&out.train).at(1).unwrap_or(0.0);
        rows.push((tau, r1));
    }
    Ok(rows)
}

/// Cell-selection fine-tuning on synthetic questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecipe {
    pub corpus: SyntheticConfig,
    pub model: ModelConfig,
    pub train: QaTrainConfig,
}

impl QaRecipe {
    /// 32 questions, 300 steps.
    pub fn desk() -> Self {
        Self {
            corpus: SyntheticConfig {
                n_pairs: 32,
                ..SyntheticConfig::default()
            },
            model: ModelConfig::desk(0),
            train: QaTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaOutcome {
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub head: CellSelectionHead,
    pub losses: Vec<f64>,
    pub accuracy_before: f64,
    pub accuracy: f64,
}

pub fn run_qa(recipe: &QaRecipe) -> Result<QaOutcome> {
    let examples = generate_qa(&recipe.corpus)?;
    let corpus = Corpus::new(examples.iter().map(|e| e.pair.clone()).collect())?;
    let vocab = build_vocab(&corpus, 1);
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..recipe.model.clone()
    };
    let mut head = CellSelectionHead::init(model.d_model, model.seed);
    let mut enc = Encoder::init(model)?;
    let accuracy_before = evaluate_qa(&enc, &head, &vocab, &examples)?;
    let losses = finetune_qa(&mut enc, &mut head, &vocab, &examples, &recipe.train)?;
    let accuracy = evaluate_qa(&enc, &head, &vocab, &examples)?;
    Ok(QaOutcome {
        vocab,
        encoder: enc,
        head,
        losses,
        accuracy_before,
        accuracy,
    })
}

/// Finite-difference check of the full pretraining loss with respect to every
/// encoder parameter, on a two-pair synthetic batch with a fixed masking draw.
pub fn loss_gradcheck(
    model: &ModelConfig,
    seed: u64,
    h: f64,
    tol: f64,
    coverage: Coverage,
) -> Result<GradcheckReport> {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_pairs: 2,
        max_rows: 2,
        seed,
        ..SyntheticConfig::default()
    })?;
    let vocab = build_vocab(&corpus, 1);
    let enc = Encoder::init(ModelConfig {
        vocab_size: vocab.len(),
        seed,
        ..model.clone()
    })?;
    let pairs = corpus.into_pairs();
    let xs: Vec<Tensor> = enc.params().params().iter().map(|p| p.tensor.clone()).collect();
    let cfg = LossConfig::default();
    gradcheck_many(
        |g, vars| {
            let bound = Bound { vars: vars.to_vec() };
            let mut masking = rng::stream(seed, purpose::MASKING, 0);
            let parts = total_loss(&enc, g, &bound, &pairs, &vocab, &cfg, &mut masking, None)?;
            Ok(parts.total)
        },
        &xs,
        h,
        tol,
        coverage,
    )
}
