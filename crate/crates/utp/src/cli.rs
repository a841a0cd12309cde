//! The `utp` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use utp_core::experiment::{evaluate_pairs, loss_gradcheck, tau_sweep_on, RetrievalRecipe};
use utp_core::gradcheck::Coverage;
use utp_core::objectives::{Objective, Similarity};
use utp_core::qa::{evaluate_qa, finetune_qa, CellSelectionHead, QaTrainConfig};
use utp_core::retrieval::{bm25_run, dense_run, mine_hard_negatives, pair_gold, recall_at_k};
use utp_core::synthetic::{generate_qa, generate_synthetic, SyntheticConfig};
use utp_core::table::split_corpus;
use utp_core::tokenize::build_vocab;
use utp_core::train::{finetune_retrieval, pretrain, Checkpoint, TrainConfig};
use utp_core::{Corpus, Encoder, ModelConfig, TableTextPair, Vocab};

use crate::checkpoint;
use crate::config::ConfigFile;
use crate::corpus::{
    negatives_to_string, read_corpus, read_negatives, read_qa, read_vocab, write_corpus, write_qa, write_text,
    write_vocab,
};
use crate::error::{Error, Result};
use crate::logs::{self, JsonlObserver};
use crate::manifest::RunManifest;

/// Gradcheck threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "utp", version, about = "Table-text encoder pretraining, retrieval, and QA at desk scale")]
pub struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, env = "UTP_SEED", global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic table-text corpus.
    GenSynthetic(GenArgs),
    /// Write a synthetic cell-selection QA set.
    GenQa(GenArgs),
    /// Check a corpus file and report its size.
    Validate(ValidateArgs),
    /// Seeded train/dev split of a corpus.
    Split(SplitArgs),
    /// Multi-task pretraining from scratch.
    Pretrain(PretrainArgs),
    /// Bi-encoder retrieval fine-tuning of a checkpoint.
    FinetuneRetrieval(FinetuneArgs),
    /// Cell-selection QA fine-tuning of a checkpoint.
    FinetuneQa(FinetuneQaArgs),
    /// Text-to-table retrieval recall of a checkpoint or of BM25.
    EvalRetrieval(EvalRetrievalArgs),
    /// Top-ranked non-gold tables per query.
    MineNegatives(MineArgs),
    /// Denotation accuracy of a QA checkpoint.
    EvalQa(EvalQaArgs),
    /// Finite-difference check of the full pretraining loss gradient.
    Gradcheck(GradcheckArgs),
    /// Dev R@1 of one pretrain + fine-tune run per temperature.
    TauSweep(TauSweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 64)]
    pub pairs: usize,
    #[arg(long, default_value_t = 128)]
    pub entities: usize,
    #[arg(long, default_value_t = 8)]
    pub attributes: usize,
    #[arg(long, default_value_t = 4)]
    pub max_rows: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Treat the file as a QA set.
    #[arg(long)]
    pub qa: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub dev_out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelPreset {
    Tiny,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Full,
    Mlm,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimilarityArg {
    Dot,
    Cosine,
}

/// Training overrides; each wins over the config file and the defaults.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long, value_enum)]
    pub similarity: Option<SimilarityArg>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Average both directions of each contrastive term.
    #[arg(long)]
    pub symmetric: bool,
}

impl TrainFlags {
    fn apply(&self, mut c: TrainConfig, seed: Option<u64>) -> TrainConfig {
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.similarity {
            c.similarity = match v {
                SimilarityArg::Dot => Similarity::Dot,
                SimilarityArg::Cosine => Similarity::Cosine,
            };
        }
        if let Some(v) = self.objective {
            c.objective = match v {
                ObjectiveArg::Full => Objective::FULL,
                ObjectiveArg::Mlm => Objective::MLM_ONLY,
                ObjectiveArg::Contrastive => Objective::CONTRASTIVE_ONLY,
            };
        }
        if self.symmetric {
            c.symmetric_cmcr = true;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out pairs evaluated at each eval point.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Existing vocabulary file; built from the corpus (and dev) otherwise.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, value_enum, default_value = "desk")]
    pub model: ModelPreset,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Negatives file from `mine-negatives`.
    #[arg(long)]
    pub hard_negatives: Option<PathBuf>,
    /// Mine this many negatives per query with the input checkpoint first.
    #[arg(long)]
    pub mine: Option<usize>,
    /// Cap on negatives used per query.
    #[arg(long)]
    pub negatives_per_query: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneQaArgs {
    /// Starting checkpoint; a fresh desk-size encoder over the QA vocabulary
    /// when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    /// Required unless `--bm25`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    pub k: Vec<usize>,
    /// Score with BM25 instead of the encoder.
    #[arg(long)]
    pub bm25: bool,
    /// Metrics JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Ranking JSONL; defaults to the metrics path with `.run.jsonl`.
    #[arg(long)]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalQaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Config file; its `model` section overrides the tiny preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Check at most this many coordinates per tensor instead of all.
    #[arg(long)]
    pub strided: Option<usize>,
    /// Optional JSON report (with a manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TauSweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,1")]
    pub taus: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    /// Config file with `model`, `pretrain`, and `finetune` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One JSON row per temperature.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command, writing
/// human-readable progress to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::Usage(e.to_string()))?;
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    execute(cli, argv, out)
}

struct Ctx<'a> {
    command: &'static str,
    argv: Vec<String>,
    seed: Option<u64>,
    started: Instant,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn say(&mut self, line: &str) {
        let _ = writeln!(self.out, "{line}");
    }

    fn manifest(
        &self,
        config: serde_json::Value,
        seed: u64,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            args: self.argv.clone(),
            config,
            seed,
            inputs: RunManifest::hash_inputs(inputs.iter().copied())?,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        m.write(outputs[0])?;
        Ok(())
    }
}

pub fn execute(cli: Cli, argv: Vec<String>, out: &mut dyn Write) -> Result<()> {
    let command = match &cli.command {
        Command::GenSynthetic(_) => "gen-synthetic",
        Command::GenQa(_) => "gen-qa",
        Command::Validate(_) => "validate",
        Command::Split(_) => "split",
        Command::Pretrain(_) => "pretrain",
        Command::FinetuneRetrieval(_) => "finetune-retrieval",
        Command::FinetuneQa(_) => "finetune-qa",
        Command::EvalRetrieval(_) => "eval-retrieval",
        Command::MineNegatives(_) => "mine-negatives",
        Command::EvalQa(_) => "eval-qa",
        Command::Gradcheck(_) => "gradcheck",
        Command::TauSweep(_) => "tau-sweep",
    };
    let mut ctx = Ctx {
        command,
        argv,
        seed: cli.seed,
        started: Instant::now(),
        out,
    };
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(&mut ctx, &a, false),
        Command::GenQa(a) => gen_synthetic(&mut ctx, &a, true),
        Command::Validate(a) => validate(&mut ctx, &a),
        Command::Split(a) => split(&mut ctx, &a),
        Command::Pretrain(a) => cmd_pretrain(&mut ctx, &a),
        Command::FinetuneRetrieval(a) => cmd_finetune_retrieval(&mut ctx, &a),
        Command::FinetuneQa(a) => cmd_finetune_qa(&mut ctx, &a),
        Command::EvalRetrieval(a) => eval_retrieval(&mut ctx, &a),
        Command::MineNegatives(a) => mine(&mut ctx, &a),
        Command::EvalQa(a) => eval_qa(&mut ctx, &a),
        Command::Gradcheck(a) => gradcheck(&mut ctx, &a),
        Command::TauSweep(a) => tau_sweep(&mut ctx, &a),
    }
}

fn gen_synthetic(ctx: &mut Ctx, a: &GenArgs, qa: bool) -> Result<()> {
    let cfg = SyntheticConfig {
        n_pairs: a.pairs,
        n_entities: a.entities,
        n_attributes: a.attributes,
        max_rows: a.max_rows,
        seed: ctx.seed.unwrap_or(0),
    };
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    if qa {
        write_qa(&a.out, &generate_qa(&cfg)?)?;
    } else {
        write_corpus(&a.out, &generate_synthetic(&cfg)?)?;
    }
    ctx.say(&format!("wrote {} examples to {}", cfg.n_pairs, a.out.display()));
    ctx.manifest(serde_json::to_value(cfg).unwrap(), cfg.seed, &[], &[&a.out])
}

fn validate(ctx: &mut Ctx, a: &ValidateArgs) -> Result<()> {
    let n = if a.qa {
        read_qa(&a.corpus)?.len()
    } else {
        read_corpus(&a.corpus)?.len()
    };
    ctx.say(&format!("ok {n}"));
    Ok(())
}

fn split(ctx: &mut Ctx, a: &SplitArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let seed = ctx.seed.unwrap_or(0);
    let (train, dev) = split_corpus(&corpus, a.dev_fraction, seed)?;
    write_corpus(&a.train_out, &train)?;
    write_corpus(&a.dev_out, &dev)?;
    ctx.say(&format!("train {} dev {}", train.len(), dev.len()));
    ctx.manifest(
        json!({ "dev_fraction": a.dev_fraction }),
        seed,
        &[&a.corpus],
        &[&a.train_out, &a.dev_out],
    )
}

fn log_path(log: &Option<PathBuf>, out: &Path) -> PathBuf {
    log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

fn corpus_union(a: &Corpus, b: Option<&Corpus>) -> Result<Corpus> {
    let mut pairs = a.pairs().to_vec();
    if let Some(b) = b {
        pairs.extend_from_slice(b.pairs());
    }
    Ok(Corpus::new(pairs)?)
}

fn cmd_pretrain(ctx: &mut Ctx, a: &PretrainArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let corpus = read_corpus(&a.corpus)?;
    let dev = a.dev.as_deref().map(read_corpus).transpose()?;
    let vocab = match &a.vocab {
        Some(p) => read_vocab(p)?,
        None => build_vocab(&corpus_union(&corpus, dev.as_ref())?, a.min_freq),
    };
    let preset = match a.model {
        ModelPreset::Tiny => ModelConfig::tiny(vocab.len()),
        ModelPreset::Desk => ModelConfig::desk(vocab.len()),
    };
    let mut model = file.section("model", preset)?;
    model.vocab_size = vocab.len();
    let train_cfg = a.train.apply(file.section("train", TrainConfig::pretrain())?, ctx.seed);
    if let Some(s) = ctx.seed {
        model.seed = s;
    }
    let mut enc = Encoder::init(model.clone())?;
    let log = log_path(&a.log, &a.out);
    let mut obs = JsonlObserver::create(&log, &a.out, &vocab, train_cfg.similarity)?;
    let dev_pairs: &[TableTextPair] = dev.as_ref().map(|d| d.pairs()).unwrap_or(&[]);
    let tl = pretrain(&mut enc, &vocab, corpus.pairs(), dev_pairs, &train_cfg, &mut obs)?;
    let ckpt = Checkpoint {
        encoder: enc,
        vocab: vocab.clone(),
        similarity: train_cfg.similarity,
        qa_head: None,
    };
    checkpoint::save(&a.out, &ckpt)?;
    if let Some(last) = tl.steps.last() {
        ctx.say(&format!("pretrained {} steps, final L {:.6}", tl.steps.len(), last.loss));
    }
    let mut vocab_out = a.out.as_os_str().to_owned();
    vocab_out.push(".vocab");
    let vocab_out = PathBuf::from(vocab_out);
    write_vocab(&vocab_out, &vocab)?;
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    inputs.extend(a.dev.as_deref());
    inputs.extend(a.config.as_deref());
    inputs.extend(a.vocab.as_deref());
    ctx.manifest(
        json!({ "model": model, "train": train_cfg, "min_freq": a.min_freq }),
        train_cfg.seed,
        &inputs,
        &[&a.out, &log, &vocab_out],
    )
}

fn cmd_finetune_retrieval(ctx: &mut Ctx, a: &FinetuneArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let ckpt = checkpoint::load(&a.ckpt, None)?;
    let pairs = read_corpus(&a.pairs)?;
    let dev = a.dev.as_deref().map(read_corpus).transpose()?;
    let mut cfg = a.train.apply(file.section("train", TrainConfig::finetune())?, ctx.seed);
    if let Some(n) = a.negatives_per_query {
        cfg.hard_negatives_per_query = n;
    }
    if a.hard_negatives.is_some() && a.mine.is_some() {
        return Err(Error::Usage("--hard-negatives and --mine are exclusive".into()));
    }
    let negatives = match (&a.hard_negatives, a.mine) {
        (Some(p), _) => Some(read_negatives(p)?),
        (None, Some(n)) => {
            let m = mine_hard_negatives(&ckpt.encoder, &ckpt.vocab, pairs.pairs(), n, cfg.similarity)?;
            Some(m.negatives)
        }
        (None, None) => None,
    };
    let mut enc = ckpt.encoder;
    let log = log_path(&a.log, &a.out);
    let mut obs = JsonlObserver::create(&log, &a.out, &ckpt.vocab, cfg.similarity)?;
    let dev_pairs: &[TableTextPair] = dev.as_ref().map(|d| d.pairs()).unwrap_or(&[]);
    let tl = finetune_retrieval(&mut enc, &ckpt.vocab, pairs.pairs(), dev_pairs, &cfg, negatives.as_ref(), &mut obs)?;
    let out = Checkpoint {
        encoder: enc,
        vocab: ckpt.vocab,
        similarity: cfg.similarity,
        qa_head: None,
    };
    checkpoint::save(&a.out, &out)?;
    if let Some(last) = tl.steps.last() {
        ctx.say(&format!("fine-tuned {} steps, final L {:.6}", tl.steps.len(), last.loss));
    }
    let mut inputs: Vec<&Path> = vec![&a.ckpt, &a.pairs];
    inputs.extend(a.dev.as_deref());
    inputs.extend(a.config.as_deref());
    inputs.extend(a.hard_negatives.as_deref());
    ctx.manifest(
        json!({ "train": cfg, "mine": a.mine }),
        cfg.seed,
        &inputs,
        &[&a.out, &log],
    )
}

fn qa_vocab(examples: &[utp_core::qa::QaExample]) -> Result<Vocab> {
    let corpus = Corpus::new(examples.iter().map(|e| e.pair.clone()).collect())?;
    Ok(build_vocab(&corpus, 1))
}

fn cmd_finetune_qa(ctx: &mut Ctx, a: &FinetuneQaArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let examples = read_qa(&a.qa)?;
    let mut cfg = file.section("qa", QaTrainConfig::default())?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let (mut enc, vocab, similarity, head) = match &a.ckpt {
        Some(p) => {
            let c = checkpoint::load(p, None)?;
            (c.encoder, c.vocab, c.similarity, c.qa_head)
        }
        None => {
            let vocab = qa_vocab(&examples)?;
            let mut model = file.section("model", ModelConfig::desk(vocab.len()))?;
            model.vocab_size = vocab.len();
            model.seed = cfg.seed;
            (Encoder::init(model)?, vocab, Similarity::Dot, None)
        }
    };
    let mut head = head.unwrap_or_else(|| CellSelectionHead::init(enc.config().d_model, cfg.seed));
    let losses = finetune_qa(&mut enc, &mut head, &vocab, &examples, &cfg)?;
    let accuracy = evaluate_qa(&enc, &head, &vocab, &examples)?;
    let model = enc.config().clone();
    let ckpt = Checkpoint {
        encoder: enc,
        vocab,
        similarity,
        qa_head: Some(head),
    };
    checkpoint::save(&a.out, &ckpt)?;
    let log = log_path(&a.log, &a.out);
    write_text(&log, &logs::qa_losses_to_string(&losses))?;
    ctx.say(&format!("trained {} steps, training denotation accuracy {accuracy:.4}", losses.len()));
    let mut inputs: Vec<&Path> = vec![&a.qa];
    inputs.extend(a.ckpt.as_deref());
    inputs.extend(a.config.as_deref());
    ctx.manifest(json!({ "qa": cfg, "model": model }), cfg.seed, &inputs, &[&a.out, &log])
}

fn eval_retrieval(ctx: &mut Ctx, a: &EvalRetrievalArgs) -> Result<()> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Error::Usage("--k needs positive cutoffs".into()));
    }
    let pairs = read_corpus(&a.pairs)?;
    let depth = a.k.iter().copied().max().unwrap();
    let run = if a.bm25 {
        bm25_run(pairs.pairs(), depth)?
    } else {
        let path = a.ckpt.as_deref().ok_or_else(|| Error::Usage("--ckpt is required without --bm25".into()))?;
        let c = checkpoint::load(path, None)?;
        dense_run(&c.encoder, &c.vocab, pairs.pairs(), c.similarity, depth)?
    };
    let metrics = recall_at_k(&run, &pair_gold(pairs.pairs()), &a.k)?;
    let run_path = a.run.clone().unwrap_or_else(|| a.out.with_extension("run.jsonl"));
    write_text(&a.out, &logs::pretty(&logs::recall_json(&metrics)))?;
    write_text(&run_path, &logs::run_to_string(&run))?;
    let shown: Vec<String> = metrics.recall.iter().map(|(k, r)| format!("R@{k} {r:.4}")).collect();
    ctx.say(&shown.join("  "));
    let mut inputs: Vec<&Path> = vec![&a.pairs];
    if !a.bm25 {
        inputs.extend(a.ckpt.as_deref());
    }
    ctx.manifest(
        json!({ "k": a.k, "scorer": if a.bm25 { "bm25" } else { "dense" } }),
        ctx.seed.unwrap_or(0),
        &inputs,
        &[&a.out, &run_path],
    )
}

fn mine(ctx: &mut Ctx, a: &MineArgs) -> Result<()> {
    let c = checkpoint::load(&a.ckpt, None)?;
    let pairs = read_corpus(&a.pairs)?;
    let m = mine_hard_negatives(&c.encoder, &c.vocab, pairs.pairs(), a.n, c.similarity)?;
    write_text(&a.out, &negatives_to_string(&m))?;
    ctx.say(&format!("{} queries, {} short of {}", m.negatives.len(), m.short.len(), a.n));
    ctx.manifest(json!({ "n": a.n }), ctx.seed.unwrap_or(0), &[&a.ckpt, &a.pairs], &[&a.out])
}

fn eval_qa(ctx: &mut Ctx, a: &EvalQaArgs) -> Result<()> {
    let c = checkpoint::load(&a.ckpt, None)?;
    let head = c
        .qa_head
        .ok_or_else(|| Error::Usage(format!("{} has no QA head", a.ckpt.display())))?;
    let examples = read_qa(&a.qa)?;
    let acc = evaluate_qa(&c.encoder, &head, &c.vocab, &examples)?;
    let metrics = json!({ "denotation_accuracy": acc, "n_examples": examples.len() });
    write_text(&a.out, &logs::pretty(&metrics))?;
    ctx.say(&format!("denotation accuracy {acc:.4} over {}", examples.len()));
    ctx.manifest(json!({}), ctx.seed.unwrap_or(0), &[&a.ckpt, &a.qa], &[&a.out])
}

fn gradcheck(ctx: &mut Ctx, a: &GradcheckArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let model = file.section("model", ModelConfig::tiny(0))?;
    let seed = ctx.seed.unwrap_or(0);
    let coverage = a.strided.map_or(Coverage::All, Coverage::Strided);
    let r = loss_gradcheck(&model, seed, a.h, GRADCHECK_TOL, coverage)?;
    let verdict = if r.passed { "PASS" } else { "FAIL" };
    ctx.say(&format!(
        "max relative error {:.3e} over {} coordinates: {verdict}",
        r.max_rel_error, r.checked
    ));
    if let Some(out) = &a.out {
        let report = json!({
            "max_rel_error": r.max_rel_error,
            "max_abs_error": r.max_abs_error,
            "checked": r.checked,
            "tolerance": GRADCHECK_TOL,
            "passed": r.passed,
        });
        write_text(out, &logs::pretty(&report))?;
        let mut inputs: Vec<&Path> = Vec::new();
        inputs.extend(a.config.as_deref());
        ctx.manifest(json!({ "model": model, "h": a.h }), seed, &inputs, &[out])?;
    }
    if r.passed {
        Ok(())
    } else {
        Err(Error::GradcheckFailed(r.max_rel_error))
    }
}

fn tau_sweep(ctx: &mut Ctx, a: &TauSweepArgs) -> Result<()> {
    if a.taus.is_empty() {
        return Err(Error::Usage("--taus is empty".into()));
    }
    let file = ConfigFile::load(a.config.as_deref())?;
    let corpus = read_corpus(&a.corpus)?;
    let seed = ctx.seed.unwrap_or(0);
    let vocab = build_vocab(&corpus, 1);
    let (train, dev) = split_corpus(&corpus, a.dev_fraction, seed)?;
    let base = RetrievalRecipe::desk();
    let mut recipe = RetrievalRecipe {
        dev_fraction: Some(a.dev_fraction),
        model: file.section("model", base.model.clone())?,
        pretrain: Some(file.section("pretrain", base.pretrain.unwrap())?),
        finetune: file.section("finetune", base.finetune)?,
        ..base
    }
    .with_seed(seed);
    recipe.model.vocab_size = vocab.len();
    let rows = tau_sweep_on(&recipe, &vocab, train.pairs(), dev.pairs(), &a.taus)?;
    let mut body = String::new();
    for &(tau, r1) in &rows {
        let row = json!({ "tau": tau, "seed": seed, "R@1": r1 });
        body.push_str(&row.to_string());
        body.push('\n');
        ctx.say(&format!("tau {tau}  dev R@1 {r1:.4}"));
    }
    write_text(&a.out, &body)?;
    let seeds: Vec<_> = a.taus.iter().map(|&t| json!({ "tau": t, "seed": seed })).collect();
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    inputs.extend(a.config.as_deref());
    ctx.manifest(
        json!({ "recipe": recipe, "taus": a.taus, "per_tau_seeds": seeds }),
        seed,
        &inputs,
        &[&a.out],
    )
}

/// Dense R@K of a checkpoint on a pair file; shared with the tests.
pub fn checkpoint_recall(ckpt: &Checkpoint, pairs: &[TableTextPair]) -> Result<utp_core::retrieval::RecallMetrics> {
    let cfg = TrainConfig {
        similarity: ckpt.similarity,
        ..TrainConfig::finetune()
    };
    Ok(evaluate_pairs(&ckpt.encoder, &ckpt.vocab, pairs, &cfg)?)
}
