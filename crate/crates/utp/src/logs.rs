//! Training logs, retrieval runs, and metrics files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use utp_core::objectives::Similarity;
use utp_core::retrieval::{RecallMetrics, RetrievalRun};
use utp_core::train::{Checkpoint, EvalRecord, StepRecord, TrainObserver};
use utp_core::{Encoder, Vocab};

use crate::checkpoint;
use crate::error::{Error, Result};

fn observer_err(e: impl std::fmt::Display) -> utp_core::Error {
    utp_core::Error::Observer(e.to_string())
}

/// Streams each step and eval as one JSON line, flushing as it goes, and
/// saves a checkpoint at every evaluation so an interrupted run leaves a
/// usable model behind.
pub struct JsonlObserver {
    out: BufWriter<File>,
    log_path: PathBuf,
    ckpt_path: PathBuf,
    vocab: Vocab,
    similarity: Similarity,
}

impl JsonlObserver {
    pub fn create(log_path: &Path, ckpt_path: &Path, vocab: &Vocab, similarity: Similarity) -> Result<Self> {
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(log_path).map_err(|e| Error::io(log_path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            log_path: log_path.to_path_buf(),
            ckpt_path: ckpt_path.to_path_buf(),
            vocab: vocab.clone(),
            similarity,
        })
    }

    fn line<T: Serialize>(&mut self, row: &T) -> utp_core::Result<()> {
        let s = serde_json::to_string(row).map_err(observer_err)?;
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| observer_err(Error::io(&self.log_path, e)))
    }
}

impl TrainObserver for JsonlObserver {
    fn on_step(&mut self, record: &StepRecord) -> utp_core::Result<()> {
        self.line(record)
    }

    fn on_eval(&mut self, record: &EvalRecord, encoder: &Encoder) -> utp_core::Result<()> {
        self.line(record)?;
        let ckpt = Checkpoint {
            encoder: encoder.clone(),
            vocab: self.vocab.clone(),
            similarity: self.similarity,
            qa_head: None,
        };
        checkpoint::save(&self.ckpt_path, &ckpt).map_err(observer_err)
    }
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    #[serde(rename = "L")]
    loss: f64,
}

/// QA fine-tuning log: `{"step", "L"}` per step, 1-based.
pub fn qa_losses_to_string(losses: &[f64]) -> String {
    let mut s = String::new();
    for (i, &loss) in losses.iter().enumerate() {
        s.push_str(&serde_json::to_string(&LossRow { step: i + 1, loss }).unwrap());
        s.push('\n');
    }
    s
}

/// One line per query: `{"query_id", "ranking": [{"table_id", "score"}]}`.
pub fn run_to_string(run: &RetrievalRun) -> String {
    let mut s = String::new();
    for q in run {
        s.push_str(&serde_json::to_string(q).expect("rankings serialize"));
        s.push('\n');
    }
    s
}

/// `{"R@1": .., "R@10": .., "R@50": ..}`, one key per cutoff.
pub fn recall_json(m: &RecallMetrics) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for &(k, r) in &m.recall {
        map.insert(format!("R@{k}"), r.into());
    }
    serde_json::Value::Object(map)
}

pub fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}
