//! Cell selection over joint inputs with exact-set denotation accuracy.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{serialize_pair, Bound, Encoder, Modality, SerializedInput, INIT_STD};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::{self, purpose};
use crate::table::TableTextPair;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenize::Vocab;

/// A cell is predicted when its probability exceeds this.
pub const SELECT_THRESHOLD: f64 = 0.5;

/// Question/table pair with its answer cells as 1-based (row, column).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub pair: TableTextPair,
    pub gold_cells: BTreeSet<(usize, usize)>,
}

impl QaExample {
    pub fn new(pair: TableTextPair, gold_cells: BTreeSet<(usize, usize)>) -> Result<Self> {
        let bad = |reason: String| Error::BadQaExample {
            id: pair.id.clone(),
            reason,
        };
        if gold_cells.is_empty() {
            return Err(bad("gold cell set is empty".into()));
        }
        let (rows, cols) = (pair.table.n_rows(), pair.table.n_cols());
        for &(r, c) in &gold_cells {
            if r == 0 || r > rows || c == 0 || c > cols {
                return Err(bad(alloc::format!(
                    "gold cell ({r}, {c}) is outside the {rows}x{cols} table"
                )));
            }
        }
        Ok(Self { pair, gold_cells })
    }
}

/// Per-token selection logit `h . w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSelectionHead {
    params: ParamStore,
}

impl CellSelectionHead {
    pub const WEIGHT: &'static str = "qa.weight";
    pub const BIAS: &'static str = "qa.bias";

    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, purpose::INIT, 1);
        let w: Vec<f64> = (0..d_model).map(|_| rng::truncated_normal(&mut r, INIT_STD)).collect();
        Self::new(Tensor::vector(w), 0.0)
    }

    pub fn new(weight: Tensor, bias: f64) -> Self {
        let mut params = ParamStore::new();
        params.push(Self::WEIGHT, weight, true);
        params.push(Self::BIAS, Tensor::vector(vec![bias]), false);
        Self { params }
    }

    pub fn from_params(d_model: usize, params: ParamStore) -> Result<Self> {
        let ok = params.len() == 2
            && params.params()[0].name == Self::WEIGHT
            && params.tensor(0).shape() == [d_model]
            && params.params()[1].name == Self::BIAS
            && params.tensor(1).shape() == [1];
        if !ok {
            return Err(Error::ParamLayout("qa head".into()));
        }
        Ok(Self::new(params.tensor(0).clone(), params.tensor(1).data()[0]))
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }
}

/// Joint serialization of an example, rejecting it if a gold cell was cut.
pub fn prepare_qa(ex: &QaExample, vocab: &Vocab, enc: &Encoder) -> Result<SerializedInput> {
    let x = serialize_pair(&ex.pair, Modality::Joint, vocab, enc.config())?;
    let kept: BTreeSet<(usize, usize)> = x.cells.iter().map(|c| (c.row, c.col)).collect();
    for &cell in &ex.gold_cells {
        if !kept.contains(&cell) {
            return Err(Error::BadQaExample {
                id: ex.pair.id.clone(),
                reason: alloc::format!("gold cell {cell:?} does not survive truncation"),
            });
        }
    }
    Ok(x)
}

/// Data cells present in `x`, in sequence order.
pub fn data_cells(x: &SerializedInput) -> Vec<(usize, usize)> {
    x.cells.iter().filter(|c| c.row >= 1).map(|c| (c.row, c.col)).collect()
}

/// Per-cell probabilities (sigmoid of the mean token logit) for the data cells
/// of `x`, in [`data_cells`] order.
pub fn qa_forward(
    enc: &Encoder,
    g: &mut Graph,
    bound: &Bound,
    head: &[Var],
    x: &SerializedInput,
    dropout: Option<&mut crate::rng::Rng>,
) -> Result<Var> {
    let h = enc.forward(g, bound, x, dropout)?;
    let d = enc.config().d_model;
    let w = g.reshape(head[0], &[d, 1])?;
    let logits = g.matmul(h, w)?;
    let logits = g.add_row(logits, head[1])?;
    let l = x.len();
    let spans: Vec<_> = x.cells.iter().filter(|c| c.row >= 1).collect();
    let mut avg = vec![0.0; spans.len() * l];
    for (i, c) in spans.iter().enumerate() {
        for p in c.start..c.start + c.len {
            avg[i * l + p] = 1.0 / c.len as f64;
        }
    }
    let avg = g.constant(Tensor::new(vec![spans.len(), l], avg)?);
    let cell = g.matmul(avg, logits)?;
    let cell = g.reshape(cell, &[spans.len()])?;
    Ok(g.sigmoid(cell))
}

/// Mean binary cross-entropy; `targets[i]` is 1 for gold cells.
pub fn qa_loss(g: &mut Graph, probs: Var, targets: &[f64]) -> Result<Var> {
    g.bce(probs, targets)
}

pub fn gold_targets(cells: &[(usize, usize)], gold: &BTreeSet<(usize, usize)>) -> Vec<f64> {
    cells
        .iter()
        .map(|c| if gold.contains(c) { 1.0 } else { 0.0 })
        .collect()
}

/// Cells whose probability is above [`SELECT_THRESHOLD`].
pub fn select_cells(cells: &[(usize, usize)], probs: &[f64]) -> BTreeSet<(usize, usize)> {
    cells
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > SELECT_THRESHOLD)
        .map(|(c, _)| *c)
        .collect()
}

/// Probabilities and the selected cell set for one example, eval mode.
pub fn predict(
    enc: &Encoder,
    head: &CellSelectionHead,
    vocab: &Vocab,
    ex: &QaExample,
) -> Result<(Vec<f64>, BTreeSet<(usize, usize)>)> {
    let x = prepare_qa(ex, vocab, enc)?;
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, false);
    let hv = head.bind(&mut g, false);
    let p = qa_forward(enc, &mut g, &bound, &hv, &x, None)?;
    let probs = g.value(p).data().to_vec();
    let sel = select_cells(&data_cells(&x), &probs);
    Ok((probs, sel))
}

/// Fraction of examples whose predicted set equals the gold set exactly.
pub fn denotation_accuracy(
    predictions: &[BTreeSet<(usize, usize)>],
    golds: &[BTreeSet<(usize, usize)>],
) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            what: "predictions and golds",
            left: predictions.len(),
            right: golds.len(),
        });
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

pub fn evaluate_qa(
    enc: &Encoder,
    head: &CellSelectionHead,
    vocab: &Vocab,
    examples: &[QaExample],
) -> Result<f64> {
    let mut preds = Vec::with_capacity(examples.len());
    for ex in examples {
        preds.push(predict(enc, head, vocab, ex)?.1);
    }
    let golds: Vec<_> = examples.iter().map(|e| e.gold_cells.clone()).collect();
    denotation_accuracy(&preds, &golds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for QaTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Trains encoder and head together on the mean per-example BCE. Batches
/// cycle through a seeded shuffle that is redrawn each pass. Returns the
/// per-step losses.
pub fn finetune_qa(
    enc: &mut Encoder,
    head: &mut CellSelectionHead,
    vocab: &Vocab,
    examples: &[QaExample],
    cfg: &QaTrainConfig,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig {
            name: "qa train config",
            reason: "batch size and learning rate must be positive".into(),
        });
    }
    let inputs: Vec<SerializedInput> = examples
        .iter()
        .map(|e| prepare_qa(e, vocab, enc))
        .collect::<Result<_>>()?;
    let opt_cfg = AdamWConfig::new(cfg.learning_rate, cfg.weight_decay);
    let (mut enc_opt, mut head_opt) = (AdamW::new(), AdamW::new());
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                let mut r = rng::stream(cfg.seed, purpose::SHUFFLE, pass);
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
                order.reverse();
                pass += 1;
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let mut g = Graph::new();
        let bound = enc.bind(&mut g, true);
        let hv = head.bind(&mut g, true);
        let mut dropout = rng::stream(cfg.seed, purpose::DROPOUT, step as u64);
        let mut total: Option<Var> = None;
        for &i in &batch {
            let x = &inputs[i];
            let p = qa_forward(enc, &mut g, &bound, &hv, x, Some(&mut dropout))?;
            let t = gold_targets(&data_cells(x), &examples[i].gold_cells);
            let l = qa_loss(&mut g, p, &t)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        g.backward(loss)?;
        let eg = enc.params().grads(&g, &bound.vars);
        let hg = head.params().grads(&g, &hv);
        enc_opt.step(enc.params_mut(), &eg, &opt_cfg)?;
        head_opt.step(head.params_mut(), &hg, &opt_cfg)?;
        losses.push(value);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::table::{Corpus, Table};
    use crate::tokenize::build_vocab;
    use alloc::string::ToString;

    fn fixture() -> (Encoder, Vocab, QaExample) {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let t = Table::new(s(&["name", "age"]), vec![s(&["bob", "41 years"])]).unwrap();
        let pair = TableTextPair::new("q", "how old is bob ?", t).unwrap();
        let corpus = Corpus::new(vec![pair.clone()]).unwrap();
        let vocab = build_vocab(&corpus, 1);
        let enc = Encoder::init(ModelConfig::tiny(vocab.len())).unwrap();
        let ex = QaExample::new(pair, BTreeSet::from([(1, 2)])).unwrap();
        (enc, vocab, ex)
    }

    fn probs(enc: &Encoder, head: &CellSelectionHead, vocab: &Vocab, ex: &QaExample) -> Vec<f64> {
        predict(enc, head, vocab, ex).unwrap().0
    }

    #[test]
    fn example_validation() {
        let (_, _, ex) = fixture();
        assert!(QaExample::new(ex.pair.clone(), BTreeSet::new()).is_err());
        assert!(QaExample::new(ex.pair.clone(), BTreeSet::from([(0, 1)])).is_err());
        assert!(QaExample::new(ex.pair.clone(), BTreeSet::from([(2, 1)])).is_err());
        assert!(QaExample::new(ex.pair.clone(), BTreeSet::from([(1, 3)])).is_err());
    }

    #[test]
    fn zero_head_gives_one_half() {
        let (enc, vocab, ex) = fixture();
        let head = CellSelectionHead::new(Tensor::zeros(&[enc.config().d_model]), 0.0);
        assert_eq!(probs(&enc, &head, &vocab, &ex), vec![0.5, 0.5]);
        let sat = CellSelectionHead::new(Tensor::zeros(&[enc.config().d_model]), 20.0);
        assert!(probs(&enc, &sat, &vocab, &ex).iter().all(|&p| p > 1.0 - 1e-8));
    }

    #[test]
    fn probability_is_sigmoid_of_mean_token_logit() {
        let (enc, vocab, ex) = fixture();
        let head = CellSelectionHead::init(enc.config().d_model, 5);
        let x = prepare_qa(&ex, &vocab, &enc).unwrap();
        let h = enc.encode(&x).unwrap();
        let w = head.params().tensor(0).data();
        let b = head.params().tensor(1).data()[0];
        let token = |p: usize| h.row(p).iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        let expect: Vec<f64> = x
            .cells
            .iter()
            .filter(|c| c.row >= 1)
            .map(|c| {
                let m = (c.start..c.start + c.len).map(token).sum::<f64>() / c.len as f64;
                1.0 / (1.0 + (-m).exp())
            })
            .collect();
        assert_eq!(expect.len(), 2);
        // "41 years" spans two tokens
        assert_eq!(x.cells.iter().find(|c| (c.row, c.col) == (1, 2)).unwrap().len, 2);
        let got = probs(&enc, &head, &vocab, &ex);
        for (a, e) in got.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let l = qa_loss(&mut g, p, &[1.0, 0.0, 0.0]).unwrap();
        assert!(g.value(l).item() < 1e-6);

        let p = g.constant(Tensor::vector(vec![0.5; 4]));
        let l = qa_loss(&mut g, p, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-15);

        let p = g.constant(Tensor::vector(vec![0.9, 0.2, 0.6]));
        let l = qa_loss(&mut g, p, &[1.0, 0.0, 0.0]).unwrap();
        let hand = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((g.value(l).item() - hand).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        let a = BTreeSet::from([(1, 1)]);
        let b = BTreeSet::from([(1, 1), (2, 1)]);
        assert_eq!(denotation_accuracy(&[a.clone(), b.clone()], &[a.clone(), b.clone()]), Ok(1.0));
        assert_eq!(denotation_accuracy(&[b.clone()], &[a.clone()]), Ok(0.0));
        assert!(denotation_accuracy(&[a.clone()], &[]).is_err());

        let golds: Vec<_> = (0..200).map(|_| a.clone()).collect();
        let preds: Vec<_> = (0..200).map(|i| if i < 169 { a.clone() } else { b.clone() }).collect();
        assert!((denotation_accuracy(&preds, &golds).unwrap() - 0.845).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_strict() {
        let cells = [(1, 1), (1, 2), (2, 1)];
        let sel = select_cells(&cells, &[0.5, 0.51, 0.2]);
        assert_eq!(sel, BTreeSet::from([(1, 2)]));
    }

    #[test]
    fn truncated_gold_rejected() {
        let (enc, vocab, ex) = fixture();
        let long = "word ".repeat(40);
        let pair = TableTextPair::new("long", long, ex.pair.table.clone()).unwrap();
        let ex = QaExample::new(pair, BTreeSet::from([(1, 2)])).unwrap();
        assert!(prepare_qa(&ex, &vocab, &enc).is_err());
    }
}
