//! Masked-token prediction over all three input forms and the cross-modal
//! contrastive term over their pooled representations.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{serialize_pair, Bound, Encoder, Modality, SerializedInput};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::table::TableTextPair;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenize::{Vocab, CLS, MASK, N_SPECIAL, SEP};

/// Percent of maskable tokens selected for prediction.
pub const MASK_PERCENT: usize = 15;
/// Shares of selected tokens replaced by `[MASK]` and by a random token;
/// the rest stay unchanged.
pub const MASK_TOKEN_SHARE: f64 = 0.8;
pub const RANDOM_TOKEN_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Replaced by `[MASK]`.
    Mask,
    /// Replaced by this random vocabulary id.
    Random(usize),
    /// Left as is but still predicted.
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedPosition {
    pub position: usize,
    pub original: usize,
    pub action: MaskAction,
}

/// Positions selected for masked-token prediction; all others are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskingPlan {
    pub entries: Vec<MaskedPosition>,
}

impl MaskingPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Copy of `x` with the plan's replacements applied.
    pub fn apply(&self, x: &SerializedInput) -> SerializedInput {
        let mut y = x.clone();
        for e in &self.entries {
            y.token_ids[e.position] = match e.action {
                MaskAction::Mask => MASK,
                MaskAction::Random(id) => id,
                MaskAction::Unchanged => e.original,
            };
        }
        y
    }
}

/// Real, non-framing positions.
pub fn maskable_positions(x: &SerializedInput) -> Vec<usize> {
    x.token_ids
        .iter()
        .zip(&x.attention_mask)
        .enumerate()
        .filter(|(_, (&t, &m))| m == 1 && t != CLS && t != SEP)
        .map(|(i, _)| i)
        .collect()
}

/// `round(0.15 * n)` with halves rounded up, at least 1 when `n >= 1`.
pub fn mask_count(maskable: usize) -> usize {
    if maskable == 0 {
        0
    } else {
        ((maskable * MASK_PERCENT + 50) / 100).max(1)
    }
}

/// Samples which positions to predict and how each is corrupted.
pub fn make_masking_plan(x: &SerializedInput, vocab_size: usize, rng: &mut Rng) -> MaskingPlan {
    let maskable = maskable_positions(x);
    let count = mask_count(maskable.len());
    if count == 0 {
        return MaskingPlan::default();
    }
    let mut picked: Vec<usize> = index::sample(rng, maskable.len(), count)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    picked.sort_unstable();
    let entries = picked
        .into_iter()
        .map(|position| {
            let u: f64 = rng.random();
            let action = if u < MASK_TOKEN_SHARE {
                MaskAction::Mask
            } else if u < MASK_TOKEN_SHARE + RANDOM_TOKEN_SHARE && vocab_size > N_SPECIAL {
                MaskAction::Random(rng.random_range(N_SPECIAL..vocab_size))
            } else if u < MASK_TOKEN_SHARE + RANDOM_TOKEN_SHARE {
                MaskAction::Mask
            } else {
                MaskAction::Unchanged
            };
            MaskedPosition {
                position,
                original: x.token_ids[position],
                action,
            }
        })
        .collect();
    MaskingPlan { entries }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Cross-entropy of the masked-token head at the plan's positions, computed
/// on the corrupted input. An empty plan contributes exactly 0.
pub fn mlm_loss(
    enc: &Encoder,
    g: &mut Graph,
    bound: &Bound,
    x: &SerializedInput,
    plan: &MaskingPlan,
    dropout: Option<&mut Rng>,
) -> Result<Var> {
    if plan.is_empty() {
        return Ok(zero(g));
    }
    let corrupted = plan.apply(x);
    let h = enc.forward(g, bound, &corrupted, dropout)?;
    let rows: Vec<usize> = plan.entries.iter().map(|e| e.position).collect();
    let targets: Vec<usize> = plan.entries.iter().map(|e| e.original).collect();
    let logits = enc.mlm_logits(g, bound, h, &rows)?;
    g.cross_entropy(logits, &targets, usize::MAX)
}

/// The three serialized forms of a pair, in [`Modality::ALL`] order.
pub fn serialize_all(
    pair: &TableTextPair,
    vocab: &Vocab,
    enc: &Encoder,
) -> Result<[SerializedInput; 3]> {
    let cfg = enc.config();
    Ok([
        serialize_pair(pair, Modality::Text, vocab, cfg)?,
        serialize_pair(pair, Modality::Table, vocab, cfg)?,
        serialize_pair(pair, Modality::Joint, vocab, cfg)?,
    ])
}

/// Sum of the masked-token losses of the three forms, each with its own plan
/// drawn from `rng` in text, table, joint order.
pub fn universal_mlm_loss(
    enc: &Encoder,
    g: &mut Graph,
    bound: &Bound,
    inputs: &[SerializedInput; 3],
    rng: &mut Rng,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for x in inputs {
        let plan = make_masking_plan(x, enc.config().vocab_size, rng);
        let l = mlm_loss(enc, g, bound, x, &plan, dropout.as_deref_mut())?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("three modalities"))
}

/// Mean of the rows of `h` whose mask is 1, as a length-d vector.
pub fn pool(g: &mut Graph, h: Var, attention_mask: &[u8]) -> Result<Var> {
    let real = attention_mask.iter().filter(|&&m| m == 1).count();
    if real == 0 {
        return Err(Error::EmptyPool);
    }
    let l = attention_mask.len();
    let w: Vec<f64> = attention_mask
        .iter()
        .map(|&m| if m == 1 { 1.0 / real as f64 } else { 0.0 })
        .collect();
    let w = g.constant(Tensor::new(vec![1, l], w)?);
    let r = g.matmul(w, h)?;
    let d = g.shape(r)[1];
    g.reshape(r, &[d])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

/// Which loss terms are active; the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub mlm: bool,
    /// The (table, text) contrastive term.
    pub table_text: bool,
    /// The (table, joint) contrastive term.
    pub table_joint: bool,
    /// The (joint, text) contrastive term.
    pub joint_text: bool,
}

impl Objective {
    pub const FULL: Objective = Objective {
        mlm: true,
        table_text: true,
        table_joint: true,
        joint_text: true,
    };
    pub const MLM_ONLY: Objective = Objective {
        mlm: true,
        table_text: false,
        table_joint: false,
        joint_text: false,
    };
    pub const CONTRASTIVE_ONLY: Objective = Objective {
        mlm: false,
        ..Objective::FULL
    };

    pub fn any_contrastive(&self) -> bool {
        self.table_text || self.table_joint || self.joint_text
    }
}

impl Default for Objective {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub similarity: Similarity,
    /// Average both directions of each contrastive term.
    pub symmetric: bool,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            similarity: Similarity::Dot,
            symmetric: false,
            objective: Objective::FULL,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig {
                name: "tau",
                reason: alloc::format!("{} is not a positive temperature", self.tau),
            });
        }
        Ok(())
    }
}

/// Extra per-anchor negatives appended to the contrastive denominator.
#[derive(Debug, Clone)]
pub struct AnchorNegatives<'a> {
    /// `N * per_anchor` rows; rows `i * per_anchor ..` belong to anchor `i`.
    pub reps: Var,
    pub per_anchor: usize,
    /// Same length as the rows of `reps`; false marks padding.
    pub valid: &'a [bool],
}

fn similarity_inputs(g: &mut Graph, x: Var, sim: Similarity) -> Result<Var> {
    match sim {
        Similarity::Dot => Ok(x),
        Similarity::Cosine => g.l2_normalize_rows(x),
    }
}

/// Mean over anchors of `-log softmax_j(sim(a_i, p_j) / tau)[i]`.
pub fn infonce(g: &mut Graph, anchor: Var, positive: Var, cfg: &LossConfig) -> Result<Var> {
    infonce_with_negatives(g, anchor, positive, None, cfg)
}

/// [`infonce`] whose row `i` denominator also covers anchor `i`'s own extra
/// negatives.
pub fn infonce_with_negatives(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    negatives: Option<AnchorNegatives<'_>>,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (sa, sp) = (g.shape(anchor).to_vec(), g.shape(positive).to_vec());
    if sa.len() != 2 || sa != sp {
        return Err(Error::Shape {
            op: "infonce",
            lhs: sa,
            rhs: sp,
        });
    }
    let n = sa[0];
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let a = similarity_inputs(g, anchor, cfg.similarity)?;
    let p = similarity_inputs(g, positive, cfg.similarity)?;
    let pt = g.transpose(p)?;
    let s = g.matmul(a, pt)?;
    let mut logits = g.scale(s, 1.0 / cfg.tau);
    if let Some(neg) = negatives.filter(|n| n.per_anchor > 0) {
        let k = neg.per_anchor;
        let rows = g.shape(neg.reps)[0];
        if rows != n * k || neg.valid.len() != rows {
            return Err(Error::LengthMismatch {
                what: "hard negatives",
                left: n * k,
                right: rows,
            });
        }
        let reps = similarity_inputs(g, neg.reps, cfg.similarity)?;
        let owner: Vec<usize> = (0..n).flat_map(|i| core::iter::repeat_n(i, k)).collect();
        let a_rep = g.gather_rows(a, &owner)?;
        let e = g.row_dot(a_rep, reps)?;
        let e = g.scale(e, 1.0 / cfg.tau);
        let pad: Vec<f64> = neg
            .valid
            .iter()
            .map(|&v| if v { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let pad = g.constant(Tensor::vector(pad));
        let e = g.add(e, pad)?;
        let e = g.reshape(e, &[n, k])?;
        logits = g.concat_cols(&[logits, e])?;
    }
    let targets: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &targets, usize::MAX)
}

/// Pooled representations of a batch, row `i` of each from pair `i`.
#[derive(Debug, Clone, Copy)]
pub struct BatchRepresentations {
    pub text: Var,
    pub table: Var,
    pub joint: Var,
}

fn directed(g: &mut Graph, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    if cfg.symmetric {
        let ab = infonce(g, a, b, cfg)?;
        let ba = infonce(g, b, a, cfg)?;
        let s = g.add(ab, ba)?;
        Ok(g.scale(s, 0.5))
    } else {
        infonce(g, a, b, cfg)
    }
}

/// Sum of the active contrastive terms (table, text), (table, joint),
/// (joint, text), anchor first.
pub fn cmcr_loss(g: &mut Graph, b: &BatchRepresentations, cfg: &LossConfig) -> Result<Var> {
    let obj = cfg.objective;
    let mut total = zero(g);
    for (on, anchor, positive) in [
        (obj.table_text, b.table, b.text),
        (obj.table_joint, b.table, b.joint),
        (obj.joint_text, b.joint, b.text),
    ] {
        if on {
            let t = directed(g, anchor, positive, cfg)?;
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}

/// Graph handles of the loss and its two components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub mlm: Var,
    pub cmcr: Var,
}

/// `L = L_cmcr + L_mlm` for one batch.
///
/// `L_mlm` is the batch mean of the per-pair universal masked-token loss;
/// `L_cmcr` uses pooled representations of the uncorrupted inputs.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    enc: &Encoder,
    g: &mut Graph,
    bound: &Bound,
    batch: &[TableTextPair],
    vocab: &Vocab,
    cfg: &LossConfig,
    masking: &mut Rng,
    mut dropout: Option<&mut Rng>,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let inputs: Vec<[SerializedInput; 3]> = batch
        .iter()
        .map(|p| serialize_all(p, vocab, enc))
        .collect::<Result<_>>()?;

    let mlm = if cfg.objective.mlm {
        let mut sum = zero(g);
        for x in &inputs {
            let l = universal_mlm_loss(enc, g, bound, x, masking, dropout.as_deref_mut())?;
            sum = g.add(sum, l)?;
        }
        g.scale(sum, 1.0 / batch.len() as f64)
    } else {
        zero(g)
    };

    let cmcr = if cfg.objective.any_contrastive() {
        let mut per_modality: [Vec<Var>; 3] = Default::default();
        for x in &inputs {
            for (m, xi) in x.iter().enumerate() {
                let h = enc.forward(g, bound, xi, dropout.as_deref_mut())?;
                let r = pool(g, h, &xi.attention_mask)?;
                let d = g.shape(r)[0];
                per_modality[m].push(g.reshape(r, &[1, d])?);
            }
        }
        let reps = BatchRepresentations {
            text: g.concat_rows(&per_modality[0])?,
            table: g.concat_rows(&per_modality[1])?,
            joint: g.concat_rows(&per_modality[2])?,
        };
        cmcr_loss(g, &reps, cfg)?
    } else {
        zero(g)
    };

    let total = g.add(cmcr, mlm)?;
    Ok(LossParts { total, mlm, cmcr })
}
