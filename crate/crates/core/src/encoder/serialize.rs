//! Flattening of text and tables into token + structural-channel sequences.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::table::{Table, TableTextPair};
use crate::tokenize::{Vocab, CLS, PAD, SEP};

/// The three input forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// `[CLS] text [SEP]`
    Text,
    /// `[CLS] table [SEP]`
    Table,
    /// `[CLS] text [SEP] table [SEP]`
    Joint,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Table, Modality::Joint];

    /// Value of the format channel.
    pub fn format_id(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Table => 1,
            Modality::Joint => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Table => "table",
            Modality::Joint => "joint",
        }
    }
}

/// Per-token structural annotations, each with its own embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Segment,
    Column,
    Row,
    Rank,
    InvRank,
    CellIndex,
    Format,
}

pub const N_CHANNELS: usize = 7;

impl Channel {
    pub const ALL: [Channel; N_CHANNELS] = [
        Channel::Segment,
        Channel::Column,
        Channel::Row,
        Channel::Rank,
        Channel::InvRank,
        Channel::CellIndex,
        Channel::Format,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Segment => "segment",
            Channel::Column => "column",
            Channel::Row => "row",
            Channel::Rank => "rank",
            Channel::InvRank => "inv_rank",
            Channel::CellIndex => "cell_index",
            Channel::Format => "format",
        }
    }
}

/// Location of one table cell inside a serialized sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpan {
    /// 0 for the header, 1-based for data rows.
    pub row: usize,
    /// 1-based column.
    pub col: usize,
    pub start: usize,
    pub len: usize,
}

/// One modality of one pair, packed to the model length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedInput {
    pub modality: Modality,
    pub token_ids: Vec<usize>,
    pub channels: [Vec<usize>; N_CHANNELS],
    /// 1 for real positions, 0 for padding; always a prefix of ones.
    pub attention_mask: Vec<u8>,
    /// Table cells that survived truncation, in sequence order.
    pub cells: Vec<CellSpan>,
}

impl SerializedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn channel(&self, c: Channel) -> &[usize] {
        &self.channels[c.index()]
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Dense ranks of the numeric cells of one column (data rows only).
///
/// Cells that parse as finite decimals get ranks `1..=k` over the `k` distinct
/// values, ascending; equal values share a rank. `inv_rank` counts from the
/// largest value. Non-numeric cells get 0 in both.
pub fn compute_ranks(table: &Table, column: usize) -> (Vec<usize>, Vec<usize>) {
    let values: Vec<Option<f64>> = table
        .rows()
        .iter()
        .map(|row| {
            row.get(column)
                .and_then(|c| c.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
        })
        .collect();
    let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = distinct.len();
    let mut ranks = vec![0; values.len()];
    let mut inv = vec![0; values.len()];
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            let pos = distinct.partition_point(|d| d < v);
            ranks[i] = pos + 1;
            inv[i] = k - pos;
        }
    }
    (ranks, inv)
}

struct Builder {
    modality: Modality,
    token_ids: Vec<usize>,
    channels: [Vec<usize>; N_CHANNELS],
    cells: Vec<CellSpan>,
}

impl Builder {
    fn new(modality: Modality) -> Self {
        Self {
            modality,
            token_ids: Vec::new(),
            channels: Default::default(),
            cells: Vec::new(),
        }
    }

    fn push(&mut self, id: usize, ch: [usize; N_CHANNELS]) {
        self.token_ids.push(id);
        for (dst, v) in self.channels.iter_mut().zip(ch) {
            dst.push(v);
        }
    }

    fn push_text(&mut self, id: usize) {
        let mut ch = [0; N_CHANNELS];
        ch[Channel::Format.index()] = self.modality.format_id();
        self.push(id, ch);
    }

    /// Appends whole cells, row-major and header first, while they fit in
    /// `budget` positions. Returns the number of positions used.
    fn push_table(
        &mut self,
        table: &Table,
        vocab: &Vocab,
        cfg: &ModelConfig,
        budget: usize,
    ) -> Result<usize> {
        let card = &cfg.cardinalities;
        if table.n_cols() >= card.column {
            return Err(Error::TooManyColumns {
                got: table.n_cols(),
                max: card.column - 1,
            });
        }
        let ranks: Vec<(Vec<usize>, Vec<usize>)> =
            (0..table.n_cols()).map(|c| compute_ranks(table, c)).collect();
        let mut used = 0;
        for (row, col, text) in table.cells() {
            if row >= card.row {
                break;
            }
            let ids = vocab.encode_text(text);
            if ids.is_empty() {
                continue;
            }
            if used + ids.len() > budget {
                break;
            }
            let (rank, inv) = if row == 0 {
                (0, 0)
            } else {
                (ranks[col].0[row - 1], ranks[col].1[row - 1])
            };
            self.cells.push(CellSpan {
                row,
                col: col + 1,
                start: self.token_ids.len(),
                len: ids.len(),
            });
            for (k, id) in ids.into_iter().enumerate() {
                let mut ch = [0; N_CHANNELS];
                ch[Channel::Segment.index()] = 1;
                ch[Channel::Column.index()] = col + 1;
                ch[Channel::Row.index()] = row;
                ch[Channel::Rank.index()] = rank.min(card.rank - 1);
                ch[Channel::InvRank.index()] = inv.min(card.inv_rank - 1);
                ch[Channel::CellIndex.index()] = (k + 1).min(card.cell_index - 1);
                ch[Channel::Format.index()] = self.modality.format_id();
                self.push(id, ch);
            }
            used += self.cells.last().map_or(0, |c| c.len);
        }
        Ok(used)
    }

    fn finish(mut self, max_len: usize) -> SerializedInput {
        let real = self.token_ids.len();
        debug_assert!(real <= max_len);
        while self.token_ids.len() < max_len {
            self.push_text(PAD);
        }
        let mut attention_mask = vec![0u8; max_len];
        attention_mask[..real].fill(1);
        SerializedInput {
            modality: self.modality,
            token_ids: self.token_ids,
            channels: self.channels,
            attention_mask,
            cells: self.cells,
        }
    }
}

/// Packs one modality into `cfg.max_len` positions.
///
/// Text is kept whole up to the space its template allows. Table cells are
/// kept whole: when the sequence is full, cells are dropped from the end of
/// the flattened table.
pub fn serialize(
    text: Option<&[usize]>,
    table: Option<&Table>,
    modality: Modality,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<SerializedInput> {
    let l = cfg.max_len;
    let need_text = || {
        text.ok_or(Error::MissingInput {
            modality: modality.name(),
            missing: "text",
        })
    };
    let need_table = || {
        table.ok_or(Error::MissingInput {
            modality: modality.name(),
            missing: "table",
        })
    };
    let mut b = Builder::new(modality);
    b.push_text(CLS);
    match modality {
        Modality::Text => {
            let text = need_text()?;
            for &id in text.iter().take(l - 2) {
                b.push_text(id);
            }
            b.push_text(SEP);
        }
        Modality::Table => {
            let table = need_table()?;
            if b.push_table(table, vocab, cfg, l - 2)? == 0 {
                return Err(Error::NoTableBudget {
                    text_len: 0,
                    max_len: l,
                });
            }
            b.push_text(SEP);
        }
        Modality::Joint => {
            let text = need_text()?;
            let table = need_table()?;
            let kept = text.len().min(l - 3);
            for &id in &text[..kept] {
                b.push_text(id);
            }
            b.push_text(SEP);
            if b.push_table(table, vocab, cfg, l - 3 - kept)? == 0 {
                return Err(Error::NoTableBudget {
                    text_len: text.len(),
                    max_len: l,
                });
            }
            b.push_text(SEP);
        }
    }
    Ok(b.finish(l))
}

/// Serializes a pair in one modality, tokenizing its text with `vocab`.
pub fn serialize_pair(
    pair: &TableTextPair,
    modality: Modality,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<SerializedInput> {
    let text = vocab.encode_text(&pair.text);
    serialize(Some(&text), Some(&pair.table), modality, vocab, cfg)
}

/// Untruncated length of the joint form: text + flattened table + 3.
pub fn joint_length(pair: &TableTextPair) -> usize {
    let text = crate::tokenize::tokenize(&pair.text).len();
    let table: usize = pair
        .table
        .cells()
        .map(|(_, _, c)| crate::tokenize::tokenize(c).len())
        .sum();
    text + table + 3
}
