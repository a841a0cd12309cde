//! Tables, aligned table-text pairs, and corpus splitting.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A header row plus rectangular data rows of string cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        Table::new(raw.header, raw.rows)
    }
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if header.is_empty() {
            return Err(Error::EmptyHeader);
        }
        if let Some(c) = header.iter().position(|h| h.trim().is_empty()) {
            return Err(Error::EmptyHeaderCell(c));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != header.len() {
                return Err(Error::RaggedRow {
                    row: r + 1,
                    expected: header.len(),
                    got: row.len(),
                });
            }
        }
        Ok(Self { header, rows })
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.header.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Cell at 1-based data row `row` (0 is the header) and 0-based `col`.
    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        if row == 0 {
            self.header.get(col).map(String::as_str)
        } else {
            self.rows.get(row - 1)?.get(col).map(String::as_str)
        }
    }

    /// Header then data cells in row-major order, with (row, col) coordinates.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &str)> + '_ {
        core::iter::once(&self.header)
            .chain(self.rows.iter())
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, s)| (r, c, s.as_str())))
    }
}

/// One aligned `<table, text>` example. The pair id doubles as the table id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableTextPair {
    pub id: String,
    pub text: String,
    pub table: Table,
}

impl TableTextPair {
    pub fn new(id: impl Into<String>, text: impl Into<String>, table: Table) -> Result<Self> {
        let (id, text) = (id.into(), text.into());
        if text.trim().is_empty() {
            return Err(Error::EmptyText(id));
        }
        Ok(Self { id, text, table })
    }
}

/// Ordered pairs with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pairs: Vec<TableTextPair>,
}

impl Corpus {
    pub fn new(pairs: Vec<TableTextPair>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[TableTextPair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<TableTextPair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Number of dev pairs for a corpus of `n`: `floor(fraction * n + 0.5)`.
pub fn dev_size(n: usize, dev_fraction: f64) -> usize {
    libm::floor(dev_fraction * n as f64 + 0.5) as usize
}

fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Deterministic train/dev partition.
///
/// Membership depends only on the pair ids and `seed`: pairs are ranked by a
/// keyed hash of their id and the lowest-ranked ones go to dev. Each side keeps
/// the corpus order.
pub fn split_corpus(corpus: &Corpus, dev_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::InvalidConfig {
            name: "dev_fraction",
            reason: alloc::format!("{dev_fraction} is not in (0, 1)"),
        });
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::CorpusTooSmall(n));
    }
    let n_dev = dev_size(n, dev_fraction);
    let mut order: Vec<(usize, [u8; 32])> = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, split_key(seed, &p.id)))
        .collect();
    order.sort_by(|a, b| a.1.cmp(&b.1));
    let dev_idx: BTreeSet<usize> = order.iter().take(n_dev).map(|(i, _)| *i).collect();

    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (i, p) in corpus.pairs.iter().enumerate() {
        if dev_idx.contains(&i) {
            dev.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    Ok((Corpus { pairs: train }, Corpus { pairs: dev }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn corpus(n: usize) -> Corpus {
        let pairs = (0..n)
            .map(|i| {
                let t = Table::new(s(&["a"]), vec![s(&[&format!("{i}")])]).unwrap();
                TableTextPair::new(format!("p{i}"), "text", t).unwrap()
            })
            .collect();
        Corpus::new(pairs).unwrap()
    }

    #[test]
    fn table_validation() {
        assert_eq!(Table::new(vec![], vec![]), Err(Error::EmptyHeader));
        assert!(matches!(
            Table::new(s(&["a", "b"]), vec![s(&["1"])]),
            Err(Error::RaggedRow { row: 1, expected: 2, got: 1 })
        ));
        assert!(Table::new(s(&["a"]), vec![]).is_ok());
        assert_eq!(Table::new(s(&["a", " "]), vec![]), Err(Error::EmptyHeaderCell(1)));
    }

    #[test]
    fn cells_are_row_major_header_first() {
        let t = Table::new(s(&["a", "b"]), vec![s(&["1", "2"])]).unwrap();
        let cells: Vec<_> = t.cells().collect();
        assert_eq!(cells, vec![(0, 0, "a"), (0, 1, "b"), (1, 0, "1"), (1, 1, "2")]);
        assert_eq!(t.cell(1, 1), Some("2"));
        assert_eq!(t.cell(2, 0), None);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = Table::new(s(&["a"]), vec![]).unwrap();
        let p = TableTextPair::new("x", "t", t).unwrap();
        assert_eq!(
            Corpus::new(vec![p.clone(), p]),
            Err(Error::DuplicateId("x".into()))
        );
    }

    #[test]
    fn split_ten_gives_nine_and_one() {
        let (train, dev) = split_corpus(&corpus(10), 0.10, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (9, 1));
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let c = corpus(50);
        let a = split_corpus(&c, 0.1, 9).unwrap();
        let b = split_corpus(&c, 0.1, 9).unwrap();
        assert_eq!(a, b);

        let mut reversed = c.pairs().to_vec();
        reversed.reverse();
        let r = split_corpus(&Corpus::new(reversed).unwrap(), 0.1, 9).unwrap();
        let ids = |c: &Corpus| c.pairs().iter().map(|p| p.id.clone()).collect::<BTreeSet<_>>();
        assert_eq!(ids(&a.1), ids(&r.1));
    }

    #[test]
    fn split_seeds_differ() {
        let c = corpus(100);
        let (_, d1) = split_corpus(&c, 0.1, 1).unwrap();
        let (_, d2) = split_corpus(&c, 0.1, 2).unwrap();
        assert_eq!((d1.len(), d2.len()), (10, 10));
        assert_ne!(d1, d2);
    }

    #[test]
    fn split_errors() {
        assert_eq!(split_corpus(&corpus(1), 0.1, 0), Err(Error::CorpusTooSmall(1)));
        assert!(split_corpus(&corpus(5), 0.0, 0).is_err());
        assert!(split_corpus(&corpus(5), 1.0, 0).is_err());
    }

    #[test]
    fn dev_size_rounds_half_up() {
        assert_eq!(dev_size(10, 0.1), 1);
        assert_eq!(dev_size(15, 0.1), 2);
        assert_eq!(dev_size(14, 0.1), 1);
        assert_eq!(dev_size(64, 0.1), 6);
    }

    proptest::proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..80, seed in 0u64..1000, frac in 0.05f64..0.95) {
            let c = corpus(n);
            let (train, dev) = split_corpus(&c, frac, seed).unwrap();
            proptest::prop_assert_eq!(train.len() + dev.len(), n);
            proptest::prop_assert_eq!(dev.len(), dev_size(n, frac));
            let mut all: Vec<_> = train.pairs().iter().chain(dev.pairs()).map(|p| p.id.clone()).collect();
            all.sort();
            all.dedup();
            proptest::prop_assert_eq!(all.len(), n);
        }
    }
}
