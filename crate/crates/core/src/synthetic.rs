//! Seeded generator of small entity/attribute tables with aligned sentences
//! and cell-selection questions.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::QaExample;
use crate::rng::{self, purpose, Rng};
use crate::table::{Corpus, Table, TableTextPair};

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "be", "da", "fu", "go", "hi", "ju", "pe", "zo",
];

const ATTRIBUTES: [&str; 16] = [
    "population",
    "area",
    "elevation",
    "founded",
    "rainfall",
    "wins",
    "losses",
    "points",
    "height",
    "weight",
    "age",
    "rank",
    "score",
    "length",
    "depth",
    "capacity",
];

/// Name column header of every generated table.
pub const NAME_COLUMN: &str = "name";
/// Attributes per table are drawn from `1..=MAX_ATTRIBUTE_COLUMNS`.
pub const MAX_ATTRIBUTE_COLUMNS: usize = 3;
/// Cell values are integers in `1..VALUE_LIMIT`.
pub const VALUE_LIMIT: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub n_entities: usize,
    pub n_attributes: usize,
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            n_entities: 128,
            n_attributes: 8,
            max_rows: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_pairs", self.n_pairs),
            ("n_entities", self.n_entities),
            ("n_attributes", self.n_attributes),
            ("max_rows", self.max_rows),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    name,
                    reason: "must be positive".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Pseudo-word for entity `i`, unique per index.
pub fn entity_name(i: usize) -> String {
    let mut s = String::new();
    let mut k = i;
    for _ in 0..2 {
        s.push_str(SYLLABLES[k % SYLLABLES.len()]);
        k /= SYLLABLES.len();
    }
    while k > 0 {
        s.push_str(SYLLABLES[k % SYLLABLES.len()]);
        k /= SYLLABLES.len();
    }
    s
}

pub fn attribute_name(i: usize) -> String {
    match ATTRIBUTES.get(i) {
        Some(a) => a.to_string(),
        None => format!("feature{i}"),
    }
}

/// One generated table together with the cell its sentence talks about.
struct Draw {
    table: Table,
    entity: String,
    attribute: String,
    value: String,
    row: usize,
    col: usize,
}

fn draw_table(cfg: &SyntheticConfig, r: &mut Rng) -> Draw {
    let n_attr = r.random_range(1..=MAX_ATTRIBUTE_COLUMNS.min(cfg.n_attributes));
    let mut attrs: Vec<usize> = index::sample(r, cfg.n_attributes, n_attr).into_vec();
    attrs.sort_unstable();
    let n_rows = r.random_range(1..=cfg.max_rows.min(cfg.n_entities));
    let entities: Vec<usize> = index::sample(r, cfg.n_entities, n_rows).into_vec();

    let mut header = Vec::with_capacity(n_attr + 1);
    header.push(NAME_COLUMN.to_string());
    header.extend(attrs.iter().map(|&a| attribute_name(a)));
    let rows: Vec<Vec<String>> = entities
        .iter()
        .map(|&e| {
            let mut row = Vec::with_capacity(n_attr + 1);
            row.push(entity_name(e));
            for _ in 0..n_attr {
                row.push(format!("{}", r.random_range(1..VALUE_LIMIT)));
            }
            row
        })
        .collect();

    let row = r.random_range(1..=n_rows);
    let col = r.random_range(1..=n_attr);
    let entity = rows[row - 1][0].clone();
    let value = rows[row - 1][col].clone();
    let attribute = header[col].clone();
    Draw {
        table: Table::new(header, rows).expect("generated tables are rectangular"),
        entity,
        attribute,
        value,
        row,
        col,
    }
}

/// `n_pairs` tables, each with a sentence stating one of its cells.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let pairs = (0..cfg.n_pairs)
        .map(|i| {
            let mut r = rng::stream(cfg.seed, purpose::SYNTHETIC, i as u64);
            let d = draw_table(cfg, &mut r);
            let text = format!("the {} of {} is {} .", d.attribute, d.entity, d.value);
            TableTextPair::new(format!("syn-{i:05}"), text, d.table).expect("text is non-empty")
        })
        .collect();
    Corpus::new(pairs)
}

/// Questions naming an entity and attribute; the gold answer is that cell.
pub fn generate_qa(cfg: &SyntheticConfig) -> Result<Vec<QaExample>> {
    cfg.validate()?;
    (0..cfg.n_pairs)
        .map(|i| {
            let mut r = rng::stream(cfg.seed, purpose::QA, i as u64);
            let d = draw_table(cfg, &mut r);
            let question = format!("what is the {} of {} ?", d.attribute, d.entity);
            let pair = TableTextPair::new(format!("qa-{i:05}"), question, d.table)
                .expect("text is non-empty");
            let gold = BTreeSet::from([(d.row, d.col + 1)]);
            QaExample::new(pair, gold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::tokenize;

    #[test]
    fn entity_names_are_unique() {
        let names: BTreeSet<String> = (0..5000).map(entity_name).collect();
        assert_eq!(names.len(), 5000);
    }

    #[test]
    fn single_pair_text_overlaps_table() {
        let c = generate_synthetic(&SyntheticConfig {
            n_pairs: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(c.len(), 1);
        let p = &c.pairs()[0];
        let cells: BTreeSet<String> =
            p.table.cells().flat_map(|(_, _, s)| tokenize(s)).collect();
        assert!(tokenize(&p.text).iter().any(|t| cells.contains(t)));
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SyntheticConfig::default();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn sixty_four_pairs_are_well_formed() {
        let c = generate_synthetic(&SyntheticConfig::default()).unwrap();
        assert_eq!(c.len(), 64);
        let ids: BTreeSet<&str> = c.pairs().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids.len(), 64);
        for p in c.pairs() {
            let t = &p.table;
            assert!(t.rows().iter().all(|r| r.len() == t.n_cols()));
            assert!((2..=MAX_ATTRIBUTE_COLUMNS + 1).contains(&t.n_cols()));
            assert!((1..=4).contains(&t.n_rows()));
        }
    }

    #[test]
    fn qa_gold_is_the_named_cell() {
        let cfg = SyntheticConfig {
            n_pairs: 32,
            ..SyntheticConfig::default()
        };
        for ex in generate_qa(&cfg).unwrap() {
            let &(row, col) = ex.gold_cells.iter().next().unwrap();
            let q = tokenize(&ex.pair.text);
            let entity = ex.pair.table.cell(row, 0).unwrap();
            let attr = ex.pair.table.cell(0, col - 1).unwrap();
            assert!(q.iter().any(|t| t == entity));
            assert!(q.iter().any(|t| t == attr));
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let cfg = SyntheticConfig {
            n_pairs: 0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
