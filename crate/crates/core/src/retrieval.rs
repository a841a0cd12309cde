//! Exact dense table search, recall at K, hard-negative mining, and a BM25
//! lexical baseline.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoder::{serialize, Encoder, Modality};
use crate::error::{Error, Result};
use crate::objectives::Similarity;
use crate::table::{Table, TableTextPair};
use crate::tokenize::{tokenize, Vocab};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 10, 50];

fn l2_normalize(v: &mut [f64]) {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
    for x in v {
        *x /= n;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pooled text-only representation of a query.
pub fn embed_text(enc: &Encoder, vocab: &Vocab, text: &str) -> Result<Vec<f64>> {
    let ids = vocab.encode_text(text);
    let x = serialize(Some(&ids), None, Modality::Text, vocab, enc.config())?;
    enc.pooled(&x)
}

/// Pooled table-only representation.
pub fn embed_table(enc: &Encoder, vocab: &Vocab, table: &Table) -> Result<Vec<f64>> {
    let x = serialize(None, Some(table), Modality::Table, vocab, enc.config())?;
    enc.pooled(&x)
}

/// Table embeddings in input order, one row per unique id.
#[derive(Debug, Clone, PartialEq)]
pub struct TableIndex {
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    similarity: Similarity,
    model: String,
}

/// One entry of a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTable {
    pub table_id: String,
    pub score: f64,
}

/// Ranked tables for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query_id: String,
    pub ranking: Vec<ScoredTable>,
}

pub type RetrievalRun = Vec<QueryRanking>;

impl TableIndex {
    /// Embeds `tables` with the encoder in eval mode.
    pub fn build<'a, I>(enc: &Encoder, vocab: &Vocab, tables: I, similarity: Similarity) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a Table)>,
    {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for (id, table) in tables {
            if !seen.insert(id) {
                return Err(Error::DuplicateTable(id.into()));
            }
            let r = embed_table(enc, vocab, table).map_err(|e| Error::InTable {
                id: id.into(),
                source: Box::new(e),
            })?;
            ids.push(id.into());
            rows.push(r);
        }
        Self::from_embeddings(ids, rows, similarity, enc.fingerprint())
    }

    /// Index over precomputed embeddings. Rows are normalized for cosine.
    pub fn from_embeddings(
        ids: Vec<String>,
        mut rows: Vec<Vec<f64>>,
        similarity: Similarity,
        model: String,
    ) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::LengthMismatch {
                what: "index ids and rows",
                left: ids.len(),
                right: rows.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateTable(id.clone()));
            }
        }
        if similarity == Similarity::Cosine {
            for r in &mut rows {
                l2_normalize(r);
            }
        }
        Ok(Self {
            ids,
            rows,
            similarity,
            model,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    /// Fingerprint of the encoder that produced the rows.
    pub fn model(&self) -> &str {
        &self.model
    }

    /// Similarity of `query` to every row, in index order.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        let mut q = query.to_vec();
        if self.similarity == Similarity::Cosine {
            l2_normalize(&mut q);
        }
        self.rows.iter().map(|r| dot(&q, r)).collect()
    }

    /// Top `k` rows by similarity; equal scores rank the smaller id first.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::InvalidConfig {
                name: "k",
                reason: "must be at least 1".into(),
            });
        }
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| rank_order(scores[a], &self.ids[a], scores[b], &self.ids[b]));
        order.truncate(k);
        Ok(order.into_iter().map(|i| (i, scores[i])).collect())
    }

    pub fn ranking(&self, query_id: &str, query: &[f64], k: usize) -> Result<QueryRanking> {
        let hits = self.search(query, k)?;
        Ok(QueryRanking {
            query_id: query_id.into(),
            ranking: hits
                .into_iter()
                .map(|(i, score)| ScoredTable {
                    table_id: self.ids[i].clone(),
                    score,
                })
                .collect(),
        })
    }
}

/// Descending score, then ascending id.
pub fn rank_order(sa: f64, ida: &str, sb: f64, idb: &str) -> Ordering {
    sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| ida.cmp(idb))
}

/// Ranks every pair's table for every pair's text with the dense encoder.
pub fn dense_run(
    enc: &Encoder,
    vocab: &Vocab,
    pairs: &[TableTextPair],
    similarity: Similarity,
    k: usize,
) -> Result<RetrievalRun> {
    let index = TableIndex::build(
        enc,
        vocab,
        pairs.iter().map(|p| (p.id.as_str(), &p.table)),
        similarity,
    )?;
    pairs
        .iter()
        .map(|p| {
            let q = embed_text(enc, vocab, &p.text)?;
            index.ranking(&p.id, &q, k)
        })
        .collect()
}

/// Gold table of every pair's query is its own table.
pub fn pair_gold(pairs: &[TableTextPair]) -> BTreeMap<String, String> {
    pairs.iter().map(|p| (p.id.clone(), p.id.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallMetrics {
    /// `(K, R@K)` in the order requested.
    pub recall: Vec<(usize, f64)>,
    pub n_queries: usize,
}

impl RecallMetrics {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Fraction of queries whose gold table is within the top K, for each K.
pub fn recall_at_k(
    run: &[QueryRanking],
    gold: &BTreeMap<String, String>,
    ks: &[usize],
) -> Result<RecallMetrics> {
    let mut ranks = Vec::with_capacity(run.len());
    for q in run {
        let g = gold
            .get(&q.query_id)
            .ok_or_else(|| Error::MissingGold(q.query_id.clone()))?;
        ranks.push(q.ranking.iter().position(|t| &t.table_id == g));
    }
    let n = run.len();
    let recall = ks
        .iter()
        .map(|&k| {
            let hit = ranks.iter().filter(|r| matches!(r, Some(p) if *p < k)).count();
            let r = if n == 0 { 0.0 } else { hit as f64 / n as f64 };
            (k, r)
        })
        .collect();
    Ok(RecallMetrics {
        recall,
        n_queries: n,
    })
}

/// Per-query negatives, plus the queries that got fewer than requested.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinedNegatives {
    pub negatives: BTreeMap<String, Vec<String>>,
    pub short: Vec<String>,
}

/// For each pair's query, the `n` best-scoring tables other than its own.
pub fn mine_hard_negatives(
    enc: &Encoder,
    vocab: &Vocab,
    pairs: &[TableTextPair],
    n: usize,
    similarity: Similarity,
) -> Result<MinedNegatives> {
    if n == 0 {
        return Err(Error::InvalidConfig {
            name: "n",
            reason: "must be at least 1".into(),
        });
    }
    let run = dense_run(enc, vocab, pairs, similarity, pairs.len().max(1))?;
    let mut out = MinedNegatives::default();
    for q in run {
        let negs: Vec<String> = q
            .ranking
            .into_iter()
            .filter(|t| t.table_id != q.query_id)
            .take(n)
            .map(|t| t.table_id)
            .collect();
        if negs.len() < n {
            out.short.push(q.query_id.clone());
        }
        out.negatives.insert(q.query_id, negs);
    }
    Ok(out)
}

/// Table as a flat token bag: header then cells.
pub fn table_tokens(table: &Table) -> Vec<String> {
    table.cells().flat_map(|(_, _, c)| tokenize(c)).collect()
}

/// Document frequencies and length statistics of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Stats {
    pub n_docs: usize,
    pub avg_len: f64,
    pub doc_freq: BTreeMap<String, usize>,
}

impl Bm25Stats {
    pub fn new<D: AsRef<[String]>>(docs: &[D]) -> Self {
        let mut doc_freq = BTreeMap::new();
        let mut total = 0usize;
        for d in docs {
            let d = d.as_ref();
            total += d.len();
            let uniq: BTreeSet<&String> = d.iter().collect();
            for t in uniq {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Self {
            n_docs: docs.len(),
            avg_len,
            doc_freq,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let m = self.n_docs as f64;
        libm::log(1.0 + (m - df + 0.5) / (df + 0.5))
    }
}

/// Okapi BM25 of `doc` for `query`; each query token contributes once per
/// occurrence.
pub fn bm25_score(query: &[String], doc: &[String], stats: &Bm25Stats, k1: f64, b: f64) -> f64 {
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in doc {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    let avg = if stats.avg_len > 0.0 { stats.avg_len } else { 1.0 };
    let norm = k1 * (1.0 - b + b * doc.len() as f64 / avg);
    query
        .iter()
        .map(|q| match tf.get(q.as_str()) {
            Some(&f) => {
                let f = f as f64;
                stats.idf(q) * f * (k1 + 1.0) / (f + norm)
            }
            None => 0.0,
        })
        .sum()
}

/// Ranks every pair's table for every pair's text with BM25.
pub fn bm25_run(pairs: &[TableTextPair], k: usize) -> Result<RetrievalRun> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let docs: Vec<Vec<String>> = pairs.iter().map(|p| table_tokens(&p.table)).collect();
    let stats = Bm25Stats::new(&docs);
    let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    Ok(pairs
        .iter()
        .map(|p| {
            let q = tokenize(&p.text);
            let scores: Vec<f64> = docs
                .iter()
                .map(|d| bm25_score(&q, d, &stats, BM25_K1, BM25_B))
                .collect();
            let mut order: Vec<usize> = (0..docs.len()).collect();
            order.sort_by(|&a, &b| rank_order(scores[a], ids[a], scores[b], ids[b]));
            order.truncate(k);
            QueryRanking {
                query_id: p.id.clone(),
                ranking: order
                    .into_iter()
                    .map(|i| ScoredTable {
                        table_id: ids[i].into(),
                        score: scores[i],
                    })
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::rng::{self, purpose};
    use crate::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::tokenize::build_vocab;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    fn index(rows: Vec<Vec<f64>>) -> TableIndex {
        let ids = (0..rows.len()).map(|i| format!("t{i:04}")).collect();
        TableIndex::from_embeddings(ids, rows, Similarity::Dot, String::new()).unwrap()
    }

    /// Full scan: repeatedly take the best remaining row.
    fn brute_force(ix: &TableIndex, q: &[f64], k: usize) -> Vec<usize> {
        let mut left: Vec<usize> = (0..ix.len()).collect();
        let mut out = Vec::new();
        while out.len() < k && !left.is_empty() {
            let mut best = 0;
            for j in 1..left.len() {
                let (a, b) = (left[j], left[best]);
                let (sa, sb) = (dot(q, &ix.rows()[a]), dot(q, &ix.rows()[b]));
                if sa > sb || (sa == sb && ix.ids()[a] < ix.ids()[b]) {
                    best = j;
                }
            }
            out.push(left.remove(best));
        }
        out
    }

    #[test]
    fn bm25_three_document_fixture() {
        // "x" occurs twice in doc 0 only; all docs have length 4
        let docs = vec![toks("x x y z"), toks("y z w v"), toks("a b c d")];
        let stats = Bm25Stats::new(&docs);
        assert_eq!(stats.avg_len, 4.0);
        assert!((stats.idf("x") - libm::log(8.0 / 3.0)).abs() < 1e-12);
        let s = bm25_score(&toks("x"), &docs[0], &stats, BM25_K1, BM25_B);
        assert!((s - 1.34864).abs() < 1e-5);
        assert!((s - libm::log(8.0 / 3.0) * 4.4 / 3.2).abs() < 1e-12);
        assert_eq!(bm25_score(&toks("x"), &docs[1], &stats, BM25_K1, BM25_B), 0.0);
        assert_eq!(bm25_score(&[], &docs[0], &stats, BM25_K1, BM25_B), 0.0);
    }

    #[test]
    fn search_examples() {
        let ix = index(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5]]);
        let full = ix.search(&[1.0, 1.0], 10).unwrap();
        assert_eq!(full.len(), 3);
        assert_eq!(full[0].0, 1);

        let hit = ix.search(&[0.0, 2.0], 1).unwrap();
        assert_eq!(hit[0].0, 1);

        let ties = index(vec![vec![1.0], vec![1.0], vec![1.0]]);
        let r: Vec<usize> = ties.search(&[1.0], 3).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(r, vec![0, 1, 2]);

        let empty = index(vec![]);
        assert_eq!(empty.search(&[1.0], 1), Err(Error::EmptyIndex));
    }

    #[test]
    fn recall_examples() {
        let mk = |q: &str, ids: &[&str]| QueryRanking {
            query_id: q.into(),
            ranking: ids
                .iter()
                .map(|t| ScoredTable {
                    table_id: t.to_string(),
                    score: 0.0,
                })
                .collect(),
        };
        let gold: BTreeMap<String, String> =
            (0..100).map(|i| (format!("q{i}"), format!("g{i}"))).collect();
        let run: Vec<QueryRanking> = (0..100)
            .map(|i| {
                let g = format!("g{i}");
                let mut ids: Vec<String> = (0..20).map(|j| format!("n{j}")).collect();
                if i < 79 {
                    ids[i % 10] = g;
                } else {
                    ids[15] = g;
                }
                let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                mk(&format!("q{i}"), &refs)
            })
            .collect();
        let m = recall_at_k(&run, &gold, &[1, 10, 50]).unwrap();
        assert!((m.at(10).unwrap() - 0.79).abs() < 1e-12);
        assert_eq!(m.at(50), Some(1.0));
        assert_eq!(m.n_queries, 100);

        let perfect = vec![mk("q0", &["g0", "x"])];
        let m = recall_at_k(&perfect, &gold, &[1, 10]).unwrap();
        assert_eq!((m.at(1), m.at(10)), (Some(1.0), Some(1.0)));

        let stray = vec![mk("zz", &["g0"])];
        assert_eq!(recall_at_k(&stray, &gold, &[1]), Err(Error::MissingGold("zz".into())));
    }

    fn tiny_setup(n: usize) -> (Encoder, Vocab, Vec<TableTextPair>) {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_pairs: n,
            seed: 11,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let vocab = build_vocab(&corpus, 1);
        let enc = Encoder::init(ModelConfig::tiny(vocab.len())).unwrap();
        (enc, vocab, corpus.into_pairs())
    }

    #[test]
    fn index_rows_match_one_by_one() {
        let (enc, vocab, pairs) = tiny_setup(3);
        let tables = || pairs.iter().map(|p| (p.id.as_str(), &p.table));
        let a = TableIndex::build(&enc, &vocab, tables(), Similarity::Dot).unwrap();
        let b = TableIndex::build(&enc, &vocab, tables(), Similarity::Dot).unwrap();
        assert_eq!(a, b);
        for (row, p) in a.rows().iter().zip(&pairs) {
            assert_eq!(row, &embed_table(&enc, &vocab, &p.table).unwrap());
        }
        let one = TableIndex::build(&enc, &vocab, tables().take(1), Similarity::Dot).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.rows()[0].len(), enc.config().d_model);
    }

    #[test]
    fn index_build_names_failing_table() {
        let (enc, vocab, pairs) = tiny_setup(1);
        let wide = Table::new((0..20).map(|i| format!("c{i}")).collect(), vec![]).unwrap();
        let err = TableIndex::build(
            &enc,
            &vocab,
            [(pairs[0].id.as_str(), &pairs[0].table), ("wide", &wide)],
            Similarity::Dot,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InTable { ref id, .. } if id == "wide"));
    }

    #[test]
    fn mining_two_tables_gives_the_other() {
        let (enc, vocab, pairs) = tiny_setup(2);
        let mined = mine_hard_negatives(&enc, &vocab, &pairs, 1, Similarity::Dot).unwrap();
        assert_eq!(mined.negatives[&pairs[0].id], vec![pairs[1].id.clone()]);
        assert_eq!(mined.negatives[&pairs[1].id], vec![pairs[0].id.clone()]);
        assert!(mined.short.is_empty());
        let more = mine_hard_negatives(&enc, &vocab, &pairs, 3, Similarity::Dot).unwrap();
        assert_eq!(more.short.len(), 2);
    }

    #[test]
    fn bm25_beats_chance_on_synthetic() {
        let (_, _, pairs) = tiny_setup(64);
        let run = bm25_run(&pairs, 10).unwrap();
        let m = recall_at_k(&run, &pair_gold(&pairs), &[1]).unwrap();
        assert!(m.at(1).unwrap() > 1.0 / 64.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn search_equals_brute_force(seed in 0u64..100_000, m in 1usize..300, coarse: bool) {
            let mut r = rng::stream(seed, purpose::EVAL, 1);
            let d = r.random_range(1..8usize);
            // coarse values force ties
            let draw = |r: &mut crate::rng::Rng| -> f64 {
                if coarse { r.random_range(-2i32..=2) as f64 } else { r.random_range(-1.0..1.0) }
            };
            let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| draw(&mut r)).collect()).collect();
            let q: Vec<f64> = (0..d).map(|_| draw(&mut r)).collect();
            let ix = index(rows);
            let k = r.random_range(1..=m + 2);
            let got: Vec<usize> = ix.search(&q, k).unwrap().into_iter().map(|h| h.0).collect();
            prop_assert_eq!(got.clone(), brute_force(&ix, &q, k));
            let scores: Vec<f64> = ix.search(&q, k).unwrap().into_iter().map(|h| h.1).collect();
            prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn recall_is_monotone_and_order_free(seed in 0u64..100_000) {
            let mut r = rng::stream(seed, purpose::EVAL, 2);
            let nq = r.random_range(1..30usize);
            let nt = r.random_range(1..80usize);
            let mut gold = BTreeMap::new();
            let mut run: Vec<QueryRanking> = (0..nq).map(|i| {
                let ids: Vec<ScoredTable> = (0..nt).map(|j| ScoredTable {
                    table_id: format!("t{}", (j * 7 + i) % nt),
                    score: -(j as f64),
                }).collect();
                gold.insert(format!("q{i}"), format!("t{}", r.random_range(0..nt + 3)));
                QueryRanking { query_id: format!("q{i}"), ranking: ids }
            }).collect();
            let ks = [1, 2, 5, 10, 50, 100];
            let m = recall_at_k(&run, &gold, &ks).unwrap();
            prop_assert!(m.recall.windows(2).all(|w| w[0].1 <= w[1].1));
            run.reverse();
            prop_assert_eq!(recall_at_k(&run, &gold, &ks).unwrap(), m);
        }
    }
}
