use std::collections::BTreeSet;

use proptest::prelude::*;
use utp_core::encoder::serialize_pair;
use utp_core::objectives::{Objective, Similarity};
use utp_core::qa::{qa_forward, CellSelectionHead};
use utp_core::retrieval::{embed_text, mine_hard_negatives, TableIndex};
use utp_core::synthetic::{generate_synthetic, SyntheticConfig};
use utp_core::tokenize::{build_vocab, UNK, N_SPECIAL};
use utp_core::train::{pretrain, TrainConfig};
use utp_core::{Encoder, Graph, Modality, ModelConfig, Table, TableTextPair, Vocab};

fn corpus(n: usize, seed: u64) -> (Vec<TableTextPair>, Vocab) {
    let c = generate_synthetic(&SyntheticConfig {
        n_pairs: n,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let vocab = build_vocab(&c, 1);
    (c.into_pairs(), vocab)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_never_emits_reserved_ids(text in "\\PC{0,40}", seed in 0u64..50) {
        let (_, vocab) = corpus(8, seed);
        for id in vocab.encode_text(&text) {
            prop_assert!(id == UNK || id >= N_SPECIAL, "id {id}");
        }
    }

    #[test]
    fn synthetic_corpora_serialize_in_every_form(
        n in 1usize..24,
        entities in 1usize..40,
        attributes in 1usize..10,
        rows in 1usize..6,
        seed in 0u64..10_000,
    ) {
        let c = generate_synthetic(&SyntheticConfig {
            n_pairs: n,
            n_entities: entities,
            n_attributes: attributes,
            max_rows: rows,
            seed,
        }).unwrap();
        prop_assert_eq!(c.len(), n);
        let ids: BTreeSet<&str> = c.pairs().iter().map(|p| p.id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        let vocab = build_vocab(&c, 1);
        let cfg = ModelConfig::desk(vocab.len());
        for p in c.pairs() {
            prop_assert!(p.table.rows().iter().all(|r| r.len() == p.table.n_cols()));
            for m in [Modality::Text, Modality::Table, Modality::Joint] {
                prop_assert!(serialize_pair(p, m, &vocab, &cfg).is_ok());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mined_negatives_outscore_other_tables(seed in 0u64..1000, n in 1usize..4) {
        let (pairs, vocab) = corpus(10, seed);
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.seed = seed;
        let enc = Encoder::init(cfg).unwrap();
        let mined = mine_hard_negatives(&enc, &vocab, &pairs, n, Similarity::Dot).unwrap();
        let index = TableIndex::build(
            &enc,
            &vocab,
            pairs.iter().map(|p| (p.id.as_str(), &p.table)),
            Similarity::Dot,
        ).unwrap();
        let pos = |id: &str| index.ids().iter().position(|t| t == id).unwrap();
        for p in &pairs {
            let scores = index.scores(&embed_text(&enc, &vocab, &p.text).unwrap());
            let negs = &mined.negatives[&p.id];
            prop_assert_eq!(negs.len(), n);
            let floor = negs.iter().map(|t| scores[pos(t)]).fold(f64::INFINITY, f64::min);
            for (i, id) in index.ids().iter().enumerate() {
                if *id != p.id && !negs.contains(id) {
                    prop_assert!(floor >= scores[i]);
                }
            }
        }
    }
}

#[test]
fn contrastive_training_aligns_a_small_batch() {
    let (pairs, vocab) = corpus(4, 3);
    let mut enc = Encoder::init(ModelConfig::tiny(vocab.len())).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        epochs: 200,
        objective: Objective::CONTRASTIVE_ONLY,
        similarity: Similarity::Cosine,
        ..TrainConfig::pretrain()
    };
    let log = pretrain(&mut enc, &vocab, &pairs, &[], &cfg, &mut ()).unwrap();
    assert_eq!(log.steps.len(), 200);
    let first = log.steps[0].cmcr;
    let last = log.steps[199].cmcr;
    assert!(last < 0.5 * first, "cmcr {first} -> {last}");

    let index = TableIndex::build(
        &enc,
        &vocab,
        pairs.iter().map(|p| (p.id.as_str(), &p.table)),
        Similarity::Cosine,
    )
    .unwrap();
    for (i, p) in pairs.iter().enumerate() {
        let s = index.scores(&embed_text(&enc, &vocab, &p.text).unwrap());
        let best = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(best, i, "pair {} scores {s:?}", p.id);
    }
}

#[test]
fn cell_probabilities_depend_on_the_question() {
    let table = Table::new(
        vec!["name".into(), "height".into()],
        vec![vec!["ann".into(), "170".into()], vec!["bob".into(), "182".into()]],
    )
    .unwrap();
    let a = TableTextPair::new("a", "what is the height of ann ?", table.clone()).unwrap();
    let b = TableTextPair::new("b", "which name is listed first ?", table).unwrap();
    let corpus = utp_core::Corpus::new(vec![a.clone(), b.clone()]).unwrap();
    let vocab = build_vocab(&corpus, 1);
    let enc = Encoder::init(ModelConfig::tiny(vocab.len())).unwrap();
    let head = CellSelectionHead::init(enc.config().d_model, 1);

    let probs = |p: &TableTextPair| {
        let x = serialize_pair(p, Modality::Joint, &vocab, enc.config()).unwrap();
        let mut g = Graph::new();
        let bound = enc.bind(&mut g, false);
        let h = head.bind(&mut g, false);
        let v = qa_forward(&enc, &mut g, &bound, &h, &x, None).unwrap();
        g.value(v).data().to_vec()
    };
    let (pa, pb) = (probs(&a), probs(&b));
    assert_eq!(pa.len(), 4);
    let gap = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "{pa:?} vs {pb:?}");
}
