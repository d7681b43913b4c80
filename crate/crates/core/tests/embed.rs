mod common;

use std::collections::HashSet;

use common::graph_from;
use metakgr::embed::{pretrain_on, tail_ranking_mrr, ConvShape, EmbedKind, EmbedModel, PretrainConfig};
use metakgr::kg::{EntityId, Graph, RelationId, Triple};
use metakgr::tensor::{finite_diff_check, ParamVars, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv() -> ConvShape {
    ConvShape { rows: 2, filters: 3, kernel: 2 }
}

fn models(seed: u64) -> Vec<EmbedModel> {
    vec![
        EmbedModel::random(EmbedKind::DistMult, 9, 4, 6, None, seed).unwrap(),
        EmbedModel::random(EmbedKind::ConvE, 9, 4, 6, Some(conv()), seed).unwrap(),
    ]
}

#[test]
fn distmult_is_symmetric_in_head_and_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..5 {
        let m = EmbedModel::random(EmbedKind::DistMult, 9, 4, 6, None, seed).unwrap();
        for _ in 0..20 {
            let (h, r, t) = (EntityId(rng.random_range(0..9)), RelationId(rng.random_range(0..4)), EntityId(rng.random_range(0..9)));
            assert!((m.raw_score(h, r, t).unwrap() - m.raw_score(t, r, h).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn all_tails_agree_with_pointwise_scores() {
    for m in models(3) {
        for h in 0..9 {
            for r in 0..4 {
                let all = m.score_all_tails(EntityId(h), RelationId(r)).unwrap();
                let mut best = 0;
                for t in 0..9u32 {
                    let s = m.score(EntityId(h), RelationId(r), EntityId(t)).unwrap();
                    assert!((all[t as usize] - s).abs() < 1e-9);
                    assert!(s > 0.0 && s < 1.0);
                    if s > all[best] {
                        best = t as usize;
                    }
                }
                let argmax = (0..9).fold(0, |b, i| if all[i] > all[b] { i } else { b });
                assert_eq!(argmax, best);
            }
        }
    }
}

#[test]
fn scorer_gradients_match_central_differences() {
    for seed in 0..3 {
        for m in models(seed) {
            let f = |tape: &mut Tape, vars: &ParamVars| {
                let raw = m.raw_pairs(tape, vars, &[0, 3, 8], &[1, 2, 3], &[4, 4, 0])?;
                let s = tape.sigmoid(raw);
                Ok(tape.sum(s))
            };
            let err = finite_diff_check(f, &m.params, 1e-6, Some(30), seed).unwrap();
            assert!(err < 1e-6, "{:?} seed {seed}: {err:e}", m.kind);
            let g = |tape: &mut Tape, vars: &ParamVars| {
                let raw = m.raw_all_tails(tape, vars, &[2, 5], &[0, 3])?;
                let s = tape.softmax(raw);
                let l = tape.log(s);
                let picked = tape.gather_cols(l, &[1])?;
                Ok(tape.sum(picked))
            };
            let err = finite_diff_check(g, &m.params, 1e-6, Some(30), seed).unwrap();
            assert!(err < 1e-6, "{:?} seed {seed}: {err:e}", m.kind);
        }
    }
}

fn chain() -> (Graph, Vec<Triple>) {
    let text: String = (0..7).map(|i| format!("e{i}\tnext\te{}\n", i + 1)).collect();
    let g = graph_from(&text, false);
    let triples = g.edges().collect();
    (g, triples)
}

fn chain_config(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        kind: EmbedKind::ConvE,
        dim: 8,
        conv: conv(),
        epochs,
        lr: 0.02,
        batch_size: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn chain_pretraining_ranks_true_tails_first() {
    let (g, triples) = chain();
    let out = pretrain_on(&g, &triples, &chain_config(200, 1)).unwrap();
    let mrr = tail_ranking_mrr(&out.model, &triples, &HashSet::new()).unwrap();
    assert!(mrr > 0.9, "{mrr}");
    let violations = out.epoch_losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations as f64 <= 0.05 * (out.epoch_losses.len() - 1) as f64, "{violations} rises");
}

#[test]
fn zero_epochs_is_near_random() {
    let (g, triples) = chain();
    let mut total = 0.0;
    for seed in 0..10 {
        let out = pretrain_on(&g, &triples, &chain_config(0, seed)).unwrap();
        assert!(out.epoch_losses.is_empty());
        total += tail_ranking_mrr(&out.model, &triples, &HashSet::new()).unwrap();
    }
    let mean = total / 10.0;
    let random = metakgr::eval::random_ranking_mrr(8);
    assert!((mean - random).abs() < 0.2, "{mean} vs {random}");
}

#[test]
fn pretraining_is_seeded() {
    let (g, triples) = chain();
    let a = pretrain_on(&g, &triples, &chain_config(5, 3)).unwrap();
    let b = pretrain_on(&g, &triples, &chain_config(5, 3)).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}
