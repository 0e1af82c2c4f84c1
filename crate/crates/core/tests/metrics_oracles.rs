mod common;

use common::*;
use ddatr::metrics::{ce_scores, column_counts, corpus_bleu, lcs_len, rouge_l, BinaryLabelMatrix};
use proptest::prelude::*;

fn matrix(m: &[Vec<bool>]) -> BinaryLabelMatrix {
    BinaryLabelMatrix::new(m.len(), m[0].len(), m.concat()).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn bool_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
    proptest::collection::vec(proptest::collection::vec(any::<bool>(), cols), rows)
}

proptest! {
    #[test]
    fn ce_matches_oracle((pred, gold) in (1usize..12, 1usize..6).prop_flat_map(|(r, c)| (bool_matrix(r, c), bool_matrix(r, c)))) {
        let o = oracle_ce(&pred, &gold);
        let counts = column_counts(&matrix(&pred), &matrix(&gold)).unwrap();
        let got: Vec<_> = counts.iter().map(|c| (c.tp, c.fp, c.fn_)).collect();
        prop_assert_eq!(got, o.counts);
        let s = ce_scores(&matrix(&pred), &matrix(&gold)).unwrap();
        prop_assert!(close(s.precision_macro, o.macro_prf.0) && close(s.recall_macro, o.macro_prf.1) && close(s.f1_macro, o.macro_prf.2));
        prop_assert!(close(s.precision_micro, o.micro_prf.0) && close(s.recall_micro, o.micro_prf.1) && close(s.f1_micro, o.micro_prf.2));
    }

    #[test]
    fn micro_counts_recombine_over_partitions((pred, gold) in bool_matrix(10, 4).prop_flat_map(|p| (Just(p), bool_matrix(10, 4))), cut in 1usize..10) {
        let whole = column_counts(&matrix(&pred), &matrix(&gold)).unwrap();
        let a = column_counts(&matrix(&pred[..cut]), &matrix(&gold[..cut])).unwrap();
        let b = column_counts(&matrix(&pred[cut..]), &matrix(&gold[cut..])).unwrap();
        let merged: Vec<_> = a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect();
        prop_assert_eq!(merged, whole);
    }

    #[test]
    fn bleu_matches_oracle(
        corpus in proptest::collection::vec(
            (proptest::collection::vec(0u8..4, 0..9), proptest::collection::vec(proptest::collection::vec(0u8..4, 1..9), 1..3)),
            1..4,
        ),
        n in 1usize..5,
    ) {
        let cands: Vec<Vec<u8>> = corpus.iter().map(|c| c.0.clone()).collect();
        let refs: Vec<Vec<Vec<u8>>> = corpus.iter().map(|c| c.1.clone()).collect();
        prop_assert!(close(corpus_bleu(&cands, &refs, n), oracle_bleu(&cands, &refs, n)));
    }

    #[test]
    fn rouge_matches_oracle(c in proptest::collection::vec(0u8..4, 1..10), r in proptest::collection::vec(0u8..4, 1..10)) {
        prop_assert_eq!(lcs_len(&c, &r), oracle_lcs(&c, &r));
        prop_assert!(close(rouge_l(&c, &r), oracle_rouge(&c, &r)));
    }

    #[test]
    fn rouge_and_bleu_bounded(c in proptest::collection::vec(0u8..5, 1..12), r in proptest::collection::vec(0u8..5, 1..12)) {
        let rl = rouge_l(&c, &r);
        let b = corpus_bleu(&[c.clone()], &[vec![r.clone()]], 2);
        prop_assert!((0.0..=1.0).contains(&rl));
        prop_assert!((0.0..=1.0).contains(&b));
    }
}

#[test]
fn identical_corpus_scores_one() {
    let c = vec![vec![1u8, 2, 3, 4, 5]];
    assert_eq!(corpus_bleu(&c, &[vec![c[0].clone()]], 4), 1.0);
    assert_eq!(rouge_l(&c[0], &c[0]), 1.0);
}
