use attnparse::alignment::{merge_pieces, MergeOptions, WordAttention};
use attnparse::eval::{
    punct_positions, random_tree, strip_positions, strip_punct, unlabeled_f1, BracketOptions, PTB_PUNCT_TAGS,
};
use attnparse::parser::{chart_parse, greedy_parse, tree_score};
use attnparse::scoring::{ScoreMode, Scorer, SplitScorer};
use attnparse::synth::{gen_synthetic, SyntheticSpec};
use attnparse::tensor_io::Corpus;
use attnparse::trainer::{margin_loss, split_log_prob, tree_neg_log_likelihood};
use attnparse::tree::{parse_tree, ParseTree, Span};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn attention(n: usize, cells: &[f64]) -> WordAttention {
    let raw = Array2::from_shape_vec((n, n), cells[..n * n].to_vec()).unwrap();
    let sums = raw.sum_axis(Axis(1)).insert_axis(Axis(1));
    WordAttention::unchecked(&raw / &sums)
}

fn matrix() -> impl Strategy<Value = WordAttention> {
    (1usize..=9).prop_flat_map(|n| proptest::collection::vec(0.001f64..1.0, n * n).prop_map(move |c| attention(n, &c)))
}

fn mode() -> impl Strategy<Value = ScoreMode> {
    prop_oneof![Just(ScoreMode::OutsideAssociation), Just(ScoreMode::InsideOutside)]
}

fn tree_pair() -> impl Strategy<Value = (ParseTree, ParseTree)> {
    (2usize..=12, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random_tree(n, &mut rng), random_tree(n, &mut rng))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn chart_never_scores_below_greedy(a in matrix(), m in mode()) {
        let s = Scorer::new(&a, m);
        let chart = chart_parse(&s).unwrap();
        let greedy = greedy_parse(&s).unwrap();
        prop_assert!(chart.is_binary() && greedy.is_binary());
        prop_assert_eq!(chart.n_leaves(), a.n());
        prop_assert!(tree_score(&s, &chart) >= tree_score(&s, &greedy) - 1e-12);
    }

    #[test]
    fn outside_association_is_bounded(a in matrix()) {
        let s = Scorer::new(&a, ScoreMode::OutsideAssociation);
        for x in 0..a.n() {
            for y in x + 1..a.n() {
                for k in x + 1..=y {
                    let v = s.split(Span::new(x, y), k);
                    prop_assert!((-1.0 - 1e-12..=1e-12).contains(&v));
                }
            }
        }
    }

    #[test]
    fn scores_are_linear_in_attention(
        (a, b) in (2usize..=9).prop_flat_map(|n| (
            proptest::collection::vec(0.001f64..1.0, n * n).prop_map(move |c| attention(n, &c)),
            proptest::collection::vec(0.001f64..1.0, n * n).prop_map(move |c| attention(n, &c)),
        )),
        w in 0.0f64..1.0,
        m in mode(),
    ) {
        let mix = WordAttention::unchecked(a.matrix() * w + b.matrix() * (1.0 - w));
        let (sa, sb, sm) = (Scorer::new(&a, m), Scorer::new(&b, m), Scorer::new(&mix, m));
        let n = a.n();
        for k in 1..n {
            let span = Span::new(0, n - 1);
            let want = w * sa.split(span, k) + (1.0 - w) * sb.split(span, k);
            prop_assert!((sm.split(span, k) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shifting_split_scores_keeps_probabilities(
        scores in proptest::collection::vec(-5.0f64..5.0, 1..10),
        c in -100.0f64..100.0,
    ) {
        let p = split_log_prob(&scores).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let q = split_log_prob(&shifted).unwrap();
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((p.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative(a in matrix(), m in mode(), seed in any::<u64>()) {
        prop_assume!(a.n() >= 2);
        let gold = random_tree(a.n(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(tree_neg_log_likelihood(&gold, &a, m).unwrap() >= -1e-12);
        prop_assert!(margin_loss(&gold, &a, m, 1.0, false).unwrap() >= 0.0);
        let spans = gold.splits().len() as f64;
        let with_gold = margin_loss(&gold, &a, m, 1.0, true).unwrap();
        let without = margin_loss(&gold, &a, m, 1.0, false).unwrap();
        prop_assert!((with_gold - without - spans).abs() < 1e-9);
    }

    #[test]
    fn f1_is_symmetric((p, g) in tree_pair(), keep_root in any::<bool>(), keep_units in any::<bool>()) {
        let opts = BracketOptions { keep_root, keep_units };
        let pg = unlabeled_f1(std::slice::from_ref(&p), std::slice::from_ref(&g), opts).unwrap();
        let gp = unlabeled_f1(&[g], &[p], opts).unwrap();
        prop_assert_eq!(pg.corpus_f1, gp.corpus_f1);
        prop_assert_eq!(pg.corpus_precision, gp.corpus_recall);
        prop_assert_eq!(pg.corpus_recall, gp.corpus_precision);
        prop_assert_eq!(pg.corpus_f1, pg.sentence_f1_mean);
    }

    #[test]
    fn merged_rows_sum_to_one(
        words in 1usize..7,
        split in proptest::collection::vec(1usize..4, 7),
        delims in any::<bool>(),
        cells in proptest::collection::vec(0.001f64..1.0, 400),
    ) {
        let mut alignment = Vec::new();
        if delims { alignment.push(-1); }
        for (w, &count) in split.iter().take(words).enumerate() {
            alignment.extend(std::iter::repeat_n(w as i64, count));
        }
        if delims { alignment.push(-1); }
        let p = alignment.len();
        let piece = attention(p, &cells);
        let merged = merge_pieces(piece.matrix().view(), &alignment, MergeOptions::default()).unwrap();
        prop_assert_eq!(merged.n(), words);
        prop_assert!(merged.max_row_sum_error() < 1e-9);
    }

    #[test]
    fn synthetic_corpus_round_trips_byte_exactly(seed in 0u64..1000, pieces in 0.0f64..0.6, delimiters in any::<bool>()) {
        let s = gen_synthetic(&SyntheticSpec {
            n_sentences: 3,
            max_len: 6,
            piece_split_prob: pieces,
            delimiters,
            seed,
            ..Default::default()
        })
        .unwrap();
        let (file, sidecar) = s.corpus.to_parts();
        let bytes = file.to_bytes();
        let back = Corpus::from_parts(&attnparse::tensor_io::TensorFile::from_bytes(&bytes).unwrap(), sidecar.clone()).unwrap();
        prop_assert_eq!(&back, &s.corpus);
        let (file2, sidecar2) = back.to_parts();
        prop_assert_eq!(file2.to_bytes(), bytes);
        prop_assert_eq!(sidecar2, sidecar);
    }
}

#[test]
fn stripping_by_gold_positions_matches_stripping_by_tag() {
    let gold = parse_tree(
        "(S (NP (DT The) (NN cat)) (, ,) (VP (VBD sat) (PP (IN on) (NP (PRP it)))) (. .))",
        1,
    )
    .unwrap();
    let drop = punct_positions(&gold, PTB_PUNCT_TAGS);
    assert_eq!(drop, [2, 6].into_iter().collect());
    assert_eq!(
        strip_positions(&gold, &drop).unwrap(),
        strip_punct(&gold, PTB_PUNCT_TAGS).unwrap()
    );
    let pred = ParseTree::from_splits(7, |x, _| x + 1);
    let cut = strip_positions(&pred, &drop).unwrap();
    assert_eq!(cut.n_leaves(), 5);
    assert!(cut.leaves().iter().enumerate().all(|(i, l)| l.index == i));
}
