//! Regenerates `data/regression/`: noise-free synthetic corpora whose gold
//! trees are recovered by UPOA+greedy and UPIO+chart.
//!
//! Every candidate sentence is checked by brute force, using direct summation
//! over the stored f32 attention and exhaustive enumeration of binary trees.
//! A sentence is kept only if the gold tree wins by more than `MARGIN` under
//! both decoders. Rejected sentences are replaced by fresh draws from the
//! same generator.
//!
//!     cargo run --release -p attnparse-core --example freeze_regression [out_dir]

use std::path::PathBuf;

use attnparse::synth::Generator;
use attnparse::tensor_io::write_corpus;
use attnparse::{ParseTree, Span, SyntheticSpec};
use ndarray::Array2;

const SEEDS: u64 = 5;
const PER_SEED: usize = 50;
const MARGIN: f64 = 1e-6;

fn region(a: &Array2<f64>, rows: Span, cols: Span) -> f64 {
    let mut s = 0.0;
    for i in rows.start..=rows.end {
        for j in cols.start..=cols.end {
            s += a[[i, j]];
        }
    }
    s
}

fn oa_split(a: &Array2<f64>, x: usize, k: usize, y: usize) -> f64 {
    let (l, r) = (Span::new(x, k - 1), Span::new(k, y));
    -(region(a, l, r) + region(a, r, l)) / (2.0 * l.len() as f64 * r.len() as f64)
}

fn io_span(a: &Array2<f64>, s: Span) -> f64 {
    let n = a.nrows();
    let m = s.len();
    let mut out_sum = 0.0;
    for i in s.start..=s.end {
        for j in (0..n).filter(|j| !(s.start..=s.end).contains(j)) {
            out_sum += a[[i, j]] + a[[j, i]];
        }
    }
    region(a, s, s) / (m * m) as f64 - out_sum / (2 * m * (n - m)) as f64
}

fn all_trees(x: usize, y: usize) -> Vec<Vec<(usize, usize, usize)>> {
    if x == y {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for k in x + 1..=y {
        for l in all_trees(x, k - 1) {
            for r in all_trees(k, y) {
                let mut t = vec![(x, k, y)];
                t.extend(&l);
                t.extend(&r);
                out.push(t);
            }
        }
    }
    out
}

fn gold_splits(tree: &ParseTree) -> Vec<(usize, usize, usize)> {
    let mut v: Vec<_> = tree.splits().into_iter().map(|(s, k)| (s.start, k, s.end)).collect();
    v.sort_unstable();
    v
}

fn greedy_ok(a: &Array2<f64>, gold: &[(usize, usize, usize)]) -> bool {
    gold.iter().all(|&(x, kg, y)| {
        let g = oa_split(a, x, kg, y);
        (x + 1..=y)
            .filter(|&k| k != kg)
            .all(|k| g > oa_split(a, x, k, y) + MARGIN)
    })
}

fn chart_ok(a: &Array2<f64>, gold: &[(usize, usize, usize)]) -> bool {
    let n = a.nrows();
    let score = |t: &[(usize, usize, usize)]| -> f64 {
        t.iter()
            .map(|&(x, k, y)| io_span(a, Span::new(x, k - 1)) + io_span(a, Span::new(k, y)))
            .sum()
    };
    let g = score(gold);
    all_trees(0, n - 1).into_iter().all(|mut t| {
        t.sort_unstable();
        t == gold || g > score(&t) + MARGIN
    })
}

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/regression"));
    std::fs::create_dir_all(&out).expect("create output dir");
    let mut summary = Vec::new();
    for seed in 0..SEEDS {
        let spec = SyntheticSpec {
            n_sentences: PER_SEED,
            min_len: 2,
            max_len: 10,
            noise: 0.0,
            temperature: 1.0,
            seed,
            ..Default::default()
        };
        let mut g = Generator::new(&spec).expect("valid spec");
        let (mut sentences, mut gold) = (Vec::new(), Vec::new());
        let (mut drawn, mut rej_greedy, mut rej_chart) = (0usize, 0usize, 0usize);
        while sentences.len() < PER_SEED {
            let (tree, record) = g.sentence();
            drawn += 1;
            let a = record.attention[&(0, 0)].mapv(f64::from);
            assert_eq!(
                a.nrows(),
                record.n_words(),
                "regression sentences have one piece per word"
            );
            let splits = gold_splits(&tree);
            let (go, co) = (greedy_ok(&a, &splits), chart_ok(&a, &splits));
            rej_greedy += usize::from(!go);
            rej_chart += usize::from(!co);
            if go && co {
                sentences.push(record);
                gold.push(tree);
            }
        }
        let corpus = g.finish(sentences, gold);
        write_corpus(out.join(format!("seed{seed}.atn")), &corpus.corpus).expect("write corpus");
        let text: String = corpus.gold.iter().map(|t| t.to_unlabeled_bracketed() + "\n").collect();
        std::fs::write(out.join(format!("seed{seed}.gold")), text).expect("write gold");
        println!("seed {seed}: drawn {drawn}, failed greedy {rej_greedy}, failed chart {rej_chart}");
        summary.push(serde_json::json!({
            "seed": seed,
            "drawn": drawn,
            "kept": PER_SEED,
            "failed_upoa_greedy": rej_greedy,
            "failed_upio_chart": rej_chart,
        }));
    }
    let manifest = serde_json::json!({ "margin": MARGIN, "seeds": summary });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap() + "\n",
    )
    .expect("write manifest");
}
