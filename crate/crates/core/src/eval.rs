//! Unlabeled bracketing F1 in the style of evalb, per-label recall, tree
//! normalization (punctuation removal, binarization) and trivial baselines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tree::{Leaf, ParseTree, Span};

/// PTB punctuation part-of-speech tags.
pub const PTB_PUNCT_TAGS: &[&str] = &[".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#", "$"];

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("tree is empty after removing punctuation")]
    EmptyAfterStrip,
    #[error("sentence {index}: prediction has {pred} leaves, gold has {gold}")]
    LeafMismatch { index: usize, pred: usize, gold: usize },
    #[error("{pred} predicted trees but {gold} gold trees")]
    CountMismatch { pred: usize, gold: usize },
}

/// Removes leaves tagged with one of `punct_tags`, drops emptied nodes,
/// collapses unary chains (keeping the topmost label) and renumbers leaves.
pub fn strip_punct(tree: &ParseTree, punct_tags: &[&str]) -> Result<ParseTree, EvalError> {
    let punct: HashSet<&str> = punct_tags.iter().copied().collect();
    strip_leaves(tree, &|l| l.tag.as_deref().is_some_and(|t| punct.contains(t)))
}

/// Leaf positions of `tree` tagged with one of `punct_tags`.
pub fn punct_positions(tree: &ParseTree, punct_tags: &[&str]) -> HashSet<usize> {
    tree.leaves()
        .into_iter()
        .filter(|l| l.tag.as_deref().is_some_and(|t| punct_tags.contains(&t)))
        .map(|l| l.index)
        .collect()
}

/// Like [`strip_punct`] but drops the leaves at the given positions, so an
/// untagged prediction can be cut the same way as its gold tree.
pub fn strip_positions(tree: &ParseTree, positions: &HashSet<usize>) -> Result<ParseTree, EvalError> {
    strip_leaves(tree, &|l| positions.contains(&l.index))
}

fn strip_leaves(tree: &ParseTree, drop: &dyn Fn(&Leaf) -> bool) -> Result<ParseTree, EvalError> {
    fn strip(t: &ParseTree, drop: &dyn Fn(&Leaf) -> bool) -> Option<ParseTree> {
        match t {
            ParseTree::Leaf(l) => (!drop(l)).then(|| t.clone()),
            ParseTree::Node { label, children } => {
                let kept: Vec<ParseTree> = children.iter().filter_map(|c| strip(c, drop)).collect();
                match kept.len() {
                    0 => None,
                    1 if !kept[0].is_leaf() => {
                        // unary over a node: keep the outer label
                        let only = kept.into_iter().next().unwrap();
                        match only {
                            ParseTree::Node { children, .. } => Some(ParseTree::Node {
                                label: label.clone(),
                                children,
                            }),
                            leaf => Some(leaf),
                        }
                    }
                    _ => Some(ParseTree::Node {
                        label: label.clone(),
                        children: kept,
                    }),
                }
            }
        }
    }
    let mut out = strip(tree, drop).ok_or(EvalError::EmptyAfterStrip)?;
    let mut next = 0;
    out.for_each_leaf_mut(&mut |l: &mut Leaf| {
        l.index = next;
        next += 1;
    });
    Ok(out)
}

/// Collapses unary chains to their top node, then folds nodes with more than
/// two children rightward: `(a b c)` becomes `(a (b c))`. Introduced nodes are
/// labeled `@` + parent label so [`unbinarize`] can remove them.
pub fn binarize(tree: &ParseTree) -> ParseTree {
    match tree {
        ParseTree::Leaf(_) => tree.clone(),
        ParseTree::Node { label, children } => {
            if children.len() == 1 {
                let inner = binarize(&children[0]);
                return match inner {
                    ParseTree::Node { children, .. } => ParseTree::Node {
                        label: label.clone(),
                        children,
                    },
                    leaf => leaf,
                };
            }
            let mut kids: Vec<ParseTree> = children.iter().map(binarize).collect();
            let aux = Some(format!("@{}", label.as_deref().unwrap_or("")));
            while kids.len() > 2 {
                let right = kids.pop().unwrap();
                let left = kids.pop().unwrap();
                kids.push(ParseTree::Node {
                    label: aux.clone(),
                    children: vec![left, right],
                });
            }
            // after folding, the last two entries form the right spine
            ParseTree::Node {
                label: label.clone(),
                children: kids,
            }
        }
    }
}

/// Splices out nodes introduced by [`binarize`].
pub fn unbinarize(tree: &ParseTree) -> ParseTree {
    fn splice(t: &ParseTree, out: &mut Vec<ParseTree>) {
        match t {
            ParseTree::Node {
                label: Some(l),
                children,
            } if l.starts_with('@') => {
                children.iter().for_each(|c| splice(c, out));
            }
            other => out.push(unbinarize(other)),
        }
    }
    match tree {
        ParseTree::Leaf(_) => tree.clone(),
        ParseTree::Node { label, children } => {
            let mut kids = Vec::new();
            children.iter().for_each(|c| splice(c, &mut kids));
            ParseTree::Node {
                label: label.clone(),
                children: kids,
            }
        }
    }
}

/// Which brackets count toward F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BracketOptions {
    /// Count the span covering the whole sentence.
    pub keep_root: bool,
    /// Count single-word spans.
    pub keep_units: bool,
}

impl BracketOptions {
    fn eligible(&self, span: Span, n: usize) -> bool {
        (self.keep_units || !span.is_unit()) && (self.keep_root || span.len() != n)
    }
}

/// Multiset of eligible unlabeled brackets. Unary chains count once.
pub fn brackets(tree: &ParseTree, opts: BracketOptions) -> HashMap<Span, usize> {
    let n = tree.n_leaves();
    let mut out = HashMap::new();
    for (span, node) in tree.nodes() {
        let children = node.children();
        if children.len() == 1 && !children[0].is_leaf() {
            continue;
        }
        if opts.eligible(span, n) {
            *out.entry(span).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BracketCounts {
    pub matched: usize,
    pub gold: usize,
    pub predicted: usize,
}

impl BracketCounts {
    pub fn of(pred: &HashMap<Span, usize>, gold: &HashMap<Span, usize>) -> Self {
        let matched = pred
            .iter()
            .map(|(s, &c)| c.min(gold.get(s).copied().unwrap_or(0)))
            .sum();
        BracketCounts {
            matched,
            gold: gold.values().sum(),
            predicted: pred.values().sum(),
        }
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            return if self.gold == 0 { 100.0 } else { 0.0 };
        }
        100.0 * self.matched as f64 / self.predicted as f64
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            return if self.predicted == 0 { 100.0 } else { 0.0 };
        }
        100.0 * self.matched as f64 / self.gold as f64
    }

    /// F1 in percent; 100 when both sides are empty, 0 when only one is.
    pub fn f1(&self) -> f64 {
        if self.gold == 0 && self.predicted == 0 {
            return 100.0;
        }
        200.0 * self.matched as f64 / (self.gold + self.predicted) as f64
    }
}

impl std::ops::AddAssign for BracketCounts {
    fn add_assign(&mut self, o: Self) {
        self.matched += o.matched;
        self.gold += o.gold;
        self.predicted += o.predicted;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub corpus_precision: f64,
    pub corpus_recall: f64,
    pub corpus_f1: f64,
    pub sentence_f1_mean: f64,
    pub counts: BracketCounts,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_label_recall: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>10}", "sentences", self.sentences);
        let _ = writeln!(s, "{:<22}{:>10}", "gold brackets", self.counts.gold);
        let _ = writeln!(s, "{:<22}{:>10}", "predicted brackets", self.counts.predicted);
        let _ = writeln!(s, "{:<22}{:>10}", "matched brackets", self.counts.matched);
        let _ = writeln!(s, "{:<22}{:>10.2}", "corpus precision", self.corpus_precision);
        let _ = writeln!(s, "{:<22}{:>10.2}", "corpus recall", self.corpus_recall);
        let _ = writeln!(s, "{:<22}{:>10.2}", "corpus F1", self.corpus_f1);
        let _ = writeln!(s, "{:<22}{:>10.2}", "sentence F1", self.sentence_f1_mean);
        for (label, r) in &self.per_label_recall {
            let _ = writeln!(s, "{:<22}{:>10.2}", format!("recall {label}"), r);
        }
        s
    }
}

fn check_aligned(pred: &[ParseTree], gold: &[ParseTree]) -> Result<Vec<usize>, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::CountMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    pred.iter()
        .zip(gold)
        .enumerate()
        .map(|(index, (p, g))| {
            let (pn, gn) = (p.n_leaves(), g.n_leaves());
            if pn != gn {
                Err(EvalError::LeafMismatch {
                    index,
                    pred: pn,
                    gold: gn,
                })
            } else {
                Ok(pn)
            }
        })
        .collect()
}

/// Corpus-level (pooled counts) and sentence-level (mean per-sentence) F1.
pub fn unlabeled_f1(pred: &[ParseTree], gold: &[ParseTree], opts: BracketOptions) -> Result<EvalReport, EvalError> {
    check_aligned(pred, gold)?;
    let mut total = BracketCounts::default();
    let mut sentence_sum = 0.0;
    for (p, g) in pred.iter().zip(gold) {
        let c = BracketCounts::of(&brackets(p, opts), &brackets(g, opts));
        sentence_sum += c.f1();
        total += c;
    }
    let sentences = pred.len();
    Ok(EvalReport {
        sentences,
        corpus_precision: total.precision(),
        corpus_recall: total.recall(),
        corpus_f1: total.f1(),
        sentence_f1_mean: if sentences == 0 {
            100.0
        } else {
            sentence_sum / sentences as f64
        },
        counts: total,
        per_label_recall: BTreeMap::new(),
    })
}

/// `NP-SBJ-1` -> `NP`; labels starting with `-` are kept whole.
pub fn base_label(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    label.split(['-', '=']).next().unwrap_or(label)
}

/// For each gold label, the percentage of its eligible constituents whose span
/// is bracketed in the prediction. Every node of a unary chain counts.
pub fn label_recall(
    pred: &[ParseTree],
    gold: &[ParseTree],
    opts: BracketOptions,
) -> Result<BTreeMap<String, f64>, EvalError> {
    check_aligned(pred, gold)?;
    let all = BracketOptions {
        keep_root: true,
        keep_units: true,
    };
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let n = g.n_leaves();
        let pred_spans = brackets(p, all);
        for (span, node) in g.nodes() {
            let Some(label) = node.label() else { continue };
            if label.is_empty() || label.starts_with('@') || !opts.eligible(span, n) {
                continue;
            }
            let e = hits.entry(base_label(label).to_string()).or_insert((0, 0));
            e.1 += 1;
            if pred_spans.contains_key(&span) {
                e.0 += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(l, (m, t))| (l, 100.0 * m as f64 / t as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Left,
    Right,
    /// Each span splits at a uniformly chosen point (not uniform over trees).
    Random(u64),
}

pub fn left_branching(n: usize) -> ParseTree {
    ParseTree::from_splits(n, |_, y| y)
}

pub fn right_branching(n: usize) -> ParseTree {
    ParseTree::from_splits(n, |x, _| x + 1)
}

pub fn random_tree(n: usize, rng: &mut impl Rng) -> ParseTree {
    ParseTree::from_splits(n, |x, y| rng.random_range(x + 1..=y))
}

pub fn baseline_tree(n: usize, kind: BaselineKind) -> ParseTree {
    match kind {
        BaselineKind::Left => left_branching(n),
        BaselineKind::Right => right_branching(n),
        BaselineKind::Random(seed) => {
            use rand::SeedableRng;
            random_tree(n, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
        }
    }
}
