//! Greedy top-down and CKY-style chart decoding of binary trees from split scores.
//!
//! Ties (within [`TIE_TOLERANCE`]) always go to the smallest split index, so
//! both decoders are total functions of their input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scoring::{ScoreMode, SplitScorer};
use crate::tree::{ParseTree, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Greedy,
    Chart,
}

impl Algorithm {
    /// Outside association decodes greedily, inside-outside with the chart.
    pub fn default_for(mode: ScoreMode) -> Self {
        match mode {
            ScoreMode::OutsideAssociation => Algorithm::Greedy,
            ScoreMode::InsideOutside => Algorithm::Chart,
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(Algorithm::Greedy),
            "chart" | "cky" => Ok(Algorithm::Chart),
            other => Err(format!(
                "unknown parsing algorithm `{other}` (expected greedy or chart)"
            )),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Greedy => "greedy",
            Algorithm::Chart => "chart",
        })
    }
}

#[derive(Debug, Clone, Copy, thiserror::Error, PartialEq, Eq)]
#[error("cannot parse an empty sentence")]
pub struct EmptySentence;

/// Scores closer than this count as tied, so rounding noise cannot move a tie
/// away from the smallest split index.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Best split of `span` by raw split score; smallest index wins ties.
fn argmax_split(scorer: &impl SplitScorer, span: Span, bonus: impl Fn(usize) -> f64) -> (usize, f64) {
    let mut best_k = span.start + 1;
    let mut best = f64::NEG_INFINITY;
    for k in span.start + 1..=span.end {
        let s = scorer.split(span, k) + bonus(k);
        if s > best + TIE_TOLERANCE {
            best = s;
            best_k = k;
        }
    }
    (best_k, best)
}

/// Recursively splits each span at its highest-scoring split point.
pub fn greedy_parse(scorer: &impl SplitScorer) -> Result<ParseTree, EmptySentence> {
    let n = scorer.len();
    if n == 0 {
        return Err(EmptySentence);
    }
    Ok(ParseTree::from_splits(n, |x, y| {
        argmax_split(scorer, Span::new(x, y), |_| 0.0).0
    }))
}

/// Best score and best split for every span.
#[derive(Debug, Clone)]
pub struct Chart {
    n: usize,
    best_score: Vec<f64>,
    best_split: Vec<usize>,
}

impl Chart {
    pub fn fill(scorer: &impl SplitScorer) -> Self {
        let n = scorer.len();
        let mut chart = Chart {
            n,
            best_score: vec![0.0; n * n],
            best_split: vec![0; n * n],
        };
        for width in 2..=n {
            for x in 0..=n - width {
                let y = x + width - 1;
                let (k, s) = argmax_split(scorer, Span::new(x, y), |k| {
                    chart.best_score[x * n + k - 1] + chart.best_score[k * n + y]
                });
                chart.best_score[x * n + y] = s;
                chart.best_split[x * n + y] = k;
            }
        }
        chart
    }

    pub fn best_score(&self, span: Span) -> f64 {
        self.best_score[span.start * self.n + span.end]
    }

    pub fn best_split(&self, span: Span) -> usize {
        self.best_split[span.start * self.n + span.end]
    }

    pub fn tree(&self) -> ParseTree {
        ParseTree::from_splits(self.n, |x, y| self.best_split(Span::new(x, y)))
    }
}

/// Finds the binary tree maximizing the sum of its split scores.
pub fn chart_parse(scorer: &impl SplitScorer) -> Result<ParseTree, EmptySentence> {
    if scorer.len() == 0 {
        return Err(EmptySentence);
    }
    Ok(Chart::fill(scorer).tree())
}

pub fn parse(scorer: &impl SplitScorer, algorithm: Algorithm) -> Result<ParseTree, EmptySentence> {
    match algorithm {
        Algorithm::Greedy => greedy_parse(scorer),
        Algorithm::Chart => chart_parse(scorer),
    }
}

/// Sum of split scores over a binary tree's internal nodes.
pub fn tree_score(scorer: &impl SplitScorer, tree: &ParseTree) -> f64 {
    tree.splits().into_iter().map(|(span, k)| scorer.split(span, k)).sum()
}
