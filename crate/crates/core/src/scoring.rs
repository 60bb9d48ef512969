//! Span and split scores read off a word attention matrix.
//!
//! Two split scores are supported:
//!
//! * [`ScoreMode::OutsideAssociation`]: the split `k` of span `(x, y)` scores the
//!   negated mean attention between `(x, k-1)` and `(k, y)`, both directions.
//! * [`ScoreMode::InsideOutside`]: the split scores the sum of the two child span
//!   scores, where a span score is its mean internal attention minus its mean
//!   attention exchanged with every word outside it.
//!
//! Split indices name the first word of the right child. Every region sum is
//! answered in O(1) from a summed-area table built once per matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::WordAttention;
use crate::tree::Span;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreMode {
    /// Negative cross-span attention (UPOA / FPOA).
    #[serde(rename = "upoa")]
    OutsideAssociation,
    /// Inside minus outside association (UPIO / FPIO).
    #[serde(rename = "upio")]
    InsideOutside,
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "upoa" | "fpoa" | "oa" | "outside" => Ok(ScoreMode::OutsideAssociation),
            "upio" | "fpio" | "io" | "inside-outside" => Ok(ScoreMode::InsideOutside),
            other => Err(format!("unknown score mode `{other}` (expected upoa or upio)")),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::OutsideAssociation => "upoa",
            ScoreMode::InsideOutside => "upio",
        })
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("span {span} out of range for a {n}-word sentence")]
    OutOfRange { span: Span, n: usize },
    #[error("spans {left} and {right} are not adjacent")]
    NotAdjacent { left: Span, right: Span },
    #[error("outside association of the whole sentence {span} is undefined")]
    WholeSentence { span: Span },
    #[error("split {k} is not inside span {span}")]
    BadSplit { span: Span, k: usize },
}

/// Anything that can score a split of a span; what the parsers consume.
#[allow(clippy::len_without_is_empty)]
pub trait SplitScorer {
    fn len(&self) -> usize;

    /// Score of splitting `span` into `(span.start, k-1)` and `(k, span.end)`.
    /// Callers guarantee `span.start < k <= span.end < len()`.
    fn split(&self, span: Span, k: usize) -> f64;
}

/// Summed-area table over a square matrix: `region(r0, r1, c0, c1)` is the sum
/// of rows `r0..=r1`, columns `c0..=c1`.
#[derive(Debug, Clone)]
pub struct RegionSums {
    n: usize,
    table: Vec<f64>,
}

impl RegionSums {
    pub fn new(a: &WordAttention) -> Self {
        let n = a.n();
        let w = n + 1;
        let mut table = vec![0f64; w * w];
        let m = a.matrix();
        for i in 0..n {
            let mut row_acc = 0f64;
            for j in 0..n {
                row_acc += m[[i, j]];
                table[(i + 1) * w + j + 1] = table[i * w + j + 1] + row_acc;
            }
        }
        RegionSums { n, table }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.table[i * (self.n + 1) + j]
    }

    #[inline]
    pub fn region(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        self.at(r1 + 1, c1 + 1) - self.at(r0, c1 + 1) - self.at(r1 + 1, c0) + self.at(r0, c0)
    }
}

/// Immutable scorer for one sentence; cheap to query from many threads.
#[derive(Debug, Clone)]
pub struct Scorer {
    sums: RegionSums,
    mode: ScoreMode,
}

impl Scorer {
    pub fn new(a: &WordAttention, mode: ScoreMode) -> Self {
        Scorer {
            sums: RegionSums::new(a),
            mode,
        }
    }

    pub fn n(&self) -> usize {
        self.sums.n
    }

    pub fn mode(&self) -> ScoreMode {
        self.mode
    }

    fn check(&self, s: Span) -> Result<(), ScoreError> {
        if s.start > s.end || s.end >= self.n() {
            return Err(ScoreError::OutOfRange { span: s, n: self.n() });
        }
        Ok(())
    }

    #[inline]
    fn distance_unchecked(&self, x: usize, y: usize, z: usize) -> f64 {
        let cross = self.sums.region(x, y, y + 1, z) + self.sums.region(y + 1, z, x, y);
        -cross / (2.0 * (y - x + 1) as f64 * (z - y) as f64)
    }

    #[inline]
    fn inside_unchecked(&self, s: Span) -> f64 {
        let m = s.len() as f64;
        self.sums.region(s.start, s.end, s.start, s.end) / (m * m)
    }

    #[inline]
    fn outside_unchecked(&self, s: Span) -> f64 {
        let n = self.n();
        let m = s.len() as f64;
        let inside = self.sums.region(s.start, s.end, s.start, s.end);
        let from_span = self.sums.region(s.start, s.end, 0, n - 1) - inside;
        let to_span = self.sums.region(0, n - 1, s.start, s.end) - inside;
        (from_span + to_span) / (2.0 * m * n as f64 - 2.0 * m * m)
    }

    #[inline]
    fn span_unchecked(&self, s: Span) -> f64 {
        self.inside_unchecked(s) - self.outside_unchecked(s)
    }

    /// Negated mean attention between adjacent spans, both directions; in `[-1, 0]`.
    pub fn syntactic_distance(&self, left: Span, right: Span) -> Result<f64, ScoreError> {
        self.check(left)?;
        self.check(right)?;
        if right.start != left.end + 1 {
            return Err(ScoreError::NotAdjacent { left, right });
        }
        Ok(self.distance_unchecked(left.start, left.end, right.end))
    }

    /// Mean attention among words of the span; in `[0, 1]`.
    pub fn inside_assoc(&self, s: Span) -> Result<f64, ScoreError> {
        self.check(s)?;
        Ok(self.inside_unchecked(s))
    }

    /// Mean attention between the span and the rest of the sentence, both
    /// directions. Undefined for the whole sentence.
    pub fn outside_assoc(&self, s: Span) -> Result<f64, ScoreError> {
        self.check(s)?;
        if s.len() == self.n() {
            return Err(ScoreError::WholeSentence { span: s });
        }
        Ok(self.outside_unchecked(s))
    }

    pub fn span_score(&self, s: Span) -> Result<f64, ScoreError> {
        Ok(self.inside_assoc(s)? - self.outside_assoc(s)?)
    }

    pub fn split_score(&self, s: Span, k: usize) -> Result<f64, ScoreError> {
        self.check(s)?;
        if !(s.start < k && k <= s.end) {
            return Err(ScoreError::BadSplit { span: s, k });
        }
        Ok(SplitScorer::split(self, s, k))
    }
}

impl SplitScorer for Scorer {
    fn len(&self) -> usize {
        self.n()
    }

    #[inline]
    fn split(&self, s: Span, k: usize) -> f64 {
        match self.mode {
            ScoreMode::OutsideAssociation => self.distance_unchecked(s.start, k - 1, s.end),
            ScoreMode::InsideOutside => {
                self.span_unchecked(Span::new(s.start, k - 1)) + self.span_unchecked(Span::new(k, s.end))
            }
        }
    }
}

/// Split scores given explicitly, indexed `[start][end][k]`; useful for
/// testing parsers on arbitrary score tables.
#[derive(Debug, Clone)]
pub struct TableScorer {
    n: usize,
    scores: Vec<f64>,
}

impl TableScorer {
    pub fn from_fn(n: usize, mut f: impl FnMut(Span, usize) -> f64) -> Self {
        let mut scores = vec![f64::NAN; n * n * n];
        for x in 0..n {
            for y in x + 1..n {
                for k in x + 1..=y {
                    scores[(x * n + y) * n + k] = f(Span::new(x, y), k);
                }
            }
        }
        TableScorer { n, scores }
    }
}

impl SplitScorer for TableScorer {
    fn len(&self) -> usize {
        self.n
    }

    fn split(&self, s: Span, k: usize) -> f64 {
        self.scores[(s.start * self.n + s.end) * self.n + k]
    }
}
