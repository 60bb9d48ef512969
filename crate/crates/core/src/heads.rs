//! Head selection and weighted head ensembles.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{merge_pieces, AlignError, MergeOptions, WordAttention};
use crate::eval::{unlabeled_f1, BracketOptions, EvalError};
use crate::parser::{parse, Algorithm};
use crate::scoring::{ScoreMode, Scorer};
use crate::tensor_io::{SentenceRecord, ROW_SUM_TOLERANCE};
use crate::tree::ParseTree;

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("head selector is empty")]
    EmptySelector,
    #[error("head weights must be finite and non-negative, got {0}")]
    BadWeight(f64),
    #[error("all head weights are zero")]
    ZeroWeights,
    #[error("sentence {sentence} has no attention for layer {layer} head {head}")]
    MissingHead { sentence: usize, layer: usize, head: usize },
    #[error("sentence {sentence}: {source}")]
    Align {
        sentence: usize,
        #[source]
        source: AlignError,
    },
    #[error("cannot rank heads on an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("head selector {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadWeight {
    pub layer: usize,
    pub head: usize,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// A nonempty list of `(layer, head, weight)`, serialized as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadSelector {
    entries: Vec<HeadWeight>,
}

impl HeadSelector {
    pub fn new(entries: Vec<HeadWeight>) -> Result<Self, HeadError> {
        if entries.is_empty() {
            return Err(HeadError::EmptySelector);
        }
        for e in &entries {
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(HeadError::BadWeight(e.weight));
            }
        }
        if entries.iter().all(|e| e.weight == 0.0) {
            return Err(HeadError::ZeroWeights);
        }
        Ok(HeadSelector { entries })
    }

    pub fn single(layer: usize, head: usize) -> Self {
        HeadSelector {
            entries: vec![HeadWeight {
                layer,
                head,
                weight: 1.0,
            }],
        }
    }

    /// Equal weights over the given heads.
    pub fn uniform(heads: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, HeadError> {
        Self::new(
            heads
                .into_iter()
                .map(|(layer, head)| HeadWeight {
                    layer,
                    head,
                    weight: 1.0,
                })
                .collect(),
        )
    }

    /// Plain average over every head stored in `record`.
    pub fn uniform_all(record: &SentenceRecord) -> Result<Self, HeadError> {
        Self::uniform(record.heads())
    }

    /// Equal weights over the `k` best heads of a ranking.
    pub fn top_k(ranking: &[HeadRank], k: usize) -> Result<Self, HeadError> {
        Self::uniform(ranking.iter().take(k).map(|r| (r.layer, r.head)))
    }

    pub fn entries(&self) -> &[HeadWeight] {
        &self.entries
    }

    /// Weights rescaled to sum to one, in entry order.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        self.entries.iter().map(|e| e.weight / total).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, HeadError> {
        let path = path.as_ref();
        let io = |message: String| HeadError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let raw: Vec<HeadWeight> = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        Self::new(raw)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), HeadError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("selector serializes");
        std::fs::write(path, text + "\n").map_err(|e| HeadError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Word-level attention of one head of one sentence.
pub fn word_attention(
    record: &SentenceRecord,
    sentence: usize,
    layer: usize,
    head: usize,
    merge: MergeOptions,
) -> Result<WordAttention, HeadError> {
    let m = record
        .attention
        .get(&(layer, head))
        .ok_or(HeadError::MissingHead { sentence, layer, head })?;
    merge_pieces(m.mapv(f64::from).view(), &record.alignment, merge)
        .map_err(|source| HeadError::Align { sentence, source })
}

/// Merges every selected head to word level and returns `Σ wᵢ Aᵢ` with the
/// weights normalized to sum to one.
pub fn combine(
    selector: &HeadSelector,
    record: &SentenceRecord,
    sentence: usize,
    merge: MergeOptions,
) -> Result<WordAttention, HeadError> {
    let weights = selector.normalized_weights();
    let mut acc: Option<Array2<f64>> = None;
    for (e, w) in selector.entries.iter().zip(weights) {
        let a = word_attention(record, sentence, e.layer, e.head, merge)?.into_matrix();
        match &mut acc {
            None => acc = Some(a * w),
            Some(sum) => sum.scaled_add(w, &a),
        }
    }
    let acc = acc.expect("selector is nonempty");
    WordAttention::new(acc, ROW_SUM_TOLERANCE).map_err(|source| HeadError::Align { sentence, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadRank {
    pub layer: usize,
    pub head: usize,
    /// Mean sentence-level F1 in percent.
    pub f1: f64,
}

/// Parses every sentence with each single head and sorts heads by mean
/// sentence F1, best first. Equal scores keep `(layer, head)` order.
pub fn rank_heads(
    corpus: &[SentenceRecord],
    gold: &[ParseTree],
    mode: ScoreMode,
    algorithm: Algorithm,
    merge: MergeOptions,
    brackets: BracketOptions,
) -> Result<Vec<HeadRank>, HeadError> {
    let first = corpus.first().ok_or(HeadError::EmptyCorpus)?;
    if corpus.len() != gold.len() {
        return Err(EvalError::CountMismatch {
            pred: corpus.len(),
            gold: gold.len(),
        }
        .into());
    }
    let heads: Vec<(usize, usize)> = first.heads().collect();
    let mut ranks = heads
        .par_iter()
        .map(|&(layer, head)| {
            let pred = corpus
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let a = word_attention(r, i, layer, head, merge)?;
                    Ok(parse(&Scorer::new(&a, mode), algorithm).expect("sentences have words"))
                })
                .collect::<Result<Vec<_>, HeadError>>()?;
            let report = unlabeled_f1(&pred, gold, brackets)?;
            Ok(HeadRank {
                layer,
                head,
                f1: report.sentence_f1_mean,
            })
        })
        .collect::<Result<Vec<_>, HeadError>>()?;
    ranks.sort_by(|a, b| b.f1.total_cmp(&a.f1).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    Ok(ranks)
}
