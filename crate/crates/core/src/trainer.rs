//! Few-shot training of the query/key projections (and optionally head
//! mixture weights) on gold trees.
//!
//! Attention is recomputed from frozen word-level hidden states as
//! `softmax((H Wq)(H Wk)ᵀ / c)`, scored exactly like the unsupervised modes,
//! and trained with a per-span split likelihood or a hinge loss. The backward
//! pass is written out by hand: split scores are linear in region sums of the
//! attention matrix, so their gradient is scattered back through a 2-D
//! difference array.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{merge_rows, MergeOptions, WordAttention};
use crate::eval::binarize;
use crate::heads::word_attention;
use crate::scoring::{ScoreMode, Scorer, SplitScorer};
use crate::tensor_io::{read_tensor_file, write_tensor_file, Corpus, SentenceRecord, TensorFile, TensorIoError};
use crate::tree::{ParseTree, Span};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at sentence {sentence} (epoch {epoch})")]
    NonFinite {
        what: &'static str,
        sentence: usize,
        epoch: usize,
    },
    #[error("attention recomputation overflowed")]
    Overflow,
    #[error("no candidate splits")]
    NoCandidates,
    #[error("gold tree is not binary")]
    NonBinary,
    #[error("sentence {sentence}: gold tree has {tree} leaves, sentence has {words} words")]
    LengthMismatch { sentence: usize, tree: usize, words: usize },
    #[error("sentence {sentence} has no hidden states for layer {layer}")]
    MissingHidden { sentence: usize, layer: usize },
    #[error("missing projection tensors for layer {0}")]
    MissingProjection(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Heads(#[from] crate::heads::HeadError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("checkpoint metadata: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Trainable query and key projections, both `d_model x d_proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
}

impl ProjectionPair {
    pub fn new(wq: Array2<f64>, wk: Array2<f64>) -> Result<Self> {
        if wq.dim() != wk.dim() {
            return Err(TrainError::Shape(format!(
                "wq is {:?} but wk is {:?}",
                wq.dim(),
                wk.dim()
            )));
        }
        if wq.ncols() == 0 || wq.nrows() == 0 {
            return Err(TrainError::Shape(
                "projections must have at least one row and column".into(),
            ));
        }
        if !wq.iter().chain(wk.iter()).all(|v| v.is_finite()) {
            return Err(TrainError::Shape("projections contain non-finite values".into()));
        }
        Ok(ProjectionPair { wq, wk })
    }

    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_proj(&self) -> usize {
        self.wq.ncols()
    }

    /// Entries uniform in `±1/√d_model`.
    pub fn random(d_model: usize, d_proj: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (d_model as f64).sqrt();
        let mut draw = || Array2::from_shape_simple_fn((d_model, d_proj), || rng.random_range(-b..=b));
        let wq = draw();
        let wk = draw();
        ProjectionPair { wq, wk }
    }

    /// Keeps the leading `d_proj` columns.
    pub fn truncate(self, d_proj: usize) -> Result<Self> {
        if d_proj == 0 || d_proj > self.d_proj() {
            return Err(TrainError::Config(format!(
                "d_proj {d_proj} must be in 1..={}",
                self.d_proj()
            )));
        }
        let cut = |m: Array2<f64>| m.slice(ndarray::s![.., ..d_proj]).to_owned();
        Ok(ProjectionPair {
            wq: cut(self.wq),
            wk: cut(self.wk),
        })
    }
}

/// Takes the exported `proj/l{layer}` projections, truncated to `d_proj` columns.
pub fn init_from_pretrained(corpus: &Corpus, layer: usize, d_proj: Option<usize>) -> Result<ProjectionPair> {
    let (wq, wk) = corpus
        .projections
        .get(&layer)
        .ok_or(TrainError::MissingProjection(layer))?;
    let p = ProjectionPair::new(wq.mapv(f64::from), wk.mapv(f64::from))?;
    match d_proj {
        Some(d) if d != p.d_proj() => p.truncate(d),
        _ => Ok(p),
    }
}

/// Starting model for `config`: pretrained or seeded random projections, plus
/// a uniform mixture over `heads` when head weights are learned.
pub fn initial_model(corpus: &Corpus, config: &TrainConfig, heads: &[(usize, usize)]) -> Result<Model> {
    let layer = config.layer;
    let d_model = corpus
        .sentences
        .first()
        .ok_or(TrainError::EmptyCorpus)?
        .hidden
        .get(&layer)
        .ok_or(TrainError::MissingHidden { sentence: 0, layer })?
        .ncols();
    let projection = if !config.train_projections {
        ProjectionPair::new(Array2::zeros((d_model, 1)), Array2::zeros((d_model, 1)))?
    } else if config.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        ProjectionPair::random(d_model, config.d_proj.unwrap_or(d_model), &mut rng)
    } else {
        init_from_pretrained(corpus, layer, config.d_proj)?
    };
    if !config.learn_head_weights {
        return Ok(Model::projection_only(projection, config.logit_divisor));
    }
    let mut components = Vec::new();
    if config.train_projections {
        components.push(Component::Recomputed);
    }
    components.extend(heads.iter().map(|&(layer, head)| Component::Head { layer, head }));
    if components.is_empty() {
        return Err(TrainError::Config(
            "learning head weights needs at least one head".into(),
        ));
    }
    Ok(Model::mixture(projection, config.logit_divisor, components))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitDivisor {
    /// `√d_proj`, the width of the dot products.
    #[default]
    Dproj,
    /// `√d_model`.
    Dmodel,
}

impl LogitDivisor {
    pub fn value(self, p: &ProjectionPair) -> f64 {
        match self {
            LogitDivisor::Dproj => (p.d_proj() as f64).sqrt(),
            LogitDivisor::Dmodel => (p.d_model() as f64).sqrt(),
        }
    }
}

impl std::str::FromStr for LogitDivisor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dproj" => Ok(LogitDivisor::Dproj),
            "dmodel" => Ok(LogitDivisor::Dmodel),
            other => Err(format!("unknown logit divisor `{other}` (expected dproj or dmodel)")),
        }
    }
}

fn softmax_rows(mut s: Array2<f64>) -> Result<Array2<f64>> {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !max.is_finite() {
            return Err(TrainError::Overflow);
        }
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    Ok(s)
}

/// Row softmax of `(H Wq)(H Wk)ᵀ / divisor`.
pub fn recompute_attention(h: ArrayView2<'_, f64>, p: &ProjectionPair, divisor: LogitDivisor) -> Result<WordAttention> {
    if h.ncols() != p.d_model() {
        return Err(TrainError::Shape(format!(
            "hidden width {} but projections expect {}",
            h.ncols(),
            p.d_model()
        )));
    }
    let q = h.dot(&p.wq);
    let k = h.dot(&p.wk);
    let s = q.dot(&k.t()) / divisor.value(p);
    Ok(WordAttention::unchecked(softmax_rows(s)?))
}

/// Log-softmax of a span's split scores.
pub fn split_log_prob(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(TrainError::NoCandidates);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(scores.iter().map(|s| s - lse).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mle,
    Margin,
}

impl LossKind {
    /// Inside-outside trains with likelihood, outside association with the hinge.
    pub fn default_for(mode: ScoreMode) -> Self {
        match mode {
            ScoreMode::InsideOutside => LossKind::Mle,
            ScoreMode::OutsideAssociation => LossKind::Margin,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mle" => Ok(LossKind::Mle),
            "margin" => Ok(LossKind::Margin),
            other => Err(format!("unknown loss `{other}` (expected mle or margin)")),
        }
    }
}

/// Candidate set for the likelihood of a gold split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Split points inside the gold span.
    #[default]
    Span,
    /// All `n-1` split points of the sentence; points outside the gold span
    /// are scored as splits of the whole sentence.
    Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub margin: f64,
    /// Keep the gold split's own hinge term, a constant `margin` per span.
    pub include_gold: bool,
    pub normalization: Normalization,
}

impl LossSpec {
    pub fn mle() -> Self {
        LossSpec {
            kind: LossKind::Mle,
            margin: 1.0,
            include_gold: false,
            normalization: Normalization::Span,
        }
    }

    pub fn margin(margin: f64) -> Self {
        LossSpec {
            kind: LossKind::Margin,
            margin,
            include_gold: false,
            normalization: Normalization::Span,
        }
    }
}

/// A split score as `Σ coef · region(r0, r1, c0, c1)`.
fn split_terms(n: usize, span: Span, k: usize, mode: ScoreMode, out: &mut Vec<(f64, [usize; 4])>) {
    out.clear();
    match mode {
        ScoreMode::OutsideAssociation => {
            let (x, y, z) = (span.start, k - 1, span.end);
            let c = -1.0 / (2.0 * (y - x + 1) as f64 * (z - y) as f64);
            out.push((c, [x, y, y + 1, z]));
            out.push((c, [y + 1, z, x, y]));
        }
        ScoreMode::InsideOutside => {
            for s in [Span::new(span.start, k - 1), Span::new(k, span.end)] {
                let m = s.len() as f64;
                let den = 2.0 * m * n as f64 - 2.0 * m * m;
                out.push((1.0 / (m * m) + 2.0 / den, [s.start, s.end, s.start, s.end]));
                out.push((-1.0 / den, [s.start, s.end, 0, n - 1]));
                out.push((-1.0 / den, [0, n - 1, s.start, s.end]));
            }
        }
    }
}

/// Accumulates rectangle updates; `finish` returns the dense gradient.
struct RegionGrad {
    n: usize,
    diff: Vec<f64>,
}

impl RegionGrad {
    fn new(n: usize) -> Self {
        RegionGrad {
            n,
            diff: vec![0.0; (n + 1) * (n + 1)],
        }
    }

    fn add(&mut self, g: f64, [r0, r1, c0, c1]: [usize; 4]) {
        let w = self.n + 1;
        self.diff[r0 * w + c0] += g;
        self.diff[r0 * w + c1 + 1] -= g;
        self.diff[(r1 + 1) * w + c0] -= g;
        self.diff[(r1 + 1) * w + c1 + 1] += g;
    }

    fn finish(self) -> Array2<f64> {
        let (n, w) = (self.n, self.n + 1);
        let mut d = self.diff;
        for i in 0..w {
            for j in 1..w {
                d[i * w + j] += d[i * w + j - 1];
            }
        }
        for i in 1..w {
            for j in 0..w {
                d[i * w + j] += d[(i - 1) * w + j];
            }
        }
        Array2::from_shape_fn((n, n), |(i, j)| d[i * w + j])
    }
}

/// Candidate `(span, k)` pairs competing with a gold split.
fn candidates(n: usize, gold: Span, spec: &LossSpec) -> Vec<(Span, usize)> {
    match (spec.kind, spec.normalization) {
        (LossKind::Mle, Normalization::Sentence) => {
            let whole = Span::new(0, n - 1);
            (1..n)
                .map(|k| {
                    if gold.start < k && k <= gold.end {
                        (gold, k)
                    } else {
                        (whole, k)
                    }
                })
                .collect()
        }
        _ => (gold.start + 1..=gold.end).map(|k| (gold, k)).collect(),
    }
}

/// Loss of a gold tree under attention `a`, with its gradient w.r.t. `a` when asked.
pub fn tree_loss(
    tree: &ParseTree,
    a: &WordAttention,
    mode: ScoreMode,
    spec: &LossSpec,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let n = a.n();
    if tree.n_leaves() != n {
        return Err(TrainError::LengthMismatch {
            sentence: 0,
            tree: tree.n_leaves(),
            words: n,
        });
    }
    if !tree.is_binary() {
        return Err(TrainError::NonBinary);
    }
    let scorer = Scorer::new(a, mode);
    let mut grad = want_grad.then(|| RegionGrad::new(n));
    let mut terms = Vec::with_capacity(6);
    let mut loss = 0.0;
    for (span, gold_k) in tree.splits() {
        let cands = candidates(n, span, spec);
        let scores: Vec<f64> = cands.iter().map(|&(s, k)| scorer.split(s, k)).collect();
        let gold_idx = cands
            .iter()
            .position(|&(s, k)| s == span && k == gold_k)
            .expect("gold split is a candidate");
        let mut dscore = vec![0.0; cands.len()];
        match spec.kind {
            LossKind::Mle => {
                let lp = split_log_prob(&scores)?;
                loss -= lp[gold_idx];
                for (i, l) in lp.iter().enumerate() {
                    dscore[i] = l.exp() - if i == gold_idx { 1.0 } else { 0.0 };
                }
            }
            LossKind::Margin => {
                for (i, s) in scores.iter().enumerate() {
                    if i == gold_idx {
                        if spec.include_gold {
                            loss += spec.margin;
                        }
                        continue;
                    }
                    let h = spec.margin + s - scores[gold_idx];
                    if h > 0.0 {
                        loss += h;
                        dscore[i] += 1.0;
                        dscore[gold_idx] -= 1.0;
                    }
                }
            }
        }
        if let Some(g) = grad.as_mut() {
            for (&(s, k), &d) in cands.iter().zip(&dscore) {
                if d == 0.0 {
                    continue;
                }
                split_terms(n, s, k, mode, &mut terms);
                for &(c, r) in &terms {
                    g.add(d * c, r);
                }
            }
        }
    }
    Ok((loss, grad.map(RegionGrad::finish)))
}

/// Negative log-likelihood of a binary tree with per-span normalization.
pub fn tree_neg_log_likelihood(tree: &ParseTree, a: &WordAttention, mode: ScoreMode) -> Result<f64> {
    Ok(tree_loss(tree, a, mode, &LossSpec::mle(), false)?.0)
}

pub fn margin_loss(
    tree: &ParseTree,
    a: &WordAttention,
    mode: ScoreMode,
    margin: f64,
    include_gold: bool,
) -> Result<f64> {
    let spec = LossSpec {
        include_gold,
        ..LossSpec::margin(margin)
    };
    Ok(tree_loss(tree, a, mode, &spec, false)?.0)
}

/// One attention source in a learned mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Component {
    /// Attention recomputed from hidden states with the projections.
    Recomputed,
    /// A fixed pretrained head.
    Head { layer: usize, head: usize },
}

/// Projections plus an optional softmax-weighted mixture over components.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub projection: ProjectionPair,
    pub divisor: LogitDivisor,
    /// Empty means attention is the recomputed matrix alone.
    pub components: Vec<Component>,
    pub head_logits: Array1<f64>,
}

impl Model {
    pub fn projection_only(projection: ProjectionPair, divisor: LogitDivisor) -> Self {
        Model {
            projection,
            divisor,
            components: Vec::new(),
            head_logits: Array1::zeros(0),
        }
    }

    /// Mixture over `components` with uniform initial weights.
    pub fn mixture(projection: ProjectionPair, divisor: LogitDivisor, components: Vec<Component>) -> Self {
        let c = components.len();
        Model {
            projection,
            divisor,
            components,
            head_logits: Array1::zeros(c),
        }
    }

    pub fn uses_projection(&self) -> bool {
        self.components.is_empty() || self.components.contains(&Component::Recomputed)
    }

    /// Fixed heads in the order examples must carry them.
    pub fn fixed_heads(&self) -> Vec<(usize, usize)> {
        self.components
            .iter()
            .filter_map(|c| match *c {
                Component::Head { layer, head } => Some((layer, head)),
                Component::Recomputed => None,
            })
            .collect()
    }

    /// Softmax of the logits; `[1.0]` without a mixture.
    pub fn head_weights(&self) -> Vec<f64> {
        if self.components.is_empty() {
            return vec![1.0];
        }
        let max = self.head_logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = self.head_logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Attention used for parsing (no dropout).
    pub fn attention(&self, ex: &TrainExample) -> Result<WordAttention> {
        Ok(WordAttention::unchecked(self.forward(ex, None)?.attention))
    }

    /// Attention for an unannotated sentence; `heads` as in [`TrainExample`].
    pub fn sentence_attention(&self, hidden: Array2<f64>, heads: Vec<Array2<f64>>) -> Result<WordAttention> {
        let ex = TrainExample {
            hidden,
            heads,
            gold: ParseTree::leaf(0),
        };
        self.attention(&ex)
    }

    fn forward(&self, ex: &TrainExample, mask: Option<&Array2<f64>>) -> Result<Forward> {
        let recomputed = if self.uses_projection() {
            let hd = match mask {
                Some(m) => &ex.hidden * m,
                None => ex.hidden.clone(),
            };
            if hd.ncols() != self.projection.d_model() {
                return Err(TrainError::Shape(format!(
                    "hidden width {} but projections expect {}",
                    hd.ncols(),
                    self.projection.d_model()
                )));
            }
            let q = hd.dot(&self.projection.wq);
            let k = hd.dot(&self.projection.wk);
            let a = softmax_rows(q.dot(&k.t()) / self.divisor.value(&self.projection))?;
            Some(Recomputed { hd, q, k, a })
        } else {
            None
        };
        if self.components.is_empty() {
            let attention = recomputed.as_ref().expect("projection model").a.clone();
            return Ok(Forward {
                recomputed,
                weights: vec![1.0],
                attention,
            });
        }
        let weights = self.head_weights();
        let n = ex.hidden.nrows();
        let mut attention = Array2::zeros((n, n));
        let mut fixed = ex.heads.iter();
        for (c, &w) in self.components.iter().zip(&weights) {
            let m = match c {
                Component::Recomputed => &recomputed.as_ref().unwrap().a,
                Component::Head { .. } => fixed
                    .next()
                    .ok_or_else(|| TrainError::Shape("example is missing fixed heads".into()))?,
            };
            attention.scaled_add(w, m);
        }
        Ok(Forward {
            recomputed,
            weights,
            attention,
        })
    }

    fn backward(&self, ex: &TrainExample, fwd: &Forward, d_att: &Array2<f64>) -> Grads {
        let mut grads = Grads::zeros(self);
        let mut recomputed_weight = 1.0;
        if !self.components.is_empty() {
            // d/dlogit_c = w_c (g_c - Σ w g), with g_c = <dA, A_c>
            let mut fixed = ex.heads.iter();
            let g: Vec<f64> = self
                .components
                .iter()
                .map(|c| {
                    let m = match c {
                        Component::Recomputed => &fwd.recomputed.as_ref().unwrap().a,
                        Component::Head { .. } => fixed.next().unwrap(),
                    };
                    (d_att * m).sum()
                })
                .collect();
            let mean: f64 = g.iter().zip(&fwd.weights).map(|(g, w)| g * w).sum();
            for (i, (gi, wi)) in g.iter().zip(&fwd.weights).enumerate() {
                grads.logits[i] = wi * (gi - mean);
            }
            recomputed_weight = self
                .components
                .iter()
                .position(|c| *c == Component::Recomputed)
                .map_or(0.0, |i| fwd.weights[i]);
        }
        if let Some(r) = &fwd.recomputed {
            let da = d_att * recomputed_weight;
            // row softmax backward
            let dot = (&da * &r.a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = &r.a * &(&da - &dot) / self.divisor.value(&self.projection);
            let dq = ds.dot(&r.k);
            let dk = ds.t().dot(&r.q);
            grads.wq = r.hd.t().dot(&dq);
            grads.wk = r.hd.t().dot(&dk);
        }
        grads
    }

    fn n_params(&self) -> usize {
        2 * self.projection.wq.len() + self.head_logits.len()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(self.projection.wq.iter());
        v.extend(self.projection.wk.iter());
        v.extend(self.head_logits.iter());
        v
    }

    fn unflatten(&mut self, v: &[f64]) {
        let p = self.projection.wq.len();
        self.projection.wq.iter_mut().zip(&v[..p]).for_each(|(a, b)| *a = *b);
        self.projection
            .wk
            .iter_mut()
            .zip(&v[p..2 * p])
            .for_each(|(a, b)| *a = *b);
        self.head_logits.iter_mut().zip(&v[2 * p..]).for_each(|(a, b)| *a = *b);
    }
}

struct Recomputed {
    hd: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    a: Array2<f64>,
}

struct Forward {
    recomputed: Option<Recomputed>,
    weights: Vec<f64>,
    attention: Array2<f64>,
}

/// Loss gradients w.r.t. every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub logits: Array1<f64>,
}

impl Grads {
    fn zeros(m: &Model) -> Self {
        Grads {
            wq: Array2::zeros(m.projection.wq.dim()),
            wk: Array2::zeros(m.projection.wk.dim()),
            logits: Array1::zeros(m.head_logits.len()),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.wq
            .iter()
            .chain(self.wk.iter())
            .chain(self.logits.iter())
            .copied()
            .collect()
    }
}

/// One training sentence: word-level hidden states, the fixed heads a mixture
/// needs (word level, in [`Model::fixed_heads`] order) and a binary gold tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub hidden: Array2<f64>,
    pub heads: Vec<Array2<f64>>,
    pub gold: ParseTree,
}

/// Loss and parameter gradients for one sentence. `mask` multiplies the hidden
/// states (dropout).
pub fn loss_and_grad(
    model: &Model,
    ex: &TrainExample,
    mode: ScoreMode,
    spec: &LossSpec,
    mask: Option<&Array2<f64>>,
) -> Result<(f64, Grads)> {
    let fwd = model.forward(ex, mask)?;
    let a = WordAttention::unchecked(fwd.attention.clone());
    let (loss, d_att) = tree_loss(&ex.gold, &a, mode, spec, true)?;
    Ok((loss, model.backward(ex, &fwd, &d_att.expect("gradient requested"))))
}

pub fn loss_only(model: &Model, ex: &TrainExample, mode: ScoreMode, spec: &LossSpec) -> Result<f64> {
    let a = model.attention(ex)?;
    Ok(tree_loss(&ex.gold, &a, mode, spec, false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: ScoreMode,
    /// Defaults to likelihood for inside-outside and hinge for outside association.
    pub loss: Option<LossKind>,
    pub margin: f64,
    pub include_gold_margin: bool,
    pub normalization: Normalization,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub layer: usize,
    /// Leading columns of the initial projections to keep; all when unset.
    pub d_proj: Option<usize>,
    pub logit_divisor: LogitDivisor,
    pub train_projections: bool,
    pub learn_head_weights: bool,
    /// Start from random projections even when pretrained ones exist.
    pub random_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: ScoreMode::InsideOutside,
            loss: None,
            margin: 1.0,
            include_gold_margin: false,
            normalization: Normalization::Span,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 10,
            dropout: 0.3,
            epochs: 20,
            seed: 0,
            layer: 0,
            d_proj: None,
            logit_divisor: LogitDivisor::Dproj,
            train_projections: true,
            learn_head_weights: false,
            random_init: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss.unwrap_or_else(|| LossKind::default_for(self.mode)),
            margin: self.margin,
            include_gold: self.include_gold_margin,
            normalization: self.normalization,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.loss_spec().kind == LossKind::Margin && !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.epsilon > 0.0) {
            return bad("learning rate must be >= 0 and epsilon > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if !self.train_projections && !self.learn_head_weights {
            return bad("nothing to train: enable projections or head weights");
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Updates entries where `trainable` is set.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], trainable: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = Bernoulli::new(1.0 - rate).expect("rate in [0,1)");
    let scale = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if keep.sample(rng) { scale } else { 0.0 })
}

/// Mini-batch Adam on the configured loss. The batch gradient is the mean
/// over its sentences; sentences in a batch are processed in parallel and
/// reduced in order, so results depend only on the seed.
pub fn train(corpus: &[TrainExample], config: &TrainConfig, init: Model) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let spec = config.loss_spec();
    let mut model = init;
    let mut params = model.flatten();
    let proj_len = 2 * model.projection.wq.len();
    let trainable: Vec<bool> = (0..params.len())
        .map(|i| {
            if i < proj_len {
                config.train_projections && model.uses_projection()
            } else {
                config.learn_head_weights
            }
        })
        .collect();
    let mut adam = Adam::new(
        params.len(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    let use_dropout = config.dropout > 0.0 && model.uses_projection();

    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let results: Vec<Result<(f64, Grads)>> = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| {
                    let ex = &corpus[i];
                    let mask = use_dropout
                        .then(|| dropout_mask(ex.hidden.dim(), config.dropout, &mut ChaCha8Rng::seed_from_u64(seed)));
                    let (loss, g) =
                        loss_and_grad(&model, ex, config.mode, &spec, mask.as_ref()).map_err(|e| match e {
                            TrainError::LengthMismatch { tree, words, .. } => TrainError::LengthMismatch {
                                sentence: i,
                                tree,
                                words,
                            },
                            TrainError::Overflow => TrainError::NonFinite {
                                what: "attention",
                                sentence: i,
                                epoch,
                            },
                            e => e,
                        })?;
                    if !loss.is_finite() {
                        return Err(TrainError::NonFinite {
                            what: "loss",
                            sentence: i,
                            epoch,
                        });
                    }
                    let flat = g.flatten();
                    if !flat.iter().all(|v| v.is_finite()) {
                        return Err(TrainError::NonFinite {
                            what: "gradient",
                            sentence: i,
                            epoch,
                        });
                    }
                    Ok((loss, g))
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(g.flatten()) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut params, &grad, &trainable);
            model.unflatten(&params);
        }
        loss_history.push(epoch_loss / corpus.len() as f64);
    }
    Ok(TrainOutcome { model, loss_history })
}

/// Trains only softmax weights over the given fixed heads; returns the weights.
pub fn learn_head_weights(corpus: &[TrainExample], heads: &[(usize, usize)], config: &TrainConfig) -> Result<Vec<f64>> {
    let d = corpus.first().map_or(1, |e| e.hidden.ncols().max(1));
    let components = heads
        .iter()
        .map(|&(layer, head)| Component::Head { layer, head })
        .collect();
    let model = Model::mixture(
        ProjectionPair::new(Array2::zeros((d, 1)), Array2::zeros((d, 1)))?,
        config.logit_divisor,
        components,
    );
    let cfg = TrainConfig {
        train_projections: false,
        learn_head_weights: true,
        ..config.clone()
    };
    Ok(train(corpus, &cfg, model)?.model.head_weights())
}

/// Word-level hidden states of `layer` and word-level attention of each fixed
/// head for sentence `i`.
pub fn sentence_inputs(
    record: &SentenceRecord,
    i: usize,
    layer: usize,
    fixed_heads: &[(usize, usize)],
    merge: MergeOptions,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let h = record
        .hidden
        .get(&layer)
        .ok_or(TrainError::MissingHidden { sentence: i, layer })?;
    let hidden = merge_rows(h.mapv(f64::from).view(), &record.alignment)
        .map_err(|e| TrainError::Shape(format!("sentence {i}: {e}")))?;
    let heads = fixed_heads
        .iter()
        .map(|&(l, h)| Ok(word_attention(record, i, l, h, merge)?.into_matrix()))
        .collect::<Result<Vec<_>>>()?;
    Ok((hidden, heads))
}

/// Word-level training examples from an extracted corpus. Gold trees are
/// binarized; their leaf counts must match the sentences.
pub fn examples_from_corpus(
    corpus: &Corpus,
    gold: &[ParseTree],
    layer: usize,
    fixed_heads: &[(usize, usize)],
    merge: MergeOptions,
) -> Result<Vec<TrainExample>> {
    if corpus.sentences.len() != gold.len() {
        return Err(TrainError::Shape(format!(
            "{} sentences but {} gold trees",
            corpus.sentences.len(),
            gold.len()
        )));
    }
    corpus
        .sentences
        .iter()
        .zip(gold)
        .enumerate()
        .map(|(i, (r, g))| {
            if g.n_leaves() != r.n_words() {
                return Err(TrainError::LengthMismatch {
                    sentence: i,
                    tree: g.n_leaves(),
                    words: r.n_words(),
                });
            }
            let (hidden, heads) = sentence_inputs(r, i, layer, fixed_heads, merge)?;
            Ok(TrainExample {
                hidden,
                heads,
                gold: binarize(g),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    divisor: LogitDivisor,
    components: Vec<Component>,
    layer: usize,
    config: TrainConfig,
    loss_history: Vec<f64>,
}

/// A trained model with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn to_tensor_file(&self) -> TensorFile {
        let m = &self.model;
        let mut f = TensorFile::new();
        f.insert_matrix("wq", &m.projection.wq.mapv(|v| v as f32));
        f.insert_matrix("wk", &m.projection.wk.mapv(|v| v as f32));
        if !m.components.is_empty() {
            let logits: Vec<f32> = m.head_logits.iter().map(|&v| v as f32).collect();
            f.insert("head_logits", &[logits.len()], &logits);
        }
        let meta = CheckpointMeta {
            divisor: m.divisor,
            components: m.components.clone(),
            layer: self.config.layer,
            config: self.config.clone(),
            loss_history: self.loss_history.clone(),
        };
        f.metadata = Some(serde_json::to_value(meta).expect("metadata serializes"));
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(
            f.metadata
                .clone()
                .ok_or_else(|| TrainError::Checkpoint("missing metadata".into()))?,
        )
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let projection = ProjectionPair::new(f.get_matrix("wq")?.mapv(f64::from), f.get_matrix("wk")?.mapv(f64::from))?;
        let head_logits = if meta.components.is_empty() {
            Array1::zeros(0)
        } else {
            let (_, v) = f.get("head_logits")?;
            if v.len() != meta.components.len() {
                return Err(TrainError::Checkpoint(format!(
                    "{} head logits for {} components",
                    v.len(),
                    meta.components.len()
                )));
            }
            v.into_iter().map(f64::from).collect()
        };
        Ok(Checkpoint {
            model: Model {
                projection,
                divisor: meta.divisor,
                components: meta.components,
                head_logits,
            },
            config: meta.config,
            loss_history: meta.loss_history,
        })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    Ok(write_tensor_file(path, &ckpt.to_tensor_file())?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_tensor_file(&read_tensor_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair(wq: Array2<f64>, wk: Array2<f64>) -> ProjectionPair {
        ProjectionPair::new(wq, wk).unwrap()
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let h = array![[1.0], [1.0]];
        let a = recompute_attention(h.view(), &pair(array![[1.0]], array![[1.0]]), LogitDivisor::Dproj).unwrap();
        assert_eq!(a.matrix(), &array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn zero_projection_gives_uniform_attention() {
        let h = array![[1.0, -2.0], [0.5, 3.0], [2.0, 2.0]];
        let z = Array2::zeros((2, 2));
        let a = recompute_attention(h.view(), &pair(z.clone(), z), LogitDivisor::Dproj).unwrap();
        assert!(a.matrix().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let h = Array2::zeros((2, 3));
        let p = pair(Array2::zeros((2, 2)), Array2::zeros((2, 2)));
        assert!(matches!(
            recompute_attention(h.view(), &p, LogitDivisor::Dproj),
            Err(TrainError::Shape(_))
        ));
        assert!(ProjectionPair::new(Array2::zeros((2, 2)), Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn split_probabilities() {
        let lp = split_log_prob(&[0.3, 0.3]).unwrap();
        assert!((lp[0].exp() - 0.5).abs() < 1e-15);
        assert_eq!(split_log_prob(&[4.0]).unwrap(), [0.0]);
        let lp = split_log_prob(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((lp[0].exp() - e / (e + 1.0)).abs() < 1e-15);
        assert!((lp[1].exp() - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!(matches!(split_log_prob(&[]), Err(TrainError::NoCandidates)));
    }

    #[test]
    fn two_word_loss_is_zero() {
        let t = ParseTree::from_splits(2, |_, _| 1);
        let a = WordAttention::new(array![[0.9, 0.1], [0.3, 0.7]], 1e-12).unwrap();
        for mode in [ScoreMode::OutsideAssociation, ScoreMode::InsideOutside] {
            assert_eq!(tree_neg_log_likelihood(&t, &a, mode).unwrap(), 0.0);
        }
    }

    #[test]
    fn uniform_attention_nll_counts_candidates() {
        let t = ParseTree::from_splits(6, |x, y| (x + y).div_ceil(2));
        let a = WordAttention::uniform(6);
        let expected: f64 = t.splits().iter().map(|(s, _)| ((s.len() - 1) as f64).ln()).sum();
        let got = tree_neg_log_likelihood(&t, &a, ScoreMode::InsideOutside).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn margin_cases() {
        // uniform attention: every split ties, so each non-gold split costs the margin
        let t = ParseTree::from_splits(3, |x, _| x + 1);
        let a = WordAttention::uniform(3);
        let m = margin_loss(&t, &a, ScoreMode::InsideOutside, 1.0, false).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        let with_gold = margin_loss(&t, &a, ScoreMode::InsideOutside, 1.0, true).unwrap();
        assert!((with_gold - 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_binary_gold_is_rejected() {
        let t = crate::tree::parse_tree("(S a b c)", 1).unwrap();
        let a = WordAttention::uniform(3);
        assert!(matches!(
            tree_neg_log_likelihood(&t, &a, ScoreMode::InsideOutside),
            Err(TrainError::NonBinary)
        ));
    }

    #[test]
    fn truncation_keeps_leading_columns() {
        let w = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        let p = pair(w.clone(), w).truncate(2).unwrap();
        assert_eq!(p.d_proj(), 2);
        assert_eq!(p.wq.row(1).to_vec(), [4.0, 5.0]);
        let r = ProjectionPair::random(16, 8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(r.wq.dim(), (16, 8));
        assert!(r.wq.iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn region_grad_matches_dense() {
        let mut g = RegionGrad::new(4);
        g.add(2.0, [0, 1, 1, 3]);
        g.add(-1.0, [1, 3, 0, 0]);
        let d = g.finish();
        for i in 0..4 {
            for j in 0..4 {
                let mut e = 0.0;
                if i <= 1 && (1..=3).contains(&j) {
                    e += 2.0;
                }
                if (1..=3).contains(&i) && j == 0 {
                    e -= 1.0;
                }
                assert_eq!(d[[i, j]], e);
            }
        }
    }

    #[test]
    fn split_terms_reproduce_scorer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let raw = Array2::from_shape_simple_fn((n, n), || rng.random::<f64>());
        let a = WordAttention::unchecked(&raw / &raw.sum_axis(Axis(1)).insert_axis(Axis(1)));
        let sums = crate::scoring::RegionSums::new(&a);
        let mut terms = Vec::new();
        for mode in [ScoreMode::OutsideAssociation, ScoreMode::InsideOutside] {
            let s = Scorer::new(&a, mode);
            for x in 0..n {
                for y in x + 1..n {
                    for k in x + 1..=y {
                        split_terms(n, Span::new(x, y), k, mode, &mut terms);
                        let v: f64 = terms
                            .iter()
                            .map(|&(c, [a, b, cc, d])| c * sums.region(a, b, cc, d))
                            .sum();
                        assert!((v - s.split_score(Span::new(x, y), k).unwrap()).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn fd_check(model: &Model, ex: &TrainExample, mode: ScoreMode, spec: &LossSpec) -> f64 {
        let (_, g) = loss_and_grad(model, ex, mode, spec, None).unwrap();
        let analytic = g.flatten();
        let base = model.flatten();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut m = model.clone();
            let mut v = base.clone();
            v[i] += 1e-4;
            m.unflatten(&v);
            let up = loss_only(&m, ex, mode, spec).unwrap();
            v[i] -= 2e-4;
            m.unflatten(&v);
            let down = loss_only(&m, ex, mode, spec).unwrap();
            let fd = (up - down) / 2e-4;
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let d = 4;
        let hidden = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        let gold = ParseTree::from_splits(n, |x, y| rng.random_range(x + 1..=y));
        let fixed = WordAttention::uniform(n).into_matrix();
        let ex = TrainExample {
            hidden,
            heads: vec![fixed],
            gold,
        };
        let proj = ProjectionPair::random(d, 3, &mut rng);
        let plain = Model::projection_only(proj.clone(), LogitDivisor::Dproj);
        let mut mix = Model::mixture(
            proj,
            LogitDivisor::Dmodel,
            vec![Component::Recomputed, Component::Head { layer: 0, head: 1 }],
        );
        mix.head_logits[1] = 0.4;
        for mode in [ScoreMode::OutsideAssociation, ScoreMode::InsideOutside] {
            for spec in [
                LossSpec::mle(),
                LossSpec::margin(0.05),
                LossSpec {
                    normalization: Normalization::Sentence,
                    ..LossSpec::mle()
                },
            ] {
                for m in [&plain, &mix] {
                    let e = fd_check(m, &ex, mode, &spec);
                    assert!(e < 1e-3, "{mode} {spec:?}: relative error {e}");
                }
            }
        }
    }
}
