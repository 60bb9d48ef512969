//! Synthetic corpora with known trees.
//!
//! Each sentence gets a random binary tree. Its attention head is a row
//! softmax of the negated leaf-to-leaf distance matrix (height of the lowest
//! common ancestor), and its hidden states are built so that a known
//! projection recomputes that same attention. Nuisance dimensions and a random
//! rotation hide the useful subspace from the raw dot product.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor_io::{Corpus, SentenceRecord};
use crate::trainer::ProjectionPair;
use crate::tree::ParseTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Attention noise, uniform in `[0, noise)` before row renormalization.
    pub noise: f64,
    /// Standard deviation of Gaussian noise on the tree features of the
    /// hidden states.
    pub hidden_noise: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Probability that a span splits off its first word, on top of the
    /// uniform split choice. Positive values favor right-branching trees.
    pub right_bias: f64,
    /// Uniform heads added after the informative head `(0, 0)`.
    pub distractor_heads: usize,
    pub nuisance_dims: usize,
    pub nuisance_scale: f64,
    /// Probability that a word is cut into two pieces.
    pub piece_split_prob: f64,
    /// Wrap every sentence in `[CLS]` / `[SEP]` pieces.
    pub delimiters: bool,
    /// Attention mass each real piece sends to the delimiters.
    pub delimiter_mass: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_sentences: 50,
            min_len: 2,
            max_len: 10,
            noise: 0.0,
            hidden_noise: 0.0,
            temperature: 1.0,
            seed: 0,
            right_bias: 0.0,
            distractor_heads: 1,
            nuisance_dims: 8,
            nuisance_scale: 1.0,
            piece_split_prob: 0.0,
            delimiters: false,
            delimiter_mass: 0.1,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid synthetic spec: {0}")]
pub struct SpecError(String);

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError(m.into()));
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("lengths must satisfy 2 <= min_len <= max_len");
        }
        for (name, v) in [
            ("noise", self.noise),
            ("hidden_noise", self.hidden_noise),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SpecError(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        for (name, p) in [
            ("right_bias", self.right_bias),
            ("piece_split_prob", self.piece_split_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SpecError(format!("{name} must be in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.delimiter_mass) {
            return bad("delimiter_mass must be in [0, 1)");
        }
        Ok(())
    }

    /// Width of the tree-structured block of the hidden states.
    pub fn structural_dims(&self) -> usize {
        2 * self.max_len - 2
    }

    pub fn d_model(&self) -> usize {
        self.structural_dims() + self.nuisance_dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub gold: Vec<ParseTree>,
    /// Projection under which the clean hidden states recompute the
    /// noise-free attention exactly.
    pub oracle: ProjectionPair,
}

/// Random binary tree by recursive splitting.
pub fn random_binary_tree(n: usize, right_bias: f64, rng: &mut impl Rng) -> ParseTree {
    ParseTree::from_splits(n, |x, y| {
        if rng.random_bool(right_bias) {
            x + 1
        } else {
            rng.random_range(x + 1..=y)
        }
    })
}

/// Node heights (leaves 0) in the pre-order of [`ParseTree::nodes`].
fn heights(tree: &ParseTree) -> Vec<usize> {
    let nodes = tree.nodes();
    let mut h = vec![0usize; nodes.len()];
    // children follow their parent in pre-order, so walk backwards
    let index: BTreeMap<*const ParseTree, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, (_, n))| (*n as *const ParseTree, i))
        .collect();
    for i in (0..nodes.len()).rev() {
        let kids = nodes[i].1.children();
        if !kids.is_empty() {
            h[i] = 1 + kids
                .iter()
                .map(|c| index.get(&(c as *const ParseTree)).map_or(0, |&k| h[k]))
                .max()
                .unwrap();
        }
    }
    h
}

/// Leaf-to-leaf syntactic distance: the height of the lowest common ancestor,
/// counting leaves as height 0. A leaf's distance to itself is its parent's
/// height minus one, the smallest value in its row.
pub fn distance_matrix(tree: &ParseTree) -> Array2<f64> {
    let n = tree.n_leaves();
    let mut d = Array2::zeros((n, n));
    let nodes = tree.nodes();
    let h = heights(tree);
    for ((_, node), &height) in nodes.iter().zip(&h) {
        let kids = node.children();
        for (a, ca) in kids.iter().enumerate() {
            let sa = ca.span();
            for cb in &kids[a + 1..] {
                let sb = cb.span();
                for i in sa.start..=sa.end {
                    for j in sb.start..=sb.end {
                        d[[i, j]] = height as f64;
                        d[[j, i]] = height as f64;
                    }
                }
            }
            if ca.is_leaf() {
                d[[sa.start, sa.start]] = height as f64 - 1.0;
            }
        }
    }
    d
}

/// Row softmax of `-D / temperature`.
pub fn distance_attention(d: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut a = d.mapv(|v| -v / temperature);
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    a
}

/// One row per leaf, one column per tree edge: entry is `√length` when the
/// edge lies on the leaf's root path. Internal edges have length equal to the
/// height drop, leaf edges length 1, so `F Fᵀ = height(root) - D`.
pub fn tree_features(tree: &ParseTree, width: usize) -> Array2<f64> {
    let n = tree.n_leaves();
    let nodes = tree.nodes();
    let h = heights(tree);
    let mut f = Array2::zeros((n, width));
    let mut col = 0;
    for ((_, node), &height) in nodes.iter().zip(&h) {
        for c in node.children() {
            let len = if c.is_leaf() {
                1.0
            } else {
                let ci = nodes.iter().position(|(_, m)| std::ptr::eq(*m, c)).unwrap();
                (height - h[ci]) as f64
            };
            let sp = c.span();
            for i in sp.start..=sp.end {
                f[[i, col]] = len.sqrt();
            }
            col += 1;
        }
    }
    assert!(col <= width, "tree needs {col} feature columns, have {width}");
    f
}

fn random_rotation(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // sign fix makes the distribution uniform over rotations
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)] * r[(j, j)].signum())
}

fn add_uniform_noise(a: &mut Array2<f64>, tau: f64, rng: &mut impl Rng) {
    if tau <= 0.0 {
        return;
    }
    a.mapv_inplace(|v| v + rng.random_range(0.0..tau));
    for mut row in a.rows_mut() {
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Expands word attention to pieces so that merging recovers it: a piece row
/// copies its word's row, each word's column mass is shared among its pieces,
/// and delimiters receive `delimiter_mass`.
fn to_pieces(a: &Array2<f64>, alignment: &[i64], shares: &[f64], delimiter_mass: f64) -> Array2<f64> {
    let p = alignment.len();
    let n_delim = alignment.iter().filter(|&&w| w < 0).count();
    let real = if n_delim > 0 { 1.0 - delimiter_mass } else { 1.0 };
    let mut out = Array2::zeros((p, p));
    for (r, &wr) in alignment.iter().enumerate() {
        for (c, &wc) in alignment.iter().enumerate() {
            out[[r, c]] = match (wr >= 0, wc >= 0) {
                (true, true) => real * a[[wr as usize, wc as usize]] * shares[c],
                (true, false) => delimiter_mass / n_delim as f64,
                (false, _) => 1.0 / p as f64,
            };
        }
    }
    out
}

fn f32m(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}

/// Draws sentences one at a time from a spec. All sentences share one
/// rotation, so a single projection serves the whole corpus.
pub struct Generator {
    spec: SyntheticSpec,
    rng: ChaCha8Rng,
    rotation: Array2<f64>,
    ks: usize,
    d: usize,
    scale: f64,
}

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self, SpecError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let ks = spec.structural_dims();
        let d = spec.d_model();
        let rotation = random_rotation(d, &mut rng);
        // scale so that (H Wq)(H Wk)ᵀ / √ks = F Fᵀ / temperature under the oracle
        let scale = ((ks as f64).sqrt() / spec.temperature).sqrt();
        Ok(Generator {
            spec: spec.clone(),
            rng,
            rotation,
            ks,
            d,
            scale,
        })
    }

    /// Projection under which clean hidden states recompute the noise-free attention.
    pub fn oracle(&self) -> ProjectionPair {
        let w = self.rotation.t().slice(s![.., ..self.ks]).to_owned();
        ProjectionPair { wq: w.clone(), wk: w }
    }

    pub fn sentence(&mut self) -> (ParseTree, SentenceRecord) {
        let n = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
        let words: Vec<String> = (0..n).map(|_| format!("w{}", self.rng.random_range(0..1000))).collect();
        let tree = random_binary_tree(n, self.spec.right_bias, &mut self.rng).with_words(&words);

        let mut attn = distance_attention(&distance_matrix(&tree), self.spec.temperature);
        add_uniform_noise(&mut attn, self.spec.noise, &mut self.rng);

        let mut z = Array2::<f64>::zeros((n, self.d));
        let f = tree_features(&tree, self.ks);
        z.slice_mut(s![.., ..self.ks]).assign(&f.mapv(|v| v * self.scale));
        for v in z.slice_mut(s![.., ..self.ks]).iter_mut() {
            *v += self.scale * self.spec.hidden_noise * self.rng.sample::<f64, _>(StandardNormal);
        }
        for v in z.slice_mut(s![.., self.ks..]).iter_mut() {
            *v = self.scale * self.spec.nuisance_scale * self.rng.sample::<f64, _>(StandardNormal);
        }
        let hidden_words = z.dot(&self.rotation);

        let mut pieces = Vec::new();
        let mut alignment = Vec::new();
        let mut shares = Vec::new();
        if self.spec.delimiters {
            pieces.push("[CLS]".to_string());
            alignment.push(-1);
            shares.push(0.0);
        }
        for (i, w) in words.iter().enumerate() {
            if self.rng.random_bool(self.spec.piece_split_prob) {
                let first: f64 = self.rng.random_range(0.2..0.8);
                pieces.push(w.clone());
                pieces.push("##x".into());
                alignment.extend([i as i64, i as i64]);
                shares.extend([first, 1.0 - first]);
            } else {
                pieces.push(w.clone());
                alignment.push(i as i64);
                shares.push(1.0);
            }
        }
        if self.spec.delimiters {
            pieces.push("[SEP]".to_string());
            alignment.push(-1);
            shares.push(0.0);
        }

        let p = pieces.len();
        // piece states: word state plus offsets that cancel within the word
        let mut hidden = Array2::<f64>::zeros((p, self.d));
        let mut r = 0;
        while r < p {
            let w = alignment[r];
            if w < 0 {
                for v in hidden.row_mut(r).iter_mut() {
                    *v = self.rng.sample::<f64, _>(StandardNormal);
                }
                r += 1;
                continue;
            }
            let mut end = r;
            while end + 1 < p && alignment[end + 1] == w {
                end += 1;
            }
            for q in r..=end {
                hidden.row_mut(q).assign(&hidden_words.row(w as usize));
            }
            if end > r {
                for j in 0..self.d {
                    let e = 0.1 * self.rng.sample::<f64, _>(StandardNormal);
                    hidden[[r, j]] += e;
                    hidden[[end, j]] -= e;
                }
            }
            r = end + 1;
        }

        let mut attention = BTreeMap::new();
        attention.insert(
            (0, 0),
            f32m(&to_pieces(&attn, &alignment, &shares, self.spec.delimiter_mass)),
        );
        for h in 1..=self.spec.distractor_heads {
            let u = Array2::from_elem((n, n), 1.0 / n as f64);
            attention.insert(
                (0, h),
                f32m(&to_pieces(&u, &alignment, &shares, self.spec.delimiter_mass)),
            );
        }
        let mut hid = BTreeMap::new();
        hid.insert(0, f32m(&hidden));
        let mut hid = BTreeMap::new();
        hid.insert(0, f32m(&hidden));
        let record = SentenceRecord {
            words,
            pieces,
            alignment,
            hidden: hid,
            attention,
        };
        (tree, record)
    }

    /// Wraps sentences into a corpus with identity "pretrained" projections
    /// and the oracle stored under `oracle/l0/wq|wk`.
    pub fn finish(&self, sentences: Vec<SentenceRecord>, gold: Vec<ParseTree>) -> SyntheticCorpus {
        let oracle = self.oracle();
        let mut projections = BTreeMap::new();
        let eye = Array2::<f32>::eye(self.d);
        projections.insert(0, (eye.clone(), eye));
        let mut extra = BTreeMap::new();
        extra.insert("oracle/l0/wq".to_string(), f32m(&oracle.wq));
        extra.insert("oracle/l0/wk".to_string(), f32m(&oracle.wk));
        let corpus = Corpus {
            sentences,
            projections,
            extra,
            metadata: Some(serde_json::json!({ "synthetic": self.spec })),
        };
        SyntheticCorpus { corpus, gold, oracle }
    }
}

/// Builds a synthetic corpus; identical specs give identical corpora.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SpecError> {
    let mut g = Generator::new(spec)?;
    let (gold, sentences) = (0..spec.n_sentences).map(|_| g.sentence()).unzip();
    Ok(g.finish(sentences, gold))
}
