//! Constituency trees from self-attention.
//!
//! Word-level attention is scored span by span ([`scoring`]), decoded into a
//! binary tree ([`parser`]) and compared against gold trees ([`eval`]). The
//! [`trainer`] learns query/key projections from a handful of gold trees, and
//! [`synth`] fabricates corpora whose trees are known.

pub mod alignment;
pub mod eval;
pub mod heads;
pub mod parser;
pub mod scoring;
pub mod synth;
pub mod tensor_io;
pub mod trainer;
pub mod tree;

pub use alignment::{merge_pieces, MergeOptions, WordAttention};
pub use eval::{unlabeled_f1, BracketOptions, EvalReport};
pub use heads::{combine, rank_heads, HeadSelector};
pub use parser::{chart_parse, greedy_parse, parse, Algorithm};
pub use scoring::{ScoreMode, Scorer, SplitScorer};
pub use synth::{gen_synthetic, SyntheticSpec};
pub use tensor_io::{read_corpus, write_corpus, Corpus, SentenceRecord};
pub use trainer::{train, Model, ProjectionPair, TrainConfig};
pub use tree::{ParseTree, Span};
