//! `attnparse`: parse, train, evaluate and inspect from the command line.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when a command fails.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnparse::eval::{
    baseline_tree, label_recall, punct_positions, strip_positions, strip_punct, BaselineKind, PTB_PUNCT_TAGS,
};
use attnparse::heads::{combine, word_attention};
use attnparse::tensor_io::{read_corpus, write_corpus, Corpus};
use attnparse::trainer::{
    examples_from_corpus, initial_model, read_checkpoint, sentence_inputs, write_checkpoint, Checkpoint, LogitDivisor,
    LossKind, Model,
};
use attnparse::tree::{read_trees, ParseTree};
use attnparse::{
    gen_synthetic, parse, rank_heads, train, unlabeled_f1, Algorithm, BracketOptions, HeadSelector, MergeOptions,
    ScoreMode, Scorer, SyntheticSpec, TrainConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "attnparse",
    version,
    about = "Constituency trees from transformer self-attention"
)]
struct Cli {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse every sentence of a tensor container.
    Parse(ParseArgs),
    /// Train query/key projections on gold trees.
    Train(TrainArgs),
    /// Unlabeled bracket F1 of predicted against gold trees.
    Eval(EvalArgs),
    /// Rank single heads by parsing F1 and write the best as a selector.
    Heads(HeadsArgs),
    /// Write a synthetic corpus with known trees.
    Synth(SynthArgs),
    /// Write one attention matrix as a PGM image.
    Heatmap(HeatmapArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct MergeArgs {
    /// Rescale rows to sum to one after dropping delimiter columns.
    #[arg(long, value_enum, default_value = "on")]
    renormalize: Switch,
}

impl MergeArgs {
    fn options(&self) -> MergeOptions {
        MergeOptions {
            renormalize: matches!(self.renormalize, Switch::On),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Left,
    Right,
    Random,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    tensors: PathBuf,
    #[arg(long, default_value = "upoa")]
    mode: ScoreMode,
    /// Defaults to greedy for upoa and chart for upio.
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    /// Head selector JSON; defaults to `--layer`/`--head`.
    #[arg(long, conflicts_with_all = ["checkpoint", "baseline"])]
    heads: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    /// Parse with attention recomputed by a trained checkpoint.
    #[arg(long, conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Ignore attention and emit a fixed-shape tree.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[command(flatten)]
    merge: MergeArgs,
    /// Output file, one tree per line; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Greedy,
    Chart,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Greedy => Algorithm::Greedy,
            AlgoArg::Chart => Algorithm::Chart,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    tensors: PathBuf,
    /// Gold trees, one bracketed tree per line, aligned with the sentences.
    #[arg(long)]
    trees: PathBuf,
    /// Training config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ScoreMode>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    d_proj: Option<usize>,
    #[arg(long)]
    logit_divisor: Option<LogitDivisor>,
    #[arg(long)]
    random_init: bool,
    /// Learn softmax weights over the heads in this selector (plus the
    /// recomputed attention unless `--freeze-projections`).
    #[arg(long)]
    heads: Option<PathBuf>,
    #[arg(long, requires = "heads")]
    freeze_projections: bool,
    #[command(flatten)]
    merge: MergeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Headline the mean of per-sentence F1 instead of pooled counts.
    #[arg(long)]
    sentence_level: bool,
    /// Add recall per gold label.
    #[arg(long)]
    per_label: bool,
    #[arg(long)]
    keep_root: bool,
    #[arg(long)]
    keep_units: bool,
    /// Drop leaves the gold tree tags as punctuation, from both sides.
    #[arg(long)]
    strip_punct: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct HeadsArgs {
    #[arg(long)]
    tensors: PathBuf,
    #[arg(long)]
    trees: PathBuf,
    #[arg(long, default_value = "upoa")]
    mode: ScoreMode,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    #[arg(long, default_value_t = 1)]
    top: usize,
    #[arg(long)]
    keep_root: bool,
    #[arg(long)]
    keep_units: bool,
    #[command(flatten)]
    merge: MergeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings as JSON; unset fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    tensors: PathBuf,
    #[arg(long)]
    sentence: usize,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    head: usize,
    /// Draw the piece-level matrix instead of merging to words.
    #[arg(long)]
    pieces: bool,
    #[command(flatten)]
    merge: MergeArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Bad combination of otherwise valid arguments.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Parse(a) => cmd_parse(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Heads(a) => cmd_heads(a),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Heatmap(a) => cmd_heatmap(a),
    }
}

/// Writes to stdout; a reader that went away early is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let c = read_corpus(path).with_context(|| format!("reading {}", path.display()))?;
    if c.sentences.is_empty() {
        bail!("{} holds no sentences", path.display());
    }
    Ok(c)
}

fn load_trees(path: &Path) -> Result<Vec<ParseTree>> {
    Ok(read_trees(path)?)
}

fn write_lines(out: Option<&Path>, trees: &[ParseTree]) -> Result<()> {
    let text: String = trees.iter().map(|t| t.to_unlabeled_bracketed() + "\n").collect();
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => emit(&text),
    }
}

fn cmd_parse(a: ParseArgs, seed: Option<u64>) -> Result<()> {
    let corpus = load_corpus(&a.tensors)?;
    let algorithm = a.algo.map_or(Algorithm::default_for(a.mode), Algorithm::from);
    let merge = a.merge.options();
    let selector = match &a.heads {
        Some(p) => HeadSelector::read(p)?,
        None => HeadSelector::single(a.layer, a.head),
    };
    let model = match &a.checkpoint {
        Some(p) => Some(read_checkpoint(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let trees = corpus
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.n_words();
            let tree = if let Some(b) = a.baseline {
                let kind = match b {
                    Baseline::Left => BaselineKind::Left,
                    Baseline::Right => BaselineKind::Right,
                    Baseline::Random => BaselineKind::Random(seed.unwrap_or(0).wrapping_add(i as u64)),
                };
                baseline_tree(n, kind)
            } else {
                let att = match &model {
                    Some(ck) => {
                        let m: &Model = &ck.model;
                        let (h, heads) = sentence_inputs(r, i, ck.config.layer, &m.fixed_heads(), merge)?;
                        m.sentence_attention(h, heads)?
                    }
                    None => combine(&selector, r, i, merge)?,
                };
                parse(&Scorer::new(&att, a.mode), algorithm).with_context(|| format!("sentence {i}"))?
            };
            Ok(tree.with_words(&r.words))
        })
        .collect::<Result<Vec<_>>>()?;
    write_lines(a.out.as_deref(), &trees)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { config.$field = v; } )* };
    }
    set!(
        mode,
        margin,
        epochs,
        learning_rate,
        batch_size,
        dropout,
        layer,
        logit_divisor
    );
    if a.loss.is_some() {
        config.loss = a.loss;
    }
    if a.d_proj.is_some() {
        config.d_proj = a.d_proj;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.random_init |= a.random_init;
    let heads: Vec<(usize, usize)> = match &a.heads {
        Some(p) => {
            config.learn_head_weights = true;
            HeadSelector::read(p)?
                .entries()
                .iter()
                .map(|e| (e.layer, e.head))
                .collect()
        }
        None => Vec::new(),
    };
    if a.freeze_projections {
        config.train_projections = false;
    }
    config.validate().map_err(|e| UsageError(e.to_string()))?;

    let corpus = load_corpus(&a.tensors)?;
    let gold = load_trees(&a.trees)?;
    let init = initial_model(&corpus, &config, &heads)?;
    let examples = examples_from_corpus(&corpus, &gold, config.layer, &init.fixed_heads(), a.merge.options())?;
    let outcome = train(&examples, &config, init)?;
    if let (Some(first), Some(last)) = (outcome.loss_history.first(), outcome.loss_history.last()) {
        eprintln!(
            "trained {} epochs on {} trees: loss {first:.4} -> {last:.4}",
            config.epochs,
            examples.len()
        );
    }
    let ckpt = Checkpoint {
        model: outcome.model,
        config,
        loss_history: outcome.loss_history,
    };
    write_checkpoint(&a.out, &ckpt).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut pred = load_trees(&a.pred)?;
    let mut gold = load_trees(&a.gold)?;
    if a.strip_punct {
        if pred.len() != gold.len() {
            bail!("{} predicted trees but {} gold trees", pred.len(), gold.len());
        }
        for (i, (p, g)) in pred.iter_mut().zip(gold.iter_mut()).enumerate() {
            let drop = punct_positions(g, PTB_PUNCT_TAGS);
            *p = strip_positions(p, &drop).with_context(|| format!("tree {}", i + 1))?;
            *g = strip_punct(g, PTB_PUNCT_TAGS).with_context(|| format!("tree {}", i + 1))?;
        }
    }
    let opts = BracketOptions {
        keep_root: a.keep_root,
        keep_units: a.keep_units,
    };
    let mut report = unlabeled_f1(&pred, &gold, opts)?;
    if a.per_label {
        report.per_label_recall = label_recall(&pred, &gold, opts)?;
    }
    let headline = if a.sentence_level {
        report.sentence_f1_mean
    } else {
        report.corpus_f1
    };
    emit(&format!("F1 {headline:.2}\n{}", report.to_table()))?;
    if let Some(p) = &a.json {
        let text = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_heads(a: HeadsArgs) -> Result<()> {
    if a.top == 0 {
        return Err(UsageError("--top must be at least 1".into()).into());
    }
    let corpus = load_corpus(&a.tensors)?;
    let gold = load_trees(&a.trees)?;
    let algorithm = a.algo.map_or(Algorithm::default_for(a.mode), Algorithm::from);
    let opts = BracketOptions {
        keep_root: a.keep_root,
        keep_units: a.keep_units,
    };
    let ranking = rank_heads(&corpus.sentences, &gold, a.mode, algorithm, a.merge.options(), opts)?;
    let mut table = String::new();
    for r in &ranking {
        let _ = writeln!(table, "l{:<3} h{:<3} {:>7.2}", r.layer, r.head, r.f1);
    }
    emit(&table)?;
    HeadSelector::top_k(&ranking, a.top)?.write(&a.out)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let synth = gen_synthetic(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_corpus(a.out.join("synthetic.atn"), &synth.corpus)?;
    write_lines(Some(&a.out.join("gold.txt")), &synth.gold)?;
    fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    Ok(())
}

/// Binary PGM, brightest cell = largest value.
fn pgm(m: &ndarray::Array2<f64>) -> Vec<u8> {
    let (h, w) = m.dim();
    let max = m.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.iter().map(|&v| {
        if max > 0.0 {
            (255.0 * v / max).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<()> {
    let corpus = load_corpus(&a.tensors)?;
    let r = corpus.sentences.get(a.sentence).ok_or_else(|| {
        UsageError(format!(
            "sentence {} out of range ({} sentences)",
            a.sentence,
            corpus.sentences.len()
        ))
    })?;
    let m = if a.pieces {
        r.attention
            .get(&(a.layer, a.head))
            .with_context(|| format!("no attention for layer {} head {}", a.layer, a.head))?
            .mapv(f64::from)
    } else {
        word_attention(r, a.sentence, a.layer, a.head, a.merge.options())?.into_matrix()
    };
    fs::write(&a.out, pgm(&m)).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
