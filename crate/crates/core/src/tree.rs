//! Constituency trees over word indices, and the PTB bracketed format.

use std::fmt;
use std::fs;
use std::path::Path;

/// An inclusive word span `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_unit(&self) -> bool {
        self.start == self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leaf {
    pub index: usize,
    pub word: Option<String>,
    /// Part-of-speech tag when read from a preterminal `(TAG word)`.
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseTree {
    Leaf(Leaf),
    Node {
        label: Option<String>,
        children: Vec<ParseTree>,
    },
}

impl ParseTree {
    pub fn leaf(index: usize) -> Self {
        ParseTree::Leaf(Leaf {
            index,
            word: None,
            tag: None,
        })
    }

    pub fn binary(left: ParseTree, right: ParseTree) -> Self {
        ParseTree::Node {
            label: None,
            children: vec![left, right],
        }
    }

    pub fn labeled(label: impl Into<String>, children: Vec<ParseTree>) -> Self {
        ParseTree::Node {
            label: Some(label.into()),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, ParseTree::Leaf(_))
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            ParseTree::Node { label, .. } => label.as_deref(),
            ParseTree::Leaf(_) => None,
        }
    }

    pub fn children(&self) -> &[ParseTree] {
        match self {
            ParseTree::Node { children, .. } => children,
            ParseTree::Leaf(_) => &[],
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&Leaf> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            match t {
                ParseTree::Leaf(l) => out.push(l),
                ParseTree::Node { children, .. } => stack.extend(children.iter().rev()),
            }
        }
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    pub fn span(&self) -> Span {
        let leaves = self.leaves();
        Span::new(leaves[0].index, leaves[leaves.len() - 1].index)
    }

    /// Every internal node with its span, in pre-order.
    pub fn nodes(&self) -> Vec<(Span, &ParseTree)> {
        let mut out = Vec::new();
        self.walk_nodes(&mut out);
        out
    }

    fn walk_nodes<'a>(&'a self, out: &mut Vec<(Span, &'a ParseTree)>) -> Option<Span> {
        match self {
            ParseTree::Leaf(l) => Some(Span::new(l.index, l.index)),
            ParseTree::Node { children, .. } => {
                let slot = out.len();
                out.push((Span::new(0, 0), self));
                let mut span: Option<Span> = None;
                for c in children {
                    if let Some(s) = c.walk_nodes(out) {
                        span = Some(match span {
                            None => s,
                            Some(acc) => Span::new(acc.start.min(s.start), acc.end.max(s.end)),
                        });
                    }
                }
                match span {
                    Some(s) => out[slot].0 = s,
                    None => {
                        out.remove(slot);
                    }
                }
                span
            }
        }
    }

    /// True when every internal node has exactly two children.
    pub fn is_binary(&self) -> bool {
        self.nodes().iter().all(|(_, n)| n.children().len() == 2)
    }

    /// Leaves are exactly `0..n` in order and every node is nonempty.
    pub fn has_contiguous_leaves(&self) -> bool {
        self.leaves().iter().enumerate().all(|(i, l)| l.index == i)
            && self.nodes().iter().all(|(_, n)| !n.children().is_empty())
    }

    /// For a binary tree: each internal node's span with its split point,
    /// where the split is the first word of the right child.
    pub fn splits(&self) -> Vec<(Span, usize)> {
        self.nodes()
            .into_iter()
            .filter(|(_, n)| n.children().len() == 2)
            .map(|(span, n)| (span, n.children()[1].span().start))
            .collect()
    }

    /// Builds a binary tree over `0..n` from a split oracle, without recursion.
    /// `split(x, y)` must return `k` with `x < k <= y`.
    pub fn from_splits(n: usize, mut split: impl FnMut(usize, usize) -> usize) -> ParseTree {
        assert!(n >= 1);
        enum Step {
            Visit(usize, usize),
            Join,
        }
        let mut work = vec![Step::Visit(0, n - 1)];
        let mut built: Vec<ParseTree> = Vec::with_capacity(n);
        while let Some(step) = work.pop() {
            match step {
                Step::Visit(x, y) if x == y => built.push(ParseTree::leaf(x)),
                Step::Visit(x, y) => {
                    let k = split(x, y);
                    assert!(x < k && k <= y, "split {k} outside ({x},{y}]");
                    work.push(Step::Join);
                    work.push(Step::Visit(k, y));
                    work.push(Step::Visit(x, k - 1));
                }
                Step::Join => {
                    let right = built.pop().unwrap();
                    let left = built.pop().unwrap();
                    built.push(ParseTree::binary(left, right));
                }
            }
        }
        built.pop().unwrap()
    }

    /// Copies `words` onto the leaves by index.
    pub fn with_words(mut self, words: &[String]) -> ParseTree {
        self.for_each_leaf_mut(&mut |l| {
            if let Some(w) = words.get(l.index) {
                l.word = Some(w.clone());
            }
        });
        self
    }

    pub(crate) fn for_each_leaf_mut(&mut self, f: &mut impl FnMut(&mut Leaf)) {
        match self {
            ParseTree::Leaf(l) => f(l),
            ParseTree::Node { children, .. } => children.iter_mut().for_each(|c| c.for_each_leaf_mut(f)),
        }
    }

    /// Same bracketing, ignoring labels, words and tags.
    pub fn same_shape(&self, other: &ParseTree) -> bool {
        match (self, other) {
            (ParseTree::Leaf(a), ParseTree::Leaf(b)) => a.index == b.index,
            (ParseTree::Node { children: a, .. }, ParseTree::Node { children: b, .. }) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_shape(y))
            }
            _ => false,
        }
    }

    pub fn to_bracketed(&self) -> String {
        let mut s = String::new();
        self.write_into(&mut s);
        s
    }

    fn write_into(&self, out: &mut String) {
        match self {
            ParseTree::Leaf(l) => {
                let word = l
                    .word
                    .as_deref()
                    .map(escape_word)
                    .unwrap_or_else(|| l.index.to_string());
                match &l.tag {
                    Some(tag) => {
                        out.push('(');
                        out.push_str(tag);
                        out.push(' ');
                        out.push_str(&word);
                        out.push(')');
                    }
                    None => out.push_str(&word),
                }
            }
            ParseTree::Node { label, children } => {
                out.push('(');
                if let Some(label) = label {
                    out.push_str(label);
                }
                for (i, c) in children.iter().enumerate() {
                    if i > 0 || label.is_some() {
                        out.push(' ');
                    }
                    c.write_into(out);
                }
                out.push(')');
            }
        }
    }

    /// Writes with every internal node labeled `X` and every leaf as `(X word)`,
    /// the usual shape for unlabeled parser output fed to evalb.
    pub fn to_unlabeled_bracketed(&self) -> String {
        let mut t = self.clone();
        fn relabel(t: &mut ParseTree) {
            match t {
                ParseTree::Leaf(l) => l.tag = Some("X".into()),
                ParseTree::Node { label, children } => {
                    *label = Some("X".into());
                    children.iter_mut().for_each(relabel);
                }
            }
        }
        relabel(&mut t);
        t.to_bracketed()
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bracketed())
    }
}

fn escape_word(w: &str) -> String {
    w.replace('(', "-LRB-").replace(')', "-RRB-")
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TreeReadError {
    #[error("line {line}: unbalanced brackets")]
    Unbalanced { line: usize },
    #[error("line {line}: empty tree")]
    Empty { line: usize },
    #[error("line {line}: unexpected token `{token}`")]
    Unexpected { line: usize, token: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(s: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                out.push(Token::Open);
                i += 1;
            }
            b')' => {
                out.push(Token::Close);
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b'(' | b')') && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                out.push(Token::Atom(&s[start..i]));
            }
        }
    }
    out
}

/// Parses one bracketed tree. `line` is only used in error messages.
pub fn parse_tree(s: &str, line: usize) -> Result<ParseTree, TreeReadError> {
    parse_with(s, line, true)
}

/// Reads a label-free tree such as `((0 1) 2)` in which every atom is a leaf.
/// Single-child brackets collapse to the child.
pub fn parse_bare_tree(s: &str, line: usize) -> Result<ParseTree, TreeReadError> {
    parse_with(s, line, false)
}

fn parse_with(s: &str, line: usize, labeled: bool) -> Result<ParseTree, TreeReadError> {
    let tokens = tokenize(s);
    if tokens.is_empty() {
        return Err(TreeReadError::Empty { line });
    }
    let mut depth = 0i64;
    for t in &tokens {
        match t {
            Token::Open => depth += 1,
            Token::Close => {
                depth -= 1;
                if depth < 0 {
                    return Err(TreeReadError::Unbalanced { line });
                }
            }
            Token::Atom(_) => {}
        }
    }
    if depth != 0 {
        return Err(TreeReadError::Unbalanced { line });
    }

    // Frames hold (label, children) of currently open brackets.
    let mut frames: Vec<(Option<String>, Vec<ParseTree>)> = Vec::new();
    let mut next_leaf = 0usize;
    let mut root: Option<ParseTree> = None;
    let mut i = 0;
    while i < tokens.len() {
        match &tokens[i] {
            Token::Open => {
                let label = match tokens.get(i + 1) {
                    Some(Token::Atom(a)) if labeled => {
                        i += 1;
                        Some(a.to_string())
                    }
                    _ => None,
                };
                frames.push((label, Vec::new()));
            }
            Token::Atom(a) => {
                let frame = frames.last_mut().ok_or_else(|| TreeReadError::Unexpected {
                    line,
                    token: a.to_string(),
                })?;
                frame.1.push(ParseTree::Leaf(Leaf {
                    index: next_leaf,
                    word: Some(a.to_string()),
                    tag: None,
                }));
                next_leaf += 1;
            }
            Token::Close => {
                let (label, children) = frames.pop().expect("balanced");
                let node = match (label, children.len()) {
                    (None, 0) => return Err(TreeReadError::Empty { line }),
                    (None, 1) if !labeled => children.into_iter().next().unwrap(),
                    // `(word)`: a bare leaf with no tag
                    (Some(word), 0) => {
                        let leaf = ParseTree::Leaf(Leaf {
                            index: next_leaf,
                            word: Some(word),
                            tag: None,
                        });
                        next_leaf += 1;
                        leaf
                    }
                    // `(TAG word)`: preterminal folded into the leaf
                    (Some(tag), 1) if is_bare_word(&children[0]) => {
                        let ParseTree::Leaf(mut leaf) = children.into_iter().next().unwrap() else {
                            unreachable!()
                        };
                        leaf.tag = Some(tag);
                        ParseTree::Leaf(leaf)
                    }
                    (label, _) => ParseTree::Node { label, children },
                };
                match frames.last_mut() {
                    Some(parent) => parent.1.push(node),
                    None => {
                        if root.is_some() {
                            return Err(TreeReadError::Unexpected {
                                line,
                                token: "(".into(),
                            });
                        }
                        root = Some(node);
                    }
                }
            }
        }
        i += 1;
    }
    match root {
        Some(t) => Ok(t),
        None => Err(TreeReadError::Unexpected {
            line,
            token: s.trim().to_string(),
        }),
    }
}

fn is_bare_word(t: &ParseTree) -> bool {
    matches!(t, ParseTree::Leaf(l) if l.tag.is_none() && l.word.is_some())
}

/// Reads one tree per nonblank line.
pub fn parse_trees(text: &str) -> Result<Vec<ParseTree>, TreeReadError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_tree(l, i + 1))
        .collect()
}

pub fn read_trees(path: impl AsRef<Path>) -> Result<Vec<ParseTree>, TreeReadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TreeReadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_trees(&text)
}

pub fn write_trees(path: impl AsRef<Path>, trees: &[ParseTree]) -> std::io::Result<()> {
    let mut out = String::new();
    for t in trees {
        out.push_str(&t.to_bracketed());
        out.push('\n');
    }
    fs::write(path, out)
}
