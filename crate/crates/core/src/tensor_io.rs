//! Named-tensor container and corpus files.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "ATNPARS1"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          raw payload
//! ```
//!
//! The header is a JSON object mapping tensor names to
//! `{"dtype": "f32", "shape": [..], "offset": <byte offset into payload>}`.
//! The optional key `__metadata__` holds arbitrary JSON and is not a tensor.
//! Tensors are row-major little-endian `f32`.
//!
//! A corpus is one container plus a sidecar JSON file (`<container>.json`)
//! holding `[{"words": [..], "pieces": [..], "alignment": [..]}, ..]`.
//! Per-sentence tensors are prefixed with `s{I}/`:
//! `s{I}/hidden/l{L}` (pieces x d_model) and `s{I}/attn/l{L}/h{H}`
//! (pieces x pieces). Per-layer projections are `proj/l{L}/wq` and
//! `proj/l{L}/wk` (d_model x d_model).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MAGIC: &[u8; 8] = b"ATNPARS1";
pub const METADATA_KEY: &str = "__metadata__";

/// Tolerance on attention row sums accepted when loading a corpus.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: not an ATNPARS1 container")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed header entry `{name}`: {reason}")]
    MalformedEntry { name: String, reason: String },
    #[error("unknown dtype `{dtype}` for tensor `{name}`")]
    UnknownDtype { name: String, dtype: String },
    #[error("truncated payload: tensor `{name}` needs bytes {start}..{end}, payload has {len}")]
    Truncated {
        name: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {shape:?}, expected {expected}")]
    BadShape {
        name: String,
        shape: Vec<usize>,
        expected: String,
    },
    #[error("tensor `{name}` row {row} sums to {sum}, not 1")]
    NotRowStochastic { name: String, row: usize, sum: f64 },
    #[error("tensor `{name}` has entry {value} outside [0, 1]")]
    OutOfRange { name: String, value: f32 },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("sentence {index}: {reason}")]
    BadSentence { index: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype.size()
    }
}

/// An in-memory container: name-indexed entries over one payload buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub entries: BTreeMap<String, TensorEntry>,
    pub metadata: Option<Value>,
    pub payload: Vec<u8>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor at the end of the payload, replacing any entry of the
    /// same name in the index.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        let name = name.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "tensor `{name}` has empty shape or zero dim"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor `{name}`: shape/data mismatch"
        );
        let offset = self.payload.len();
        self.payload.reserve(data.len() * 4);
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.insert(
            name,
            TensorEntry {
                dtype: Dtype::F32,
                shape: shape.to_vec(),
                offset,
            },
        );
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Array2<f32>) {
        let (r, c) = m.dim();
        let data: Vec<f32> = m.iter().copied().collect();
        self.insert(name, &[r, c], &data);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], Vec<f32>)> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| TensorIoError::Missing(name.to_string()))?;
        let bytes = &self.payload[entry.offset..entry.offset + entry.byte_len()];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok((&entry.shape, data))
    }

    /// Fetches a tensor as a matrix, squeezing leading singleton dimensions.
    pub fn get_matrix(&self, name: &str) -> Result<Array2<f32>> {
        let (shape, data) = self.get(name)?;
        let dims: Vec<usize> = match shape.len() {
            2 => shape.to_vec(),
            n if n > 2 && shape[..n - 2].iter().all(|&d| d == 1) => shape[n - 2..].to_vec(),
            _ => {
                return Err(TensorIoError::BadShape {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    expected: "a matrix".into(),
                })
            }
        };
        Ok(Array2::from_shape_vec((dims[0], dims[1]), data).expect("shape checked on read"))
    }

    /// Serializes to the container byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        for (name, entry) in &self.entries {
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
        }
        if let Some(meta) = &self.metadata {
            header.insert(METADATA_KEY.to_string(), meta.clone());
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(TensorIoError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(TensorIoError::MalformedHeader("missing header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| TensorIoError::MalformedHeader(format!("header length {header_len} exceeds file size")))?;
        let header: Value = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| TensorIoError::MalformedHeader(e.to_string()))?;
        let Value::Object(map) = header else {
            return Err(TensorIoError::MalformedHeader("header is not a JSON object".into()));
        };
        let payload = bytes[header_end..].to_vec();

        let mut entries = BTreeMap::new();
        let mut metadata = None;
        for (name, value) in map {
            if name == METADATA_KEY {
                metadata = Some(value);
                continue;
            }
            let entry = parse_entry(&name, &value)?;
            let start = entry.offset;
            let end = start + entry.byte_len();
            if end > payload.len() {
                return Err(TensorIoError::Truncated {
                    name,
                    start,
                    end,
                    len: payload.len(),
                });
            }
            entries.insert(name, entry);
        }
        Ok(TensorFile {
            entries,
            metadata,
            payload,
        })
    }
}

fn parse_entry(name: &str, value: &Value) -> Result<TensorEntry> {
    let malformed = |reason: &str| TensorIoError::MalformedEntry {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| malformed("not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing dtype"))?;
    let dtype = match dtype {
        "f32" => Dtype::F32,
        other => {
            return Err(TensorIoError::UnknownDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            })
        }
    };
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("shape must hold non-negative integers"))?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(malformed("shape must be nonempty with all dims >= 1"));
    }
    let offset = obj
        .get("offset")
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed("missing offset"))? as usize;
    Ok(TensorEntry { dtype, shape, offset })
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorFile::from_bytes(&bytes)
}

pub fn write_tensor_file(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, file.to_bytes()).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One sentence of an extracted corpus.
///
/// `alignment[p]` is the word index owning piece `p`, or `-1` for a sequence
/// delimiter inserted by the tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRecord {
    pub words: Vec<String>,
    pub pieces: Vec<String>,
    pub alignment: Vec<i64>,
    /// Layer index -> pieces x d_model states feeding that layer's attention.
    pub hidden: BTreeMap<usize, Array2<f32>>,
    /// (layer, head) -> pieces x pieces attention.
    pub attention: BTreeMap<(usize, usize), Array2<f32>>,
}

impl SentenceRecord {
    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn heads(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.attention.keys().copied()
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: String| TensorIoError::BadSentence { index, reason };
        if self.alignment.len() != self.pieces.len() {
            return Err(bad(format!(
                "alignment has {} entries for {} pieces",
                self.alignment.len(),
                self.pieces.len()
            )));
        }
        let mut next = 0i64;
        for &a in &self.alignment {
            if a < 0 {
                continue;
            }
            if a == next {
                next += 1;
            } else if a != next - 1 {
                return Err(bad("alignment must be monotone and cover every word".into()));
            }
        }
        if next as usize != self.words.len() {
            return Err(bad(format!(
                "alignment covers {next} words, sentence has {}",
                self.words.len()
            )));
        }
        let p = self.pieces.len();
        for ((l, h), m) in &self.attention {
            let name = format!("s{index}/attn/l{l}/h{h}");
            if m.dim() != (p, p) {
                return Err(TensorIoError::BadShape {
                    name,
                    shape: vec![m.nrows(), m.ncols()],
                    expected: format!("[{p}, {p}]"),
                });
            }
            check_row_stochastic(&name, m)?;
        }
        for (l, m) in &self.hidden {
            if m.nrows() != p {
                return Err(TensorIoError::BadShape {
                    name: format!("s{index}/hidden/l{l}"),
                    shape: vec![m.nrows(), m.ncols()],
                    expected: format!("[{p}, d_model]"),
                });
            }
        }
        Ok(())
    }
}

fn check_row_stochastic(name: &str, m: &Array2<f32>) -> Result<()> {
    for (row, r) in m.rows().into_iter().enumerate() {
        let mut sum = 0f64;
        for &v in r {
            if !(0.0..=1.0).contains(&v) {
                return Err(TensorIoError::OutOfRange {
                    name: name.to_string(),
                    value: v,
                });
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(TensorIoError::NotRowStochastic {
                name: name.to_string(),
                row,
                sum,
            });
        }
    }
    Ok(())
}

/// Sidecar record for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub words: Vec<String>,
    pub pieces: Vec<String>,
    pub alignment: Vec<i64>,
}

/// Sentences plus corpus-wide per-layer projections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<SentenceRecord>,
    /// layer -> (W_Q, W_K), each d_model x d_model.
    pub projections: BTreeMap<usize, (Array2<f32>, Array2<f32>)>,
    /// Extra named tensors carried through unchanged.
    pub extra: BTreeMap<String, Array2<f32>>,
    pub metadata: Option<Value>,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

enum Name {
    Hidden(usize, usize),
    Attn(usize, usize, usize),
    Proj(usize, bool),
    Other,
}

fn parse_name(name: &str, single: bool) -> Name {
    let parts: Vec<&str> = name.split('/').collect();
    let num = |s: &str, prefix: char| s.strip_prefix(prefix).and_then(|d| d.parse::<usize>().ok());
    let (sent, rest) = match parts.first().and_then(|p| num(p, 's')) {
        Some(i) => (Some(i), &parts[1..]),
        None => (None, &parts[..]),
    };
    match (rest, sent) {
        (["proj", l, w], None) => match (num(l, 'l'), *w) {
            (Some(l), "wq") => Name::Proj(l, true),
            (Some(l), "wk") => Name::Proj(l, false),
            _ => Name::Other,
        },
        (["hidden", l], s) if s.is_some() || single => match num(l, 'l') {
            Some(l) => Name::Hidden(s.unwrap_or(0), l),
            None => Name::Other,
        },
        (["attn", l, h], s) if s.is_some() || single => match (num(l, 'l'), num(h, 'h')) {
            (Some(l), Some(h)) => Name::Attn(s.unwrap_or(0), l, h),
            _ => Name::Other,
        },
        _ => Name::Other,
    }
}

impl Corpus {
    pub fn from_parts(file: &TensorFile, sidecar: Vec<SidecarEntry>) -> Result<Self> {
        let single = sidecar.len() == 1;
        let mut sentences: Vec<SentenceRecord> = sidecar
            .into_iter()
            .map(|s| SentenceRecord {
                words: s.words,
                pieces: s.pieces,
                alignment: s.alignment,
                hidden: BTreeMap::new(),
                attention: BTreeMap::new(),
            })
            .collect();
        let mut wq = BTreeMap::new();
        let mut wk = BTreeMap::new();
        let mut extra = BTreeMap::new();
        for name in file.names() {
            let sentence = |i: usize| {
                if i < sentences.len() {
                    Ok(i)
                } else {
                    Err(TensorIoError::Sidecar(format!(
                        "tensor `{name}` refers to sentence {i} missing from sidecar"
                    )))
                }
            };
            match parse_name(name, single) {
                Name::Hidden(s, l) => {
                    let s = sentence(s)?;
                    sentences[s].hidden.insert(l, file.get_matrix(name)?);
                }
                Name::Attn(s, l, h) => {
                    let s = sentence(s)?;
                    sentences[s].attention.insert((l, h), file.get_matrix(name)?);
                }
                Name::Proj(l, true) => {
                    wq.insert(l, file.get_matrix(name)?);
                }
                Name::Proj(l, false) => {
                    wk.insert(l, file.get_matrix(name)?);
                }
                Name::Other => {
                    if let Ok(m) = file.get_matrix(name) {
                        extra.insert(name.to_string(), m);
                    }
                }
            }
        }
        let mut projections = BTreeMap::new();
        for (l, q) in wq {
            let k = wk
                .remove(&l)
                .ok_or_else(|| TensorIoError::Missing(format!("proj/l{l}/wk")))?;
            projections.insert(l, (q, k));
        }
        if let Some(l) = wk.keys().next() {
            return Err(TensorIoError::Missing(format!("proj/l{l}/wq")));
        }
        for (i, s) in sentences.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(Corpus {
            sentences,
            projections,
            extra,
            metadata: file.metadata.clone(),
        })
    }

    pub fn to_parts(&self) -> (TensorFile, Vec<SidecarEntry>) {
        let mut file = TensorFile::new();
        for (i, s) in self.sentences.iter().enumerate() {
            for (l, m) in &s.hidden {
                file.insert_matrix(format!("s{i}/hidden/l{l}"), m);
            }
            for ((l, h), m) in &s.attention {
                file.insert_matrix(format!("s{i}/attn/l{l}/h{h}"), m);
            }
        }
        for (l, (q, k)) in &self.projections {
            file.insert_matrix(format!("proj/l{l}/wq"), q);
            file.insert_matrix(format!("proj/l{l}/wk"), k);
        }
        for (name, m) in &self.extra {
            file.insert_matrix(name.clone(), m);
        }
        file.metadata = self.metadata.clone();
        // Rebuild so payload order follows name order; keeps the bytes canonical.
        (canonicalize(&file), self.sidecar())
    }

    pub fn sidecar(&self) -> Vec<SidecarEntry> {
        self.sentences
            .iter()
            .map(|s| SidecarEntry {
                words: s.words.clone(),
                pieces: s.pieces.clone(),
                alignment: s.alignment.clone(),
            })
            .collect()
    }
}

/// Rewrites a container with tensors laid out contiguously in name order.
pub fn canonicalize(file: &TensorFile) -> TensorFile {
    let mut out = TensorFile::new();
    for (name, entry) in &file.entries {
        let (_, data) = file.get(name).expect("entry present");
        out.insert(name.clone(), &entry.shape, &data);
    }
    out.metadata = file.metadata.clone();
    out
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = read_tensor_file(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|source| TensorIoError::Io {
        path: side.clone(),
        source,
    })?;
    let sidecar: Vec<SidecarEntry> =
        serde_json::from_str(&text).map_err(|e| TensorIoError::Sidecar(format!("{}: {e}", side.display())))?;
    Corpus::from_parts(&file, sidecar)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let (file, sidecar) = corpus.to_parts();
    write_tensor_file(path, &file)?;
    let side = sidecar_path(path);
    let text = serde_json::to_string(&sidecar).map_err(|e| TensorIoError::Sidecar(e.to_string()))?;
    fs::write(&side, text).map_err(|source| TensorIoError::Io { path: side, source })
}
