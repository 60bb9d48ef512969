//! Word-level attention, and merging of word-piece attention into it.
//!
//! Attention *to* a word is the sum over its pieces' columns; attention *from*
//! a word is the mean over its pieces' rows. Delimiter pieces (alignment -1)
//! are dropped first and, by default, each remaining piece row is rescaled to
//! sum to one. Sentences without delimiters are never rescaled.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("alignment has {alignment} entries but attention has {pieces} pieces")]
    LengthMismatch { alignment: usize, pieces: usize },
    #[error("attention matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("alignment is not monotone or skips a word at piece {piece}")]
    NonMonotone { piece: usize },
    #[error("no word pieces left after dropping delimiters")]
    NoWords,
    #[error("row {row} sums to {sum}, not 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("entry ({row},{col}) = {value} is negative or not finite")]
    BadEntry { row: usize, col: usize, value: f64 },
}

/// Square word-by-word attention; `get(i, j)` is how much word `i` attends to word `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordAttention {
    matrix: Array2<f64>,
}

impl WordAttention {
    /// Validates squareness, non-negativity and unit row sums (within `tol`).
    pub fn new(matrix: Array2<f64>, tol: f64) -> Result<Self, AlignError> {
        let (rows, cols) = matrix.dim();
        if rows != cols {
            return Err(AlignError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(AlignError::NoWords);
        }
        for (row, r) in matrix.rows().into_iter().enumerate() {
            for (col, &value) in r.iter().enumerate() {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(AlignError::BadEntry { row, col, value });
                }
            }
            let sum = r.sum();
            if (sum - 1.0).abs() > tol {
                return Err(AlignError::NotRowStochastic { row, sum });
            }
        }
        Ok(WordAttention { matrix })
    }

    /// Wraps a square matrix without checking row sums.
    pub fn unchecked(matrix: Array2<f64>) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols(), "attention must be square");
        WordAttention { matrix }
    }

    pub fn uniform(n: usize) -> Self {
        WordAttention {
            matrix: Array2::from_elem((n, n), 1.0 / n as f64),
        }
    }

    pub fn from_f32(m: &Array2<f32>, tol: f64) -> Result<Self, AlignError> {
        Self::new(m.mapv(f64::from), tol)
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[[i, j]]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.matrix
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeOptions {
    /// Rescale piece rows to sum to one after delimiter columns are dropped.
    pub renormalize: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions { renormalize: true }
    }
}

/// Checks the alignment and returns the number of words it covers.
pub fn word_count(alignment: &[i64]) -> Result<usize, AlignError> {
    let mut next = 0i64;
    for (piece, &a) in alignment.iter().enumerate() {
        if a < 0 {
            continue;
        }
        if a == next {
            next += 1;
        } else if a != next - 1 {
            return Err(AlignError::NonMonotone { piece });
        }
    }
    if next == 0 {
        return Err(AlignError::NoWords);
    }
    Ok(next as usize)
}

/// Merges piece-level attention into word-level attention.
pub fn merge_pieces(
    piece_attention: ArrayView2<'_, f64>,
    alignment: &[i64],
    opts: MergeOptions,
) -> Result<WordAttention, AlignError> {
    let (rows, cols) = piece_attention.dim();
    if rows != cols {
        return Err(AlignError::NotSquare { rows, cols });
    }
    if alignment.len() != rows {
        return Err(AlignError::LengthMismatch {
            alignment: alignment.len(),
            pieces: rows,
        });
    }
    let n = word_count(alignment)?;
    let mut pieces_per_word = vec![0usize; n];
    for &a in alignment.iter().filter(|&&a| a >= 0) {
        pieces_per_word[a as usize] += 1;
    }

    let has_delimiters = alignment.iter().any(|&a| a < 0);
    let mut out = Array2::<f64>::zeros((n, n));
    let mut row_buf = vec![0f64; n];
    for (p, &wp) in alignment.iter().enumerate() {
        if wp < 0 {
            continue;
        }
        // Sum columns into words for this piece row.
        row_buf.iter_mut().for_each(|v| *v = 0.0);
        for (q, &wq) in alignment.iter().enumerate() {
            if wq >= 0 {
                row_buf[wq as usize] += piece_attention[[p, q]];
            }
        }
        if opts.renormalize && has_delimiters {
            let total: f64 = row_buf.iter().sum();
            if total > 0.0 {
                row_buf.iter_mut().for_each(|v| *v /= total);
            }
        }
        let mut out_row = out.row_mut(wp as usize);
        for (o, v) in out_row.iter_mut().zip(&row_buf) {
            *o += v;
        }
    }
    // Average rows over each word's pieces.
    for (w, mut row) in out.rows_mut().into_iter().enumerate() {
        let c = pieces_per_word[w] as f64;
        row.mapv_inplace(|v| v / c);
    }
    Ok(WordAttention { matrix: out })
}

/// Averages the rows of each word's pieces, dropping delimiter rows.
pub fn merge_rows(piece_rows: ArrayView2<'_, f64>, alignment: &[i64]) -> Result<Array2<f64>, AlignError> {
    if alignment.len() != piece_rows.nrows() {
        return Err(AlignError::LengthMismatch {
            alignment: alignment.len(),
            pieces: piece_rows.nrows(),
        });
    }
    let n = word_count(alignment)?;
    let mut out = Array2::<f64>::zeros((n, piece_rows.ncols()));
    let mut counts = vec![0usize; n];
    for (p, &w) in alignment.iter().enumerate() {
        if w >= 0 {
            let w = w as usize;
            counts[w] += 1;
            let mut row = out.row_mut(w);
            row += &piece_rows.row(p);
        }
    }
    for (w, mut row) in out.rows_mut().into_iter().enumerate() {
        let c = counts[w] as f64;
        row.mapv_inplace(|v| v / c);
    }
    Ok(out)
}
