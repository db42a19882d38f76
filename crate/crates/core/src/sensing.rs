//! Random binary mask pairs and the Kronecker-structured sensing operator.
//!
//! Row `i` of the implicit `M × n²` sensing matrix is `aᵢ ⊗ bᵢ`. With the
//! column-major reshape `S = sq(X)` (`S[r, c] = X[r + n·c]`) this gives
//!
//! ```text
//! (A X)ᵢ = bᵢ · S · aᵢᵀ          A X  = diag(b S aᵀ)
//! Aᵀ Y   = vec(bᵀ diag(Y) a)
//! ```
//!
//! so `b` selects rows (signal pixels) and `a` selects columns (idler
//! pixels) of the joint matrix. Neither product ever materializes `A`.

use std::cell::Cell;
use std::sync::OnceLock;
use std::io::{BufRead, Write};

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ShapeBuilder};
use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::rng::{derive_seed, word};

const STREAM_A: u64 = 0xA;
const STREAM_B: u64 = 0xB;
/// Rows unpacked per dense block.
const BLOCK: usize = 256;

/// Row-major packed bit matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words_per_row,
            data: vec![0; rows * words_per_row],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.data[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    fn row_words_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.data[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        (self.row_words(i)[j >> 6] >> (j & 63)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        let w = &mut self.row_words_mut(i)[j >> 6];
        if value {
            *w |= 1 << (j & 63);
        } else {
            *w &= !(1 << (j & 63));
        }
    }

    pub fn row_ones(&self, i: usize) -> usize {
        self.row_words(i).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn transpose(&self) -> BitMatrix {
        let mut t = BitMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for_each_one(self.row_words(i), |j| t.row_words_mut(j)[i >> 6] |= 1 << (i & 63));
        }
        t
    }

    /// Bytes used by the packed storage.
    pub fn storage_bytes(&self) -> usize {
        self.data.len() * 8
    }

    fn unpack_into(&self, rows: std::ops::Range<usize>, out: &mut Array2<f64>, scale: Option<&[f64]>) {
        out.fill(0.0);
        for (k, i) in rows.enumerate() {
            let s = scale.map_or(1.0, |s| s[i]);
            let mut row = out.row_mut(k);
            for_each_one(self.row_words(i), |j| row[j] = s);
        }
    }
}

#[inline]
fn for_each_one(words: &[u64], mut f: impl FnMut(usize)) {
    for (wi, &w) in words.iter().enumerate() {
        let mut w = w;
        while w != 0 {
            let t = w.trailing_zeros() as usize;
            f(wi * 64 + t);
            w &= w - 1;
        }
    }
}

/// `M` random mask pairs over `n` pixels per detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSet {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    /// Masks applied to the column (idler) index of the joint matrix.
    pub a: BitMatrix,
    /// Masks applied to the row (signal) index of the joint matrix.
    pub b: BitMatrix,
}

fn fill_row(bits: &mut BitMatrix, i: usize, key: u64, n: usize) {
    let wpr = bits.words_per_row;
    let tail = n % 64;
    let row = bits.row_words_mut(i);
    for (w, slot) in row.iter_mut().enumerate() {
        let mut v = word(key, (i * wpr + w) as u64);
        if w == wpr - 1 && tail != 0 {
            v &= (1u64 << tail) - 1;
        }
        *slot = v;
    }
}

fn draw_masks(key: u64, m: usize, n: usize) -> BitMatrix {
    let mut bits = BitMatrix::zeros(m, n);
    for i in 0..m {
        // redraw rows whose density leaves [0.4, 0.6]; attempt t uses key_t
        let mut attempt = 0u64;
        loop {
            let k = if attempt == 0 { key } else { derive_seed(key, attempt) };
            fill_row(&mut bits, i, k, n);
            let ones = bits.row_ones(i);
            if n < 64 || (ones * 10 >= n * 4 && ones * 10 <= n * 6) {
                break;
            }
            attempt += 1;
        }
    }
    bits
}

/// Deterministically draw `m` Bernoulli(½) mask pairs from `seed`.
///
/// Each 64-bit word of row `i` is `word(key, i·⌈n/64⌉ + w)` with
/// `key = derive_seed(seed, 0xA)` for `a` and `derive_seed(seed, 0xB)` for
/// `b`. For `n ≥ 64` a row whose ones-fraction falls outside `[0.4, 0.6]`
/// is redrawn with key `derive_seed(key, attempt)`. If `a` and `b` come out
/// identical, `b` is redrawn from stream `0xB + k`.
pub fn generate_patterns(seed: u64, m: usize, n: usize) -> Result<PatternSet> {
    if m == 0 || n == 0 {
        return param(format!("pattern dimensions must be positive (m={m}, n={n})"));
    }
    let a = draw_masks(derive_seed(seed, STREAM_A), m, n);
    let mut k = 0u64;
    let b = loop {
        let b = draw_masks(derive_seed(seed, STREAM_B + k), m, n);
        if b != a {
            break b;
        }
        k += 1;
    };
    Ok(PatternSet { m, n, seed, a, b })
}

impl PatternSet {
    /// Build from explicit 0/1 rows (mainly for tests).
    pub fn from_rows(a: &[Vec<u8>], b: &[Vec<u8>], seed: u64) -> Result<Self> {
        let m = a.len();
        if m == 0 || b.len() != m {
            return param("a and b must have the same positive number of rows");
        }
        let n = a[0].len();
        if n == 0 || a.iter().chain(b).any(|r| r.len() != n) {
            return param("all mask rows must have the same positive length");
        }
        let mut ba = BitMatrix::zeros(m, n);
        let mut bb = BitMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                match (a[i][j], b[i][j]) {
                    (x @ (0 | 1), y @ (0 | 1)) => {
                        ba.set(i, j, x == 1);
                        bb.set(i, j, y == 1);
                    }
                    _ => return param("mask entries must be 0 or 1"),
                }
            }
        }
        Ok(Self {
            m,
            n,
            seed,
            a: ba,
            b: bb,
        })
    }

    pub fn ones_fraction(&self) -> f64 {
        (self.a.count_ones() + self.b.count_ones()) as f64 / (2 * self.m * self.n) as f64
    }
}

/// A linear map `R^cols → R^rows` with an adjoint.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// Matrix-free `A` built from a [`PatternSet`].
#[derive(Debug, Clone)]
pub struct SensingOperator {
    patterns: PatternSet,
    /// Layouts for the sparse path, built on first use.
    columns: OnceLock<Columns>,
}

impl SensingOperator {
    pub fn new(patterns: PatternSet) -> Self {
        Self {
            patterns,
            columns: OnceLock::new(),
        }
    }

    fn columns(&self) -> &Columns {
        self.columns.get_or_init(|| Columns::new(&self.patterns))
    }

    pub fn patterns(&self) -> &PatternSet {
        &self.patterns
    }

    pub fn m(&self) -> usize {
        self.patterns.m
    }

    pub fn n(&self) -> usize {
        self.patterns.n
    }

    /// Row `i` of `A` as 0/1 entries: `row[c·n + r] = a_i[c]·b_i[r]`.
    pub fn explicit_row(&self, i: usize) -> Result<Vec<u8>> {
        let PatternSet { m, n, a, b, .. } = &self.patterns;
        if i >= *m {
            return Err(Error::Index { index: i, len: *m });
        }
        let mut row = vec![0u8; n * n];
        for_each_one(a.row_words(i), |c| {
            for_each_one(b.row_words(i), |r| row[c * n + r] = 1);
        });
        Ok(row)
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        let n = self.n();
        if x.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `A X` via `diag(b sq(X) aᵀ)`.
    pub fn forward_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let n = self.n();
        if Windows::count(x, n) * SPARSE_RATIO < n * n {
            Ok(self.forward_sparse(x))
        } else {
            Ok(self.forward_dense(x))
        }
    }

    /// Dense path: `T = B_block · S`, then `yᵢ = Σ_c aᵢ[c] T[i, c]`.
    pub fn forward_dense(&self, x: &[f64]) -> Vec<f64> {
        let PatternSet { m, n, a, b, .. } = &self.patterns;
        let (m, n) = (*m, *n);
        let s = ArrayView2::from_shape((n, n).f(), x).expect("length checked");
        let mut y = vec![0.0; m];
        y.par_chunks_mut(BLOCK).enumerate().for_each(|(blk, out)| {
            let i0 = blk * BLOCK;
            let len = out.len();
            let mut bb = Array2::zeros((len, n));
            b.unpack_into(i0..i0 + len, &mut bb, None);
            let mut t = Array2::zeros((len, n));
            general_mat_mul(1.0, &bb, &s, 0.0, &mut t);
            for (k, yi) in out.iter_mut().enumerate() {
                let row = t.row(k);
                let mut acc = 0.0;
                for_each_one(a.row_words(i0 + k), |c| acc += row[c]);
                *yi = acc;
            }
        });
        y
    }

    /// Sparse path: `yᵢ = Σ_{X[r,c] ≠ 0} aᵢ[c]·bᵢ[r]·X[r,c]`.
    ///
    /// The nonzeros of each column `c` are covered by windows of
    /// `WINDOW_BITS` consecutive rows, and each window gets a table of all
    /// its subset sums. Pattern `i` then adds, for every `c` with
    /// `aᵢ[c] = 1`, one table entry per window indexed by the bits of `bᵢ`
    /// under it. Cost is `O(M·windows/2)` lookups plus `O(2^WINDOW_BITS ·
    /// windows)` to build the tables.
    pub fn forward_sparse(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let m = self.m();
        let cols = self.columns();
        let windows = Windows::build(x, n);
        let mut y = vec![0.0; m];
        y.par_chunks_mut(ROW_BLOCK).enumerate().for_each(|(blk, out)| {
            let i0 = blk * ROW_BLOCK;
            for c in 0..n {
                let (lo, hi) = (windows.start[c], windows.start[c + 1]);
                if lo == hi {
                    continue;
                }
                let words = cols.a_t.row_words(c);
                for (wk, &word) in words[i0 / 64..(i0 + out.len()).div_ceil(64)].iter().enumerate() {
                    let mut bits = word;
                    while bits != 0 {
                        let i = i0 + wk * 64 + bits.trailing_zeros() as usize;
                        bits &= bits - 1;
                        let row = cols.b_row_bytes(i);
                        let mut acc = 0.0;
                        for (&(off, shift), table) in windows.at[lo..hi].iter().zip(&windows.tables[lo..hi]) {
                            let bits = u32::from_le_bytes([row[off], row[off + 1], row[off + 2], 0]);
                            acc += table[((bits >> shift) as usize) & (WINDOW - 1)];
                        }
                        out[i - i0] += acc;
                    }
                }
            }
        });
        y
    }

    /// `Aᵀ Y` via `vec(bᵀ diag(Y) a)`, accumulated block by block in a
    /// fixed order.
    pub fn adjoint_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let PatternSet { m, n, a, b, .. } = &self.patterns;
        let (m, n) = (*m, *n);
        if y.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: y.len(),
            });
        }
        let partials: Vec<Array2<f64>> = (0..m.div_ceil(BLOCK))
            .into_par_iter()
            .map(|blk| {
                let i0 = blk * BLOCK;
                let len = BLOCK.min(m - i0);
                let mut ab = Array2::zeros((len, n));
                let mut yb = Array2::zeros((len, n));
                a.unpack_into(i0..i0 + len, &mut ab, None);
                b.unpack_into(i0..i0 + len, &mut yb, Some(y));
                // Gᵀ[c, r] = Σ_i a_i[c] y_i b_i[r]; row-major Gᵀ is vec(G)
                let mut gt = Array2::zeros((n, n));
                general_mat_mul(1.0, &ab.t(), &yb, 0.0, &mut gt);
                gt
            })
            .collect();
        let mut total = Array2::<f64>::zeros((n, n));
        for p in partials {
            total += &p;
        }
        Ok(total.into_raw_vec_and_offset().0)
    }
}

/// Rows of `sq(X)` covered by one subset-sum table.
const WINDOW_BITS: usize = 8;
const WINDOW: usize = 1 << WINDOW_BITS;

/// Patterns per parallel block of the sparse path.
const ROW_BLOCK: usize = 2048;

#[derive(Debug, Clone)]
struct Columns {
    /// `a` transposed: one bit per pattern for each idler pixel.
    a_t: BitMatrix,
    /// `b` rows as little-endian bytes plus two bytes of zero padding.
    b_bytes: Vec<u8>,
    stride: usize,
}

impl Columns {
    fn new(p: &PatternSet) -> Self {
        let stride = p.n.div_ceil(8) + 2;
        let mut b_bytes = vec![0u8; p.m * stride];
        for i in 0..p.m {
            let row = &mut b_bytes[i * stride..(i + 1) * stride - 2];
            for (k, byte) in row.iter_mut().enumerate() {
                *byte = (p.b.row_words(i)[k / 8] >> (8 * (k % 8))) as u8;
            }
        }
        Self {
            a_t: p.a.transpose(),
            b_bytes,
            stride,
        }
    }

    #[inline]
    fn b_row_bytes(&self, i: usize) -> &[u8] {
        &self.b_bytes[i * self.stride..(i + 1) * self.stride]
    }
}

/// Subset-sum tables over 8-row windows of each column of `sq(X)`.
struct Windows {
    /// Windows of column `c` are `start[c]..start[c + 1]`.
    start: Vec<usize>,
    /// Byte offset and bit shift of each window's first row in a `b` row.
    at: Vec<(usize, u32)>,
    tables: Vec<Box<[f64; WINDOW]>>,
}

impl Windows {
    fn count(x: &[f64], n: usize) -> usize {
        let mut total = 0;
        for col in x.chunks(n) {
            let mut r = 0;
            while r < n {
                if col[r] == 0.0 {
                    r += 1;
                } else {
                    total += 1;
                    r += WINDOW_BITS;
                }
            }
        }
        total
    }

    fn build(x: &[f64], n: usize) -> Self {
        let mut start = Vec::with_capacity(n + 1);
        let mut at = Vec::new();
        let mut tables = Vec::new();
        for c in 0..n {
            start.push(at.len());
            let col = &x[c * n..(c + 1) * n];
            let mut r = 0;
            while r < n {
                if col[r] == 0.0 {
                    r += 1;
                    continue;
                }
                let vals: Vec<f64> = (0..WINDOW_BITS).map(|j| col.get(r + j).copied().unwrap_or(0.0)).collect();
                let mut table = Box::new([0.0; WINDOW]);
                for mask in 1..WINDOW {
                    table[mask] = table[mask & (mask - 1)] + vals[mask.trailing_zeros() as usize];
                }
                tables.push(table);
                at.push((r >> 3, (r & 7) as u32));
                r += WINDOW_BITS;
            }
        }
        start.push(at.len());
        Self { start, at, tables }
    }
}

/// `windows · SPARSE_RATIO < n²` selects the sparse forward path. A table
/// lookup costs about 30 dense multiply-adds and half the patterns skip each
/// column.
const SPARSE_RATIO: usize = 16;

impl LinearOperator for SensingOperator {
    fn rows(&self) -> usize {
        self.m()
    }

    fn cols(&self) -> usize {
        self.n() * self.n()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_apply(x)
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.adjoint_apply(y)
    }
}

/// Wrapper that counts operator applications.
#[derive(Debug)]
pub struct Counting<'a, O> {
    inner: &'a O,
    forward_calls: Cell<usize>,
    adjoint_calls: Cell<usize>,
}

impl<'a, O: LinearOperator> Counting<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self {
            inner,
            forward_calls: Cell::new(0),
            adjoint_calls: Cell::new(0),
        }
    }

    pub fn forward_calls(&self) -> usize {
        self.forward_calls.get()
    }

    pub fn adjoint_calls(&self) -> usize {
        self.adjoint_calls.get()
    }
}

impl<O: LinearOperator> LinearOperator for Counting<'_, O> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        self.inner.forward(x)
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.adjoint_calls.set(self.adjoint_calls.get() + 1);
        self.inner.adjoint(y)
    }
}

// ---------------------------------------------------------------------------
// Pattern file: `# m:`, `# n:`, `# seed:` header, then M rows of `a`, then M
// rows of `b`, each row a string of n `0`/`1` characters.

pub fn write_patterns<W: Write>(mut w: W, p: &PatternSet) -> std::io::Result<()> {
    writeln!(w, "# m: {}", p.m)?;
    writeln!(w, "# n: {}", p.n)?;
    writeln!(w, "# seed: {}", p.seed)?;
    let mut line = String::with_capacity(p.n);
    for bits in [&p.a, &p.b] {
        for i in 0..p.m {
            line.clear();
            for j in 0..p.n {
                line.push(if bits.get(i, j) { '1' } else { '0' });
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_patterns<R: BufRead>(r: R) -> Result<PatternSet> {
    let mut m = None;
    let mut n = None;
    let mut seed = None;
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.split_once(':') {
                let v = v.trim();
                match k.trim() {
                    "m" => m = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                    "n" => n = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                    "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                    _ => {}
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let row = line
            .bytes()
            .map(|c| match c {
                b'0' => Ok(0u8),
                b'1' => Ok(1u8),
                other => Err(bad(format!("unexpected character {:?}", other as char))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let missing = |what: &str| Error::Parse {
        line: 0,
        msg: format!("missing {what} header"),
    };
    let m = m.ok_or_else(|| missing("m"))?;
    let n = n.ok_or_else(|| missing("n"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;
    if rows.len() != 2 * m || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected {} rows of length {n}", 2 * m),
        });
    }
    let (a, b) = rows.split_at(m);
    PatternSet::from_rows(a, b, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(generate_patterns(1, 0, 4).is_err());
        assert!(generate_patterns(1, 4, 0).is_err());
    }

    #[test]
    fn deterministic_and_distinct() {
        let p = generate_patterns(42, 30, 70).unwrap();
        let q = generate_patterns(42, 30, 70).unwrap();
        assert_eq!(p, q);
        assert_ne!(p.a, p.b);
        assert_ne!(p, generate_patterns(43, 30, 70).unwrap());
    }

    #[test]
    fn tiny_sets_still_distinct() {
        for seed in 0..50 {
            let p = generate_patterns(seed, 1, 1).unwrap();
            assert_ne!(p.a, p.b);
        }
    }

    #[test]
    fn row_density_band() {
        let p = generate_patterns(9, 500, 64).unwrap();
        for i in 0..p.m {
            for bits in [&p.a, &p.b] {
                let f = bits.row_ones(i) as f64 / 64.0;
                assert!((0.4..=0.6).contains(&f), "row {i}: {f}");
            }
        }
    }

    #[test]
    fn packed_storage_fits_largest_configuration() {
        let bits = BitMatrix::zeros(30_000, 1024);
        assert!(2 * bits.storage_bytes() < 8 * 1024 * 1024);
    }

    #[test]
    fn explicit_row_unit_vectors() {
        let p = PatternSet::from_rows(&[vec![1, 0, 0, 0]], &[vec![1, 0, 0, 0]], 0).unwrap();
        let op = SensingOperator::new(p);
        let row = op.explicit_row(0).unwrap();
        assert_eq!(row.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(row[0], 1);
        assert!(op.explicit_row(1).is_err());
    }

    #[test]
    fn explicit_row_matches_kronecker_for_all_n2_masks() {
        // every (a, b) pair of 2-pixel masks against the hand-written a ⊗ b
        let masks = [[0u8, 0], [0, 1], [1, 0], [1, 1]];
        for a in masks {
            for b in masks {
                let p = PatternSet::from_rows(&[a.to_vec()], &[b.to_vec()], 0).unwrap();
                let row = SensingOperator::new(p).explicit_row(0).unwrap();
                let kron = [a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]];
                assert_eq!(row, kron.to_vec(), "a={a:?} b={b:?}");
            }
        }
    }

    #[test]
    fn forward_small_example() {
        // a = [[1,0],[1,1]], b = [[0,1],[1,1]], X = vec([[1,2],[3,4]])
        let p = PatternSet::from_rows(&[vec![1, 0], vec![1, 1]], &[vec![0, 1], vec![1, 1]], 0).unwrap();
        let op = SensingOperator::new(p);
        // column-major vec of [[1,2],[3,4]] is [1,3,2,4]
        let x = [1.0, 3.0, 2.0, 4.0];
        // explicit rows: a1⊗b1 = [0,1,0,0], a2⊗b2 = [1,1,1,1]
        let y = op.forward_apply(&x).unwrap();
        assert_eq!(y, vec![3.0, 10.0]);
        assert_eq!(op.forward_dense(&x), y);
        assert_eq!(op.forward_sparse(&x), y);
    }

    #[test]
    fn zero_inputs_give_zero() {
        let op = SensingOperator::new(generate_patterns(3, 7, 9).unwrap());
        assert!(op.forward_apply(&[0.0; 81]).unwrap().iter().all(|v| *v == 0.0));
        assert!(op.adjoint_apply(&[0.0; 7]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_ones_masks_preserve_mass() {
        let ones = vec![vec![1u8; 4]; 3];
        let op = SensingOperator::new(PatternSet::from_rows(&ones, &ones, 0).unwrap());
        let x: Vec<f64> = (1..=16).map(|i| i as f64 / 136.0).collect();
        for yi in op.forward_apply(&x).unwrap() {
            assert!((yi - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_errors() {
        let op = SensingOperator::new(generate_patterns(3, 5, 4).unwrap());
        assert!(matches!(op.forward_apply(&[0.0; 15]), Err(Error::Dimension { .. })));
        assert!(matches!(op.adjoint_apply(&[0.0; 4]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dense_and_sparse_paths_agree() {
        let op = SensingOperator::new(generate_patterns(5, 300, 20).unwrap());
        let mut s = crate::rng::Stream::new(11);
        let x: Vec<f64> = (0..400)
            .map(|_| if s.uniform() < 0.3 { s.uniform() } else { 0.0 })
            .collect();
        let yd = op.forward_dense(&x);
        let ys = op.forward_sparse(&x);
        for (a, b) in yd.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn adjoint_identity_medium() {
        let op = SensingOperator::new(generate_patterns(8, 600, 36).unwrap());
        let mut s = crate::rng::Stream::new(3);
        let x: Vec<f64> = (0..36 * 36).map(|_| s.uniform() - 0.5).collect();
        let y: Vec<f64> = (0..600).map(|_| s.uniform() - 0.5).collect();
        let lhs = dot(&op.forward_apply(&x).unwrap(), &y);
        let rhs = dot(&x, &op.adjoint_apply(&y).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn pattern_file_round_trip_and_regeneration() {
        let p = generate_patterns(77, 12, 10).unwrap();
        let mut buf = Vec::new();
        write_patterns(&mut buf, &p).unwrap();
        let back = read_patterns(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        let regen = generate_patterns(back.seed, back.m, back.n).unwrap();
        let mut buf2 = Vec::new();
        write_patterns(&mut buf2, &regen).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn pattern_file_rejects_garbage() {
        let text = "# m: 1\n# n: 2\n# seed: 0\n01\n0x\n";
        assert!(read_patterns(text.as_bytes()).is_err());
    }
}
