//! Matrix representations and rating preprocessing.
//!
//! [`SparseInteractions`] is the centered, rescaled user × item rating matrix.
//! It keeps both a row-compressed and a column-compressed copy of its entries so
//! that row sums, column sums and products with `M` and `Mᵀ` are all computed by
//! walking contiguous memory. [`DenseMatrix`] is a plain row-major grid used for
//! the small factors and reduced matrices.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid_matrix(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        DenseMatrix {
            rows: n_rows,
            cols: n_cols,
            data,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (l, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(l)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs` without forming the transpose.
    pub fn t_matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch");
        let mut out = DenseMatrix::zeros(self.cols, rhs.cols);
        for l in 0..self.rows {
            let b_row = rhs.row(l);
            for (i, &a) in self.row(l).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Multiplies column `j` by `scale[j]`.
    pub fn scale_columns(&self, scale: &[f64]) -> DenseMatrix {
        assert_eq!(scale.len(), self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, &s) in out.row_mut(i).iter_mut().zip(scale) {
                *v *= s;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute element-wise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `max |selfᵀself − I|`.
    pub fn column_orthonormality_error(&self) -> f64 {
        self.t_matmul(self)
            .max_abs_diff(&DenseMatrix::identity(self.cols))
    }

    /// `max |self selfᵀ − I|`.
    pub fn row_orthonormality_error(&self) -> f64 {
        self.transpose().column_orthonormality_error()
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Materialized Kronecker product `self ⊗ rhs`.
    pub fn kronecker(&self, rhs: &DenseMatrix) -> DenseMatrix {
        let (p, q) = rhs.shape();
        let mut out = DenseMatrix::zeros(self.rows * p, self.cols * q);
        for a_i in 0..self.rows {
            for a_j in 0..self.cols {
                let a = self[(a_i, a_j)];
                for b_i in 0..p {
                    for b_j in 0..q {
                        out[(a_i * p + b_i, a_j * q + b_j)] = a * rhs[(b_i, b_j)];
                    }
                }
            }
        }
        out
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// A matrix that can be multiplied against a block of dense vectors.
///
/// Blocks are row-major: `x` has `n_cols()` rows and one column per vector.
/// Implementations must be deterministic: the result may not depend on how
/// many threads participate.
pub trait LinearOperator: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    /// `self · x`
    fn apply(&self, x: &DenseMatrix) -> DenseMatrix;
    /// `selfᵀ · x`
    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix;
}

impl LinearOperator for DenseMatrix {
    fn n_rows(&self) -> usize {
        self.rows
    }

    fn n_cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        self.matmul(x)
    }

    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix {
        self.t_matmul(x)
    }
}

/// Observed rating as read from the source platform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRating {
    pub user_id: u64,
    pub item_id: u64,
    pub rating: f64,
    /// Seconds since the epoch. Carried through ingestion, never modeled.
    pub timestamp: i64,
}

/// Raw rating records with unique `(user_id, item_id)` pairs.
#[derive(Debug, Clone, Default)]
pub struct RawRatings {
    records: Vec<RawRating>,
}

impl RawRatings {
    pub fn new(records: Vec<RawRating>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(records.len());
        for r in &records {
            if !r.rating.is_finite() {
                return Err(Error::invalid_matrix(format!(
                    "non-finite rating for user {} item {}",
                    r.user_id, r.item_id
                )));
            }
            if !seen.insert((r.user_id, r.item_id)) {
                return Err(Error::invalid_matrix(format!(
                    "duplicate rating for user {} item {}",
                    r.user_id, r.item_id
                )));
            }
        }
        Ok(RawRatings { records })
    }

    pub fn records(&self) -> &[RawRating] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Affine map taking raw ratings to centered values in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub global_mean: f64,
    pub divisor: f64,
}

impl RatingScale {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.global_mean) / self.divisor
    }

    pub fn invert(&self, value: f64) -> f64 {
        self.global_mean + value * self.divisor
    }
}

/// Result of [`center_and_rescale`].
#[derive(Debug, Clone)]
pub struct CenteredRatings {
    pub matrix: SparseInteractions,
    pub scale: RatingScale,
    /// Original user id of each matrix row.
    pub user_ids: Vec<u64>,
    /// Original item id of each matrix column.
    pub item_ids: Vec<u64>,
    /// Ratings equal to the global mean; they center to 0 and are not stored.
    pub dropped_at_mean: usize,
}

/// Subtracts the global mean rating and divides by the largest absolute
/// deviation. Ids are remapped to dense indices in ascending id order.
pub fn center_and_rescale(raw: &RawRatings) -> Result<CenteredRatings> {
    if raw.is_empty() {
        return Err(Error::Empty("no rating records".into()));
    }
    let records = raw.records();

    let mut sum = 0.0;
    let mut compensation = 0.0;
    for r in records {
        // Neumaier summation
        let t = sum + r.rating;
        if sum.abs() >= r.rating.abs() {
            compensation += (sum - t) + r.rating;
        } else {
            compensation += (r.rating - t) + sum;
        }
        sum = t;
    }
    let global_mean = (sum + compensation) / records.len() as f64;
    let divisor = records
        .iter()
        .map(|r| (r.rating - global_mean).abs())
        .fold(0.0, f64::max);
    if divisor == 0.0 {
        return Err(Error::ZeroDivisor(global_mean));
    }
    let scale = RatingScale {
        global_mean,
        divisor,
    };

    let user_index = dense_index(records.iter().map(|r| r.user_id));
    let item_index = dense_index(records.iter().map(|r| r.item_id));

    let mut triplets = Vec::with_capacity(records.len());
    let mut dropped_at_mean = 0;
    for r in records {
        let value = scale.apply(r.rating);
        if value == 0.0 {
            dropped_at_mean += 1;
            continue;
        }
        triplets.push((user_index[&r.user_id], item_index[&r.item_id], value));
    }
    if dropped_at_mean > 0 {
        log::info!("dropped {dropped_at_mean} ratings equal to the global mean {global_mean}");
    }

    let matrix = SparseInteractions::from_triplets(user_index.len(), item_index.len(), triplets)?;
    Ok(CenteredRatings {
        matrix,
        scale,
        user_ids: user_index.keys().copied().collect(),
        item_ids: item_index.keys().copied().collect(),
        dropped_at_mean,
    })
}

fn dense_index(ids: impl Iterator<Item = u64>) -> BTreeMap<u64, u32> {
    let mut map: BTreeMap<u64, u32> = ids.map(|id| (id, 0)).collect();
    for (idx, v) in map.values_mut().enumerate() {
        *v = idx as u32;
    }
    map
}

/// Sparse rating matrix with values in `[-1, 1] \ {0}`.
#[derive(Clone, PartialEq)]
pub struct SparseInteractions {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    row_values: Vec<f64>,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    col_values: Vec<f64>,
}

impl SparseInteractions {
    /// Validates and compresses `(row, col, value)` triplets. Out-of-range
    /// indices, duplicates, zeros and values outside `[-1, 1]` are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(u32, u32, f64)>,
    ) -> Result<Self> {
        if n_rows > u32::MAX as usize || n_cols > u32::MAX as usize {
            return Err(Error::invalid_matrix("dimensions exceed 32-bit index range"));
        }
        for &(i, j, v) in &triplets {
            if i as usize >= n_rows || j as usize >= n_cols {
                return Err(Error::invalid_matrix(format!(
                    "entry ({i}, {j}) outside {n_rows}x{n_cols}"
                )));
            }
            if !(v.is_finite() && v != 0.0 && (-1.0..=1.0).contains(&v)) {
                return Err(Error::invalid_matrix(format!(
                    "entry ({i}, {j}) has value {v}, expected nonzero in [-1, 1]"
                )));
            }
        }
        triplets.par_sort_unstable_by_key(|&(i, j, _)| (i, j));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::invalid_matrix(format!(
                "duplicate entry ({}, {})",
                w[0].0, w[0].1
            )));
        }

        let nnz = triplets.len();
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_ptr = vec![0usize; n_cols + 1];
        for &(i, j, _) in &triplets {
            row_ptr[i as usize + 1] += 1;
            col_ptr[j as usize + 1] += 1;
        }
        for k in 0..n_rows {
            row_ptr[k + 1] += row_ptr[k];
        }
        for k in 0..n_cols {
            col_ptr[k + 1] += col_ptr[k];
        }

        let mut col_idx = Vec::with_capacity(nnz);
        let mut row_values = Vec::with_capacity(nnz);
        let mut row_idx = vec![0u32; nnz];
        let mut col_values = vec![0.0; nnz];
        let mut next = col_ptr.clone();
        // triplets are row-major sorted, so each column receives rows in order
        for &(i, j, v) in &triplets {
            col_idx.push(j);
            row_values.push(v);
            let slot = &mut next[j as usize];
            row_idx[*slot] = i;
            col_values[*slot] = v;
            *slot += 1;
        }

        Ok(SparseInteractions {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            row_values,
            col_ptr,
            row_idx,
            col_values,
        })
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self::from_triplets(n_rows, n_cols, Vec::new()).expect("empty matrix is valid")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.row_values.len()
    }

    /// Entries of row `i` as `(col, value)`, ordered by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .zip(&self.row_values[range])
            .map(|(&j, &v)| (j as usize, v))
    }

    /// Entries of column `j` as `(row, value)`, ordered by row.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .zip(&self.col_values[range])
            .map(|(&i, &v)| (i as usize, v))
    }

    /// All entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn values(&self) -> &[f64] {
        &self.row_values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&(j as u32)) {
            Ok(pos) => self.row_values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.iter() {
            d[(i, j)] = v;
        }
        d
    }

    /// Sparse copy of a dense matrix; every nonzero must lie in `[-1, 1]`.
    pub fn from_dense(d: &DenseMatrix) -> Result<Self> {
        let mut triplets = Vec::new();
        for i in 0..d.n_rows() {
            for (j, &v) in d.row(i).iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i as u32, j as u32, v));
                }
            }
        }
        Self::from_triplets(d.n_rows(), d.n_cols(), triplets)
    }
}

impl fmt::Debug for SparseInteractions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SparseInteractions {{ {}x{}, nnz: {} }}",
            self.n_rows,
            self.n_cols,
            self.nnz()
        )
    }
}

impl LinearOperator for SparseInteractions {
    fn n_rows(&self) -> usize {
        self.n_rows
    }

    fn n_cols(&self) -> usize {
        self.n_cols
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(x.n_rows(), self.n_cols, "operator shape mismatch");
        let b = x.n_cols();
        let mut out = DenseMatrix::zeros(self.n_rows, b);
        if b == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(b)
            .enumerate()
            .for_each(|(i, out_row)| {
                for (j, v) in self.row(i) {
                    for (o, &xv) in out_row.iter_mut().zip(x.row(j)) {
                        *o += v * xv;
                    }
                }
            });
        out
    }

    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(x.n_rows(), self.n_rows, "operator shape mismatch");
        let b = x.n_cols();
        let mut out = DenseMatrix::zeros(self.n_cols, b);
        if b == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(b)
            .enumerate()
            .for_each(|(j, out_row)| {
                for (i, v) in self.column(j) {
                    for (o, &xv) in out_row.iter_mut().zip(x.row(i)) {
                        *o += v * xv;
                    }
                }
            });
        out
    }
}

/// Sum of each row; empty rows contribute 0.
pub fn row_sums(m: &SparseInteractions) -> Vec<f64> {
    (0..m.n_rows()).map(|i| m.row(i).map(|(_, v)| v).sum()).collect()
}

/// Sum of each column; empty columns contribute 0.
pub fn col_sums(m: &SparseInteractions) -> Vec<f64> {
    (0..m.n_cols())
        .map(|j| m.column(j).map(|(_, v)| v).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(ratings: &[(u64, u64, f64)]) -> RawRatings {
        RawRatings::new(
            ratings
                .iter()
                .map(|&(user_id, item_id, rating)| RawRating {
                    user_id,
                    item_id,
                    rating,
                    timestamp: 0,
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseInteractions {
        let mut t = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                if rng.random_bool(density) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if v != 0.0 {
                        t.push((i as u32, j as u32, v));
                    }
                }
            }
        }
        SparseInteractions::from_triplets(rows, cols, t).unwrap()
    }

    #[test]
    fn center_three_ratings() {
        let c = center_and_rescale(&raw(&[(10, 1, 1.0), (20, 1, 3.0), (30, 2, 5.0)])).unwrap();
        assert_eq!(c.scale.global_mean, 3.0);
        assert_eq!(c.scale.divisor, 2.0);
        assert_eq!(c.dropped_at_mean, 1);
        assert_eq!(c.matrix.shape(), (3, 2));
        let entries: Vec<_> = c.matrix.iter().collect();
        assert_eq!(entries, vec![(0, 0, -1.0), (2, 1, 1.0)]);
        assert_eq!(c.user_ids, vec![10, 20, 30]);
        assert_eq!(c.item_ids, vec![1, 2]);
    }

    #[test]
    fn ids_remap_in_ascending_order() {
        let c = center_and_rescale(&raw(&[(99, 7, 1.0), (5, 3, 2.0), (42, 7, 4.5)])).unwrap();
        assert_eq!(c.user_ids, vec![5, 42, 99]);
        assert_eq!(c.item_ids, vec![3, 7]);
        assert!(c.matrix.get(2, 1) < 0.0);
    }

    #[test]
    fn identical_ratings_rejected() {
        let err = center_and_rescale(&raw(&[(1, 1, 4.0), (2, 1, 4.0), (3, 2, 4.0)])).unwrap_err();
        assert!(matches!(err, Error::ZeroDivisor(m) if m == 4.0));
    }

    #[test]
    fn empty_ratings_rejected() {
        let err = center_and_rescale(&RawRatings::default()).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn duplicate_raw_pair_rejected() {
        let err = RawRatings::new(vec![
            RawRating { user_id: 1, item_id: 2, rating: 3.0, timestamp: 0 },
            RawRating { user_id: 1, item_id: 2, rating: 4.0, timestamp: 1 },
        ])
        .unwrap_err();
        assert!(matches!(err, Error::InvalidMatrix(_)));
    }

    #[test]
    fn construction_rejects_bad_entries() {
        assert!(SparseInteractions::from_triplets(2, 2, vec![(2, 0, 0.5)]).is_err());
        assert!(SparseInteractions::from_triplets(2, 2, vec![(0, 2, 0.5)]).is_err());
        assert!(SparseInteractions::from_triplets(2, 2, vec![(0, 0, 0.0)]).is_err());
        assert!(SparseInteractions::from_triplets(2, 2, vec![(0, 0, 1.5)]).is_err());
        assert!(SparseInteractions::from_triplets(2, 2, vec![(0, 0, f64::NAN)]).is_err());
        assert!(SparseInteractions::from_triplets(2, 2, vec![(0, 1, 0.5), (0, 1, 0.2)]).is_err());
        assert!(SparseInteractions::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 1, -1.0)]).is_ok());
    }

    #[test]
    fn row_sums_small() {
        // entry (0,1) = 2 is outside [-1,1], so scale the example by 1/2
        let m = SparseInteractions::from_triplets(2, 2, vec![(0, 0, 0.5), (0, 1, 1.0), (1, 0, -0.5)]).unwrap();
        let sums: Vec<f64> = row_sums(&m).iter().map(|s| s * 2.0).collect();
        assert_eq!(sums, vec![3.0, -1.0]);
    }

    #[test]
    fn sums_of_empty_matrix() {
        let m = SparseInteractions::empty(3, 3);
        assert_eq!(row_sums(&m), vec![0.0; 3]);
        assert_eq!(col_sums(&m), vec![0.0; 3]);
    }

    #[test]
    fn col_sums_cancel_and_identity() {
        let m = SparseInteractions::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 0, -1.0)]).unwrap();
        assert_eq!(col_sums(&m), vec![0.0, 0.0]);
        let eye = SparseInteractions::from_triplets(3, 3, (0..3).map(|i| (i, i, 1.0)).collect()).unwrap();
        assert_eq!(col_sums(&eye), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sums_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = random_sparse(&mut rng, 8, 8, 0.4);
            let d = m.to_dense();
            let mut rows = vec![0.0; 8];
            let mut cols = vec![0.0; 8];
            for i in 0..8 {
                for j in 0..8 {
                    rows[i] += d[(i, j)];
                    cols[j] += d[(i, j)];
                }
            }
            for (a, b) in row_sums(&m).iter().zip(&rows) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in col_sums(&m).iter().zip(&cols) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operator_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_sparse(&mut rng, 7, 5, 0.5);
        let x = DenseMatrix::from_vec(5, 3, (0..15).map(|k| k as f64 - 7.0).collect()).unwrap();
        let y = DenseMatrix::from_vec(7, 2, (0..14).map(|k| (k as f64).sin()).collect()).unwrap();
        assert!(m.apply(&x).max_abs_diff(&m.to_dense().matmul(&x)) < 1e-12);
        assert!(m.apply_transpose(&y).max_abs_diff(&m.to_dense().transpose().matmul(&y)) < 1e-12);
    }

    #[test]
    fn kronecker_of_dense() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0]]);
        let b = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let k = a.kronecker(&b);
        assert_eq!(k, DenseMatrix::from_rows(&[[0.0, 1.0, 0.0, 2.0], [1.0, 0.0, 2.0, 0.0]]));
    }

    proptest! {
        #[test]
        fn rescale_round_trips(ratings in proptest::collection::vec(1u32..=10, 2..60)) {
            prop_assume!(ratings.iter().any(|&r| r != ratings[0]));
            let records: Vec<_> = ratings
                .iter()
                .enumerate()
                .map(|(k, &r)| (k as u64, (k % 7) as u64, r as f64 * 0.5))
                .collect();
            let c = center_and_rescale(&raw(&records)).unwrap();
            prop_assert!(c.scale.divisor > 0.0);
            prop_assert_eq!(c.matrix.nnz() + c.dropped_at_mean, records.len());
            for (i, j, v) in c.matrix.iter() {
                prop_assert!((-1.0..=1.0).contains(&v));
                let original = records
                    .iter()
                    .find(|r| r.0 == c.user_ids[i] && r.1 == c.item_ids[j])
                    .unwrap();
                prop_assert!((c.scale.invert(v) - original.2).abs() <= 1e-12);
            }
        }

        #[test]
        fn marginal_totals_agree(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_sparse(&mut rng, rows, cols, 0.3);
            let total: f64 = m.values().iter().sum();
            let r: f64 = row_sums(&m).iter().sum();
            let c: f64 = col_sums(&m).iter().sum();
            prop_assert!((r - total).abs() <= 1e-9);
            prop_assert!((c - total).abs() <= 1e-9);
        }
    }
}
