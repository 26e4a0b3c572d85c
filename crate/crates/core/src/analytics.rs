//! Statistics of expanded datasets: analytic predictions from the factors and
//! empirical measurements of materialized shards.
//!
//! For `K = A ⊗ B` the multiset of row sums of `K` is the Minkowski product of
//! the row sums of `A` and `B` (likewise columns), and the nonzero singular
//! values of `K` are the Minkowski product of those of `A` and `B`. Multisets
//! are used throughout so repeated values keep their multiplicity.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expander::{read_shard, Manifest};
use crate::matrix::{col_sums, row_sums, DenseMatrix, SparseInteractions};
use crate::spectra::{truncated_svd, SvdParams};

/// Full Minkowski products larger than this must use [`minkowski_top_n`].
pub const MINKOWSKI_FULL_LIMIT: u64 = 100_000_000;

/// Ranked values kept by default when a product is too large to enumerate.
pub const DEFAULT_TOP_N: usize = 1_000_000;

fn sort_desc(v: &mut [f64]) {
    v.sort_unstable_by(|a, b| b.total_cmp(a));
}

/// All pairwise products `{a·b}`, sorted non-increasing.
pub fn minkowski_product(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let len = a.len() as u64 * b.len() as u64;
    if len > MINKOWSKI_FULL_LIMIT {
        return Err(Error::SizeGuard(format!(
            "Minkowski product of {} x {} values exceeds {MINKOWSKI_FULL_LIMIT}; use the top-N mode",
            a.len(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(len as usize);
    for &x in a {
        out.extend(b.iter().map(|&y| x * y));
    }
    sort_desc(&mut out);
    Ok(out)
}

/// Heap entry ordering candidate products by magnitude.
#[derive(PartialEq)]
struct Cand {
    mag: f64,
    i: usize,
    j: usize,
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.mag
            .total_cmp(&other.mag)
            .then_with(|| other.i.cmp(&self.i))
            .then_with(|| other.j.cmp(&self.j))
    }
}

/// Up to `limit` products of magnitudes `x[i]·y[j]`, largest first when
/// `largest` is set and smallest first otherwise. `x` and `y` must already be
/// sorted in the matching order.
fn lattice_walk(x: &[f64], y: &[f64], limit: usize, largest: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(limit.min(x.len() * y.len()));
    if x.is_empty() || y.is_empty() || limit == 0 {
        return out;
    }
    let key = |m: f64| if largest { m } else { -m };
    let mut heap: BinaryHeap<Cand> = (0..x.len().min(limit))
        .map(|i| Cand { mag: key(x[i] * y[0]), i, j: 0 })
        .collect();
    while out.len() < limit {
        let Some(c) = heap.pop() else { break };
        out.push(x[c.i] * y[c.j]);
        if c.j + 1 < y.len() {
            heap.push(Cand { mag: key(x[c.i] * y[c.j + 1]), i: c.i, j: c.j + 1 });
        }
    }
    out
}

fn merge_desc(a: &[f64], b: &[f64], limit: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(limit.min(a.len() + b.len()));
    let (mut i, mut j) = (0, 0);
    while out.len() < limit && (i < a.len() || j < b.len()) {
        if j >= b.len() || (i < a.len() && a[i] >= b[j]) {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out
}

/// The `n` largest elements of the Minkowski product, sorted non-increasing,
/// without enumerating the whole product.
///
/// Inputs are split by sign. Positive products come from `(+,+)` and `(−,−)`
/// pairs in decreasing magnitude, then zeros, then negative products from
/// `(+,−)` and `(−,+)` pairs in increasing magnitude; each stream is an exact
/// best-first walk over a sorted product lattice.
pub fn minkowski_top_n(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let split = |v: &[f64]| {
        let mut pos: Vec<f64> = v.iter().copied().filter(|&x| x > 0.0).collect();
        let mut neg: Vec<f64> = v.iter().filter(|&&x| x < 0.0).map(|x| -x).collect();
        let zeros = (v.len() - pos.len() - neg.len()) as u64;
        sort_desc(&mut pos);
        sort_desc(&mut neg);
        (pos, neg, zeros)
    };
    let (a_pos, a_neg, a_zero) = split(a);
    let (b_pos, b_neg, b_zero) = split(b);

    let positives = merge_desc(
        &lattice_walk(&a_pos, &b_pos, n, true),
        &lattice_walk(&a_neg, &b_neg, n, true),
        n,
    );
    let mut out = positives;
    if out.len() == n {
        return out;
    }
    let zeros = a_zero * b.len() as u64 + b_zero * a.len() as u64 - a_zero * b_zero;
    let room = (n - out.len()) as u64;
    out.extend(std::iter::repeat_n(0.0, zeros.min(room) as usize));
    if out.len() == n {
        return out;
    }
    let rest = n - out.len();
    let asc = |v: &[f64]| v.iter().rev().copied().collect::<Vec<f64>>();
    let neg_small_first = merge_desc(
        &lattice_walk(&asc(&a_pos), &asc(&b_neg), rest, false)
            .into_iter()
            .map(|m| -m)
            .collect::<Vec<_>>(),
        &lattice_walk(&asc(&a_neg), &asc(&b_pos), rest, false)
            .into_iter()
            .map(|m| -m)
            .collect::<Vec<_>>(),
        rest,
    );
    out.extend(neg_small_first);
    out
}

/// Sorted (non-increasing) multiset, possibly only a leading subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub values: Vec<f64>,
    /// Size of the complete multiset.
    pub total: u64,
}

impl Ranked {
    pub fn full(mut values: Vec<f64>) -> Self {
        sort_desc(&mut values);
        let total = values.len() as u64;
        Ranked { values, total }
    }

    pub fn is_truncated(&self) -> bool {
        (self.values.len() as u64) < self.total
    }
}

fn minkowski_ranked(a: &[f64], b: &[f64], top_n: usize) -> Ranked {
    let total = a.len() as u64 * b.len() as u64;
    if total <= MINKOWSKI_FULL_LIMIT {
        Ranked { values: minkowski_product(a, b).expect("under limit"), total }
    } else {
        Ranked { values: minkowski_top_n(a, b, top_n), total }
    }
}

/// Row- and column-sum multisets of an expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedSums {
    pub row_sums: Ranked,
    pub col_sums: Ranked,
}

/// Row and column sums of `R̂ ⊗ R` from the sums of the factors. Products
/// with more than [`MINKOWSKI_FULL_LIMIT`] elements keep only the top `top_n`.
pub fn predict_expanded_sums(reduced: &DenseMatrix, base: &SparseInteractions, top_n: usize) -> ExpandedSums {
    ExpandedSums {
        row_sums: minkowski_ranked(&reduced.row_sums(), &row_sums(base), top_n),
        col_sums: minkowski_ranked(&reduced.col_sums(), &col_sums(base), top_n),
    }
}

/// Predicted spectrum of `R̂ ⊗ R` with the length of its certified prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPrediction {
    /// All products of the supplied values, non-increasing.
    pub values: Vec<f64>,
    /// `values[..certified]` are exactly the leading singular values of the
    /// expansion.
    pub certified: usize,
    /// `max(σ̂)·σ_R[k−1]`: the largest product that could involve an unknown
    /// singular value of `R`.
    pub threshold: f64,
}

/// Predicts the singular values of `R̂ ⊗ R` from the full spectrum of `R̂`
/// and the leading `k` singular values of `R`.
///
/// Any product involving an unknown singular value of `R` is at most
/// `max(σ̂)·σ_R[k−1]`, so every predicted value at or above that bound is
/// certified to be in its true rank position.
pub fn predict_expanded_spectrum(sigma_hat: &[f64], sigma_r: &[f64]) -> Result<SpectrumPrediction> {
    let nonzero = |v: &[f64]| v.iter().copied().filter(|&s| s > 0.0).collect::<Vec<f64>>();
    let hat = nonzero(sigma_hat);
    let r = nonzero(sigma_r);
    if hat.is_empty() || r.is_empty() {
        return Err(Error::Empty("spectrum prediction needs nonzero singular values on both sides".into()));
    }
    let values = minkowski_product(&hat, &r)?;
    let hat_max = hat.iter().copied().fold(0.0, f64::max);
    let r_min = r.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = hat_max * r_min;
    let certified = values.iter().take_while(|&&v| v >= threshold).count();
    Ok(SpectrumPrediction { values, certified, threshold })
}

/// Draws `count` values uniformly from the nonzeros of `R̂ ⊗ R` without
/// materializing it: a uniform nonzero of `R̂` times a uniform nonzero of `R`.
pub fn sample_expanded_ratings(
    reduced: &DenseMatrix,
    base: &SparseInteractions,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::invalid_argument("sample count must be at least 1"));
    }
    let hat: Vec<f64> = reduced.as_slice().iter().copied().filter(|&v| v != 0.0).collect();
    let values = base.values();
    if hat.is_empty() || values.is_empty() {
        return Err(Error::Empty("cannot sample from an expansion with no nonzeros".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let a = hat[rng.random_range(0..hat.len() as u64) as usize];
            let b = values[rng.random_range(0..values.len() as u64) as usize];
            a * b
        })
        .collect())
}

/// `(rank, value)` rows for plotting, ranks 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedTable {
    pub rows: Vec<(usize, f64)>,
    /// Non-positive values dropped from the table.
    pub removed: usize,
}

/// Sorts non-increasing and optionally removes non-positive values so the
/// table can be drawn on log-log axes.
pub fn ranked_report(values: &[f64], drop_nonpositive: bool) -> RankedTable {
    let mut kept: Vec<f64> = if drop_nonpositive {
        values.iter().copied().filter(|&v| v > 0.0).collect()
    } else {
        values.to_vec()
    };
    let removed = values.len() - kept.len();
    sort_desc(&mut kept);
    RankedTable {
        rows: kept.into_iter().enumerate().map(|(r, v)| (r + 1, v)).collect(),
        removed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatSource {
    Original,
    Reduced,
    AnalyticExpanded,
    EmpiricalExpanded,
}

/// Ranked statistics of one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StatReport {
    pub source: StatSource,
    pub row_sums: Ranked,
    pub col_sums: Ranked,
    pub singular_values: Ranked,
    /// Number of leading singular values known to be exact, when the
    /// spectrum comes from a prediction.
    pub certified_singular_values: Option<usize>,
    pub rating_values: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatSidecar {
    pub source: StatSource,
    pub tables: Vec<TableMeta>,
    pub certified_singular_values: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TableMeta {
    pub file: String,
    pub rows: usize,
    pub removed_nonpositive: usize,
    pub total: u64,
    pub truncated: bool,
}

impl StatReport {
    /// Sums and spectrum of a sparse rating matrix; the spectrum is the
    /// leading `svd.rank` singular values.
    pub fn of_matrix(m: &SparseInteractions, svd: Option<&SvdParams>) -> Result<Self> {
        let singular_values = match svd {
            Some(p) => {
                let t = truncated_svd(m, p)?;
                Ranked { values: t.sigma, total: m.n_rows().min(m.n_cols()) as u64 }
            }
            None => Ranked { values: Vec::new(), total: m.n_rows().min(m.n_cols()) as u64 },
        };
        Ok(StatReport {
            source: StatSource::Original,
            row_sums: Ranked::full(row_sums(m)),
            col_sums: Ranked::full(col_sums(m)),
            singular_values,
            certified_singular_values: None,
            rating_values: None,
        })
    }

    /// Sums and full spectrum of a small dense matrix.
    pub fn of_reduced(m: &DenseMatrix) -> Self {
        StatReport {
            source: StatSource::Reduced,
            row_sums: Ranked::full(m.row_sums()),
            col_sums: Ranked::full(m.col_sums()),
            singular_values: Ranked::full(crate::spectra::singular_values(m)),
            certified_singular_values: None,
            rating_values: None,
        }
    }

    /// Analytic statistics of `R̂ ⊗ R`, using the leading `sigma_r` of `R`.
    pub fn analytic(reduced: &DenseMatrix, base: &SparseInteractions, sigma_r: &[f64], top_n: usize) -> Result<Self> {
        let sums = predict_expanded_sums(reduced, base, top_n);
        let sigma_hat = crate::spectra::singular_values(reduced);
        let spectrum = predict_expanded_spectrum(&sigma_hat, sigma_r)?;
        let full_rank = (reduced.n_rows().min(reduced.n_cols()) * base.n_rows().min(base.n_cols())) as u64;
        Ok(StatReport {
            source: StatSource::AnalyticExpanded,
            row_sums: sums.row_sums,
            col_sums: sums.col_sums,
            singular_values: Ranked { values: spectrum.values, total: full_rank },
            certified_singular_values: Some(spectrum.certified),
            rating_values: None,
        })
    }

    /// Writes `row_sums.tsv`, `col_sums.tsv`, `singular_values.tsv`, optional
    /// `rating_values.tsv`, and a `report.json` sidecar into `dir`.
    pub fn write_tsv(&self, dir: impl AsRef<Path>, drop_nonpositive: bool, config: Option<serde_json::Value>) -> Result<StatSidecar> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut tables = Vec::new();
        let mut emit = |name: &str, ranked: &Ranked, drop: bool| -> Result<()> {
            let table = ranked_report(&ranked.values, drop);
            let file = format!("{name}.tsv");
            let mut w = BufWriter::new(File::create(dir.join(&file))?);
            writeln!(w, "rank\tvalue")?;
            for (rank, value) in &table.rows {
                writeln!(w, "{rank}\t{value:?}")?;
            }
            w.flush()?;
            tables.push(TableMeta {
                file,
                rows: table.rows.len(),
                removed_nonpositive: table.removed,
                total: ranked.total,
                truncated: ranked.is_truncated(),
            });
            Ok(())
        };
        emit("row_sums", &self.row_sums, drop_nonpositive)?;
        emit("col_sums", &self.col_sums, drop_nonpositive)?;
        emit("singular_values", &self.singular_values, drop_nonpositive)?;
        if let Some(ratings) = &self.rating_values {
            // rating values are signed by nature; never filtered
            emit("rating_values", &Ranked::full(ratings.clone()), false)?;
        }
        let sidecar = StatSidecar {
            source: self.source,
            tables,
            certified_singular_values: self.certified_singular_values,
            config,
        };
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(sidecar)
    }
}

/// Options for [`empirical_stats`].
#[derive(Debug, Clone)]
pub struct EmpiricalOptions {
    /// Upper bound on bytes allocated for accumulators and, when a spectrum is
    /// requested, the in-memory copy of the expansion.
    pub memory_budget: u64,
    pub svd: Option<SvdParams>,
}

impl Default for EmpiricalOptions {
    fn default() -> Self {
        EmpiricalOptions { memory_budget: 4 << 30, svd: None }
    }
}

/// Rough bytes needed to read an expansion back.
pub fn empirical_memory_estimate(manifest: &Manifest, with_svd: bool) -> u64 {
    let accumulators = 8 * (manifest.dims[0] + manifest.dims[1]);
    // triplets plus the row- and column-compressed copies
    let matrix = if with_svd { 48 * manifest.nnz_total + 8 * (manifest.dims[0] + manifest.dims[1]) } else { 0 };
    accumulators + matrix
}

/// Reads every shard listed in the manifest in `dir`, checking checksums and
/// entry counts, and returns exact row and column sums (plus a truncated SVD
/// if requested).
pub fn empirical_stats(dir: impl AsRef<Path>, options: &EmpiricalOptions) -> Result<StatReport> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    if manifest.dry_run {
        return Err(Error::Incomplete("manifest comes from a dry run; no shards were written".into()));
    }
    if !manifest.complete || manifest.shards.iter().any(|s| !s.complete) {
        return Err(Error::Incomplete("manifest lists incomplete shards".into()));
    }
    let needed = empirical_memory_estimate(&manifest, options.svd.is_some());
    if needed > options.memory_budget {
        return Err(Error::SizeGuard(format!(
            "reading a {}x{} expansion needs about {needed} bytes, over the {} byte budget",
            manifest.dims[0], manifest.dims[1], options.memory_budget
        )));
    }
    let (rows, cols) = (manifest.dims[0] as usize, manifest.dims[1] as usize);
    if options.svd.is_some() && (rows > u32::MAX as usize || cols > u32::MAX as usize) {
        return Err(Error::SizeGuard("expansion too large for an in-memory SVD".into()));
    }
    let mut row_acc = vec![0.0; rows];
    let mut col_acc = vec![0.0; cols];
    let mut triplets = Vec::new();
    let mut total = 0u64;
    let mut out_of_range = None;

    for shard in &manifest.shards {
        let (count, checksum) = read_shard(dir.join(&shard.name), |r, c, v| {
            if r as usize >= rows || c as usize >= cols {
                out_of_range.get_or_insert((r, c));
                return;
            }
            row_acc[r as usize] += v;
            col_acc[c as usize] += v;
            if options.svd.is_some() {
                triplets.push((r as u32, c as u32, v));
            }
        })?;
        if let Some((r, c)) = out_of_range {
            return Err(Error::Integrity(format!("{}: entry ({r}, {c}) outside the manifest dimensions", shard.name)));
        }
        if checksum != shard.checksum {
            return Err(Error::Integrity(format!(
                "{}: checksum {checksum} does not match manifest {}",
                shard.name, shard.checksum
            )));
        }
        if count != shard.nnz {
            return Err(Error::Integrity(format!(
                "{}: {count} entries, manifest says {}",
                shard.name, shard.nnz
            )));
        }
        total += count;
    }
    if total != manifest.nnz_total {
        return Err(Error::Integrity(format!(
            "shards hold {total} entries, manifest says {}",
            manifest.nnz_total
        )));
    }

    let singular_values = match &options.svd {
        Some(params) => {
            let m = SparseInteractions::from_triplets(rows, cols, triplets)?;
            let t = truncated_svd(&m, params)?;
            Ranked { values: t.sigma, total: rows.min(cols) as u64 }
        }
        None => Ranked { values: Vec::new(), total: rows.min(cols) as u64 },
    };
    Ok(StatReport {
        source: StatSource::EmpiricalExpanded,
        row_sums: Ranked::full(row_acc),
        col_sums: Ranked::full(col_acc),
        singular_values,
        certified_singular_values: None,
        rating_values: None,
    })
}

/// Largest element-wise difference between two ranked multisets of equal
/// length, or `None` if the lengths differ.
pub fn max_ranked_difference(a: &[f64], b: &[f64]) -> Option<f64> {
    (a.len() == b.len()).then(|| a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())))
}
