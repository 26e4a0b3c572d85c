//! Construction of the small reduced matrix `R̂` from the leading singular
//! structure of `R`.
//!
//! The pipeline: truncated SVD of `R` with `k = min(m', n')`, area-average
//! resizing of `U` to `m'` rows and of `V` to `n'` columns, polar
//! re-orthogonalization of both, reconstruction `Ũ Σ Ṽ`, and division by the
//! value range so the result lies in `[-1, 1]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, LinearOperator, SparseInteractions};
use crate::spectra::{orthogonalize_columns, orthogonalize_rows, truncated_svd, SvdParams};

pub const RESIZE_METHOD: &str = "area-average";

const FORMAT_MAGIC: &str = "kronfrac-reduced";
const FORMAT_VERSION: u32 = 1;

/// Box-filter weights mapping `n_in` cells onto `n_out` cells (`n_out × n_in`).
///
/// Output cell `I` covers input interval `[I·n_in/n_out, (I+1)·n_in/n_out)`.
/// Lengths are tracked in units of `1/n_out` so every overlap is an integer.
fn box_weights(n_in: usize, n_out: usize) -> DenseMatrix {
    let mut w = DenseMatrix::zeros(n_out, n_in);
    for out in 0..n_out {
        let lo = out * n_in;
        let hi = (out + 1) * n_in;
        for i in lo / n_out..hi.div_ceil(n_out) {
            let cell_lo = i * n_out;
            let cell_hi = (i + 1) * n_out;
            let overlap = hi.min(cell_hi).saturating_sub(lo.max(cell_lo));
            if overlap > 0 {
                w[(out, i)] = overlap as f64 / n_in as f64;
            }
        }
    }
    w
}

/// Area-weighted downscaling: each output cell is the mean of the input over
/// the rectangle it covers, with partially covered cells weighted by overlap.
pub fn resize_average(m: &DenseMatrix, out_rows: usize, out_cols: usize) -> Result<DenseMatrix> {
    let (rows, cols) = m.shape();
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::invalid_argument("resize target dimensions must be at least 1"));
    }
    if out_rows > rows || out_cols > cols {
        return Err(Error::invalid_argument(format!(
            "resize from {rows}x{cols} to {out_rows}x{out_cols} would upscale"
        )));
    }
    let row_w = box_weights(rows, out_rows);
    let col_w = box_weights(cols, out_cols);
    Ok(row_w.matmul(m).matmul(&col_w.transpose()))
}

/// How a [`ReducedMatrix`] was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub k: usize,
    pub source_rows: usize,
    pub source_cols: usize,
    pub resize_method: String,
    /// Maximum of the reconstruction before division by the range.
    pub rescale_max: f64,
    /// Minimum of the reconstruction before division by the range.
    pub rescale_min: f64,
    pub svd: SvdParams,
    /// Leading singular values of the source matrix.
    pub source_sigma: Vec<f64>,
}

/// Small dense left Kronecker factor with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedMatrix {
    matrix: DenseMatrix,
    provenance: Option<Provenance>,
    config: Option<serde_json::Value>,
}

impl ReducedMatrix {
    /// Wraps a hand-made factor. Values must be finite and within `[-1, 1]`.
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        Self::with_provenance(matrix, None)
    }

    fn with_provenance(matrix: DenseMatrix, provenance: Option<Provenance>) -> Result<Self> {
        if matrix.n_rows() == 0 || matrix.n_cols() == 0 {
            return Err(Error::invalid_matrix("reduced matrix must be non-empty"));
        }
        if let Some(v) = matrix
            .as_slice()
            .iter()
            .find(|v| !(v.is_finite() && (-1.0..=1.0).contains(*v)))
        {
            return Err(Error::invalid_matrix(format!(
                "reduced matrix value {v} outside [-1, 1]"
            )));
        }
        Ok(ReducedMatrix { matrix, provenance, config: None })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Run configuration echoed into the saved file.
    pub fn config(&self) -> Option<&serde_json::Value> {
        self.config.as_ref()
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.n_cols()
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    /// Writes the versioned text format: a magic line, a JSON header line,
    /// then one line of comma-separated values per row. Values are printed
    /// with the shortest representation that round-trips `f64`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = ReducedHeader {
            rows: self.n_rows(),
            cols: self.n_cols(),
            provenance: self.provenance.clone(),
            config: self.config.clone(),
        };
        writeln!(w, "{FORMAT_MAGIC} {FORMAT_VERSION}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for i in 0..self.n_rows() {
            let line: Vec<String> = self.matrix.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut next_line = |n: u64| -> Result<String> {
            lines.next().transpose()?.ok_or(Error::Parse {
                line: n,
                message: "unexpected end of file".into(),
            })
        };
        let magic = next_line(1)?;
        if magic.trim_end() != format!("{FORMAT_MAGIC} {FORMAT_VERSION}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected '{FORMAT_MAGIC} {FORMAT_VERSION}', got '{magic}'"),
            });
        }
        let header: ReducedHeader = serde_json::from_str(&next_line(2)?).map_err(|e| Error::Parse {
            line: 2,
            message: e.to_string(),
        })?;
        let mut data = Vec::with_capacity(header.rows * header.cols);
        for i in 0..header.rows {
            let line_no = 3 + i as u64;
            let line = next_line(line_no)?;
            let before = data.len();
            for field in line.trim_end().split(',') {
                data.push(field.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad value '{field}': {e}"),
                })?);
            }
            if data.len() - before != header.cols {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} values, found {}", header.cols, data.len() - before),
                });
            }
        }
        let matrix = DenseMatrix::from_vec(header.rows, header.cols, data)?;
        let mut reduced = Self::with_provenance(matrix, header.provenance)?;
        reduced.config = header.config;
        Ok(reduced)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct ReducedHeader {
    rows: usize,
    cols: usize,
    provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Everything produced while reducing; `reduced` is the deliverable, the rest
/// is kept for inspection and verification.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub reduced: ReducedMatrix,
    /// Column-orthonormal `m'×k` factor.
    pub u_tilde: DenseMatrix,
    /// Row-orthonormal `k×n'` factor.
    pub v_tilde: DenseMatrix,
    pub sigma: Vec<f64>,
    /// `Ũ Σ Ṽ` before division by its value range.
    pub unscaled: DenseMatrix,
}

/// Reduces `R` to an `rows×cols` matrix. Requires `4·rows ≤ m` and `4·cols ≤ n`.
pub fn reduce(r: &SparseInteractions, rows: usize, cols: usize, svd: &SvdParams) -> Result<Reduction> {
    let (m, n) = r.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid_argument("reduced dimensions must be at least 1"));
    }
    if 4 * rows > m || 4 * cols > n {
        return Err(Error::invalid_argument(format!(
            "reduced shape {rows}x{cols} is not at most a quarter of {m}x{n} along each axis"
        )));
    }
    reduce_operator(r, rows, cols, svd)
}

/// The reduction pipeline without the size-ratio guard. `svd.rank` is
/// overridden with `min(rows, cols)`.
pub fn reduce_operator<O: LinearOperator + ?Sized>(
    r: &O,
    rows: usize,
    cols: usize,
    svd: &SvdParams,
) -> Result<Reduction> {
    let (m, n) = (r.n_rows(), r.n_cols());
    if rows == 0 || cols == 0 || rows > m || cols > n {
        return Err(Error::invalid_argument(format!(
            "cannot reduce {m}x{n} to {rows}x{cols}"
        )));
    }
    let k = rows.min(cols);
    let params = SvdParams { rank: k, ..*svd };
    let triplet = truncated_svd(r, &params)?;

    let u_bar = resize_average(&triplet.u, rows, k)?;
    let v_bar = resize_average(&triplet.v, k, cols)?;
    let hint = |e: Error| match e {
        Error::RankDeficient(msg) => Error::RankDeficient(format!(
            "resized singular vectors lost rank ({msg}); try a smaller k via smaller reduced dimensions"
        )),
        other => other,
    };
    let u_tilde = orthogonalize_columns(&u_bar).map_err(hint)?;
    let v_tilde = orthogonalize_rows(&v_bar).map_err(hint)?;

    let unscaled = u_tilde.scale_columns(&triplet.sigma).matmul(&v_tilde);
    let (max, min) = (unscaled.max(), unscaled.min());
    if !(min <= 0.0 && 0.0 <= max) || max == min {
        return Err(Error::InvalidMatrix(format!(
            "reconstruction range [{min}, {max}] does not straddle zero; cannot rescale into [-1, 1]"
        )));
    }
    let range = max - min;
    let scaled = unscaled.map(|v| v / range);
    let provenance = Provenance {
        k,
        source_rows: m,
        source_cols: n,
        resize_method: RESIZE_METHOD.to_string(),
        rescale_max: max,
        rescale_min: min,
        svd: params,
        source_sigma: triplet.sigma.clone(),
    };
    Ok(Reduction {
        reduced: ReducedMatrix::with_provenance(scaled, Some(provenance))?,
        u_tilde,
        v_tilde,
        sigma: triplet.sigma,
        unscaled,
    })
}
