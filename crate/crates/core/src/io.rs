//! MovieLens CSV ingestion and the persisted sparse matrix format.
//!
//! Sparse file layout, version 1:
//!
//! ```text
//! kronfrac-sparse 1
//! {"n_rows":..,"n_cols":..,"nnz":..,"scale":{..},"dropped_at_mean":..,"user_ids":[..],"item_ids":[..],"config":..}
//! i,j,value
//! ...
//! ```
//!
//! Entries are 0-based and written in row-major order. Values use the
//! shortest decimal form that round-trips an `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{center_and_rescale, CenteredRatings, RatingScale, RawRating, RawRatings, SparseInteractions};

const SPARSE_MAGIC: &str = "kronfrac-sparse";
const SPARSE_VERSION: u32 = 1;
const MOVIELENS_HEADER: [&str; 4] = ["userId", "movieId", "rating", "timestamp"];

#[derive(Deserialize)]
struct MovieLensRow {
    #[serde(rename = "userId")]
    user_id: u64,
    #[serde(rename = "movieId")]
    item_id: u64,
    rating: f64,
    timestamp: i64,
}

/// Reads MovieLens `ratings.csv` content. Errors carry the 1-based line number
/// of the offending row.
pub fn read_movielens(r: impl Read) -> Result<RawRatings> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(StripCr(r));
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Empty("file has no header and no ratings".into()));
    }
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != MOVIELENS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header '{}', got '{}'", MOVIELENS_HEADER.join(","), found.join(",")),
        });
    }

    let mut records = Vec::new();
    for row in reader.deserialize::<MovieLensRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        records.push(RawRating {
            user_id: row.user_id,
            item_id: row.item_id,
            rating: row.rating,
            timestamp: row.timestamp,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("header present but no rating rows".into()));
    }
    RawRatings::new(records)
}

/// Drops carriage returns so CRLF files report the same line numbers as LF.
struct StripCr<R>(R);

impl<R: Read> Read for StripCr<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        loop {
            let n = self.0.read(buf)?;
            if n == 0 {
                return Ok(0);
            }
            let mut kept = 0;
            for idx in 0..n {
                if buf[idx] != b'\r' {
                    buf[kept] = buf[idx];
                    kept += 1;
                }
            }
            if kept > 0 {
                return Ok(kept);
            }
        }
    }
}

pub fn read_movielens_file(path: impl AsRef<Path>) -> Result<RawRatings> {
    read_movielens(BufReader::new(File::open(path)?))
}

/// Writes ratings in MovieLens CSV form, LF line endings.
pub fn write_movielens(ratings: &RawRatings, w: impl Write) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().from_writer(w);
    writer.write_record(MOVIELENS_HEADER)?;
    for r in ratings.records() {
        writer.write_record([
            r.user_id.to_string(),
            r.item_id.to_string(),
            format!("{:?}", r.rating),
            r.timestamp.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// A centered matrix together with everything needed to map it back to the
/// source ids and rating scale.
#[derive(Debug, Clone)]
pub struct MatrixFile {
    pub matrix: SparseInteractions,
    pub scale: RatingScale,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub dropped_at_mean: usize,
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct SparseHeader {
    n_rows: usize,
    n_cols: usize,
    nnz: usize,
    scale: RatingScale,
    dropped_at_mean: usize,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
    #[serde(default)]
    config: Option<serde_json::Value>,
}

impl From<CenteredRatings> for MatrixFile {
    fn from(c: CenteredRatings) -> Self {
        MatrixFile {
            matrix: c.matrix,
            scale: c.scale,
            user_ids: c.user_ids,
            item_ids: c.item_ids,
            dropped_at_mean: c.dropped_at_mean,
            config: None,
        }
    }
}

impl MatrixFile {
    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = SparseHeader {
            n_rows: self.matrix.n_rows(),
            n_cols: self.matrix.n_cols(),
            nnz: self.matrix.nnz(),
            scale: self.scale,
            dropped_at_mean: self.dropped_at_mean,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
            config: self.config.clone(),
        };
        writeln!(w, "{SPARSE_MAGIC} {SPARSE_VERSION}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for (i, j, v) in self.matrix.iter() {
            writeln!(w, "{i},{j},{v:?}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let magic = lines.next().transpose()?.ok_or_else(|| Error::Empty("matrix file is empty".into()))?;
        if magic.trim_end() != format!("{SPARSE_MAGIC} {SPARSE_VERSION}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected '{SPARSE_MAGIC} {SPARSE_VERSION}', got '{magic}'"),
            });
        }
        let header_line = lines.next().transpose()?.ok_or(Error::Parse {
            line: 2,
            message: "missing header".into(),
        })?;
        let header: SparseHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
            line: 2,
            message: e.to_string(),
        })?;
        if header.user_ids.len() != header.n_rows || header.item_ids.len() != header.n_cols {
            return Err(Error::Parse {
                line: 2,
                message: "id tables do not match matrix dimensions".into(),
            });
        }

        let mut triplets = Vec::with_capacity(header.nnz);
        for (idx, line) in lines.enumerate() {
            let line_no = idx as u64 + 3;
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            triplets.push(parse_triplet(line).map_err(|message| Error::Parse { line: line_no, message })?);
        }
        if triplets.len() != header.nnz {
            return Err(Error::Integrity(format!(
                "header declares {} entries, file holds {}",
                header.nnz,
                triplets.len()
            )));
        }
        let matrix = SparseInteractions::from_triplets(header.n_rows, header.n_cols, triplets)?;
        Ok(MatrixFile {
            matrix,
            scale: header.scale,
            user_ids: header.user_ids,
            item_ids: header.item_ids,
            dropped_at_mean: header.dropped_at_mean,
            config: header.config,
        })
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

fn parse_triplet(line: &str) -> std::result::Result<(u32, u32, f64), String> {
    let mut fields = line.split(',');
    let mut next = |what: &str| fields.next().map(str::trim).ok_or(format!("missing {what}"));
    let i = next("row")?.parse::<u32>().map_err(|e| format!("bad row index: {e}"))?;
    let j = next("column")?.parse::<u32>().map_err(|e| format!("bad column index: {e}"))?;
    let v = next("value")?.parse::<f64>().map_err(|e| format!("bad value: {e}"))?;
    if fields.next().is_some() {
        return Err("too many fields".into());
    }
    Ok((i, j, v))
}

/// Reads, centers and rescales a MovieLens CSV file.
pub fn ingest(path: impl AsRef<Path>) -> Result<MatrixFile> {
    let raw = read_movielens_file(path)?;
    Ok(center_and_rescale(&raw)?.into())
}
