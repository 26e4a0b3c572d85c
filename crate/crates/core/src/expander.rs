//! Streaming Kronecker expansion `R̂ ⊗_F R` into sharded CSV output.
//!
//! Block `(î, ĵ)` of the output is `F(R̂[î, ĵ], R, ω)` where `ω` is derived from
//! the master seed and the block coordinates by [`block_seed`], so every block
//! can be produced independently of every other. One shard holds one block-row
//! of `R̂`; its bytes are a pure function of the plan.

use std::fmt;
use std::fs::{self, File};
use std::hash::Hasher;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{RatingScale, SparseInteractions};
use crate::reducer::ReducedMatrix;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKSUM_ALGORITHM: &str = "fnv1a64";

/// Maps a block index and an offset inside the block to a 0-based global index.
pub fn index_map(block: usize, local: usize, block_len: usize) -> Result<u64> {
    if local >= block_len {
        return Err(Error::invalid_argument(format!(
            "local index {local} outside block of length {block_len}"
        )));
    }
    Ok(block as u64 * block_len as u64 + local as u64)
}

/// Inverse of [`index_map`]: `(global div block_len, global mod block_len)`.
pub fn index_unmap(global: u64, block_len: usize) -> (usize, usize) {
    let len = block_len as u64;
    ((global / len) as usize, (global % len) as usize)
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const MIX_MUL_1: u64 = 0xbf58_476d_1ce4_e5b9;
const MIX_MUL_2: u64 = 0x94d0_49bb_1331_11eb;
const ROW_MUL: u64 = 0xd1b5_4a32_d192_ed03;
const COL_MUL: u64 = 0xaef1_7502_108e_f2d9;

/// SplitMix64 output finalizer (a bijection on `u64`).
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Per-block seed `ω` from the master seed and block coordinates.
///
/// `ω = f(f(f(seed + γ) ⊕ (î+1)·c_r) ⊕ (ĵ+1)·c_c)` with `f` the SplitMix64
/// finalizer; the constants are recorded in every manifest.
pub fn block_seed(master_seed: u64, i_hat: usize, j_hat: usize) -> u64 {
    let h = mix64(master_seed.wrapping_add(GOLDEN_GAMMA));
    let h = mix64(h ^ (i_hat as u64).wrapping_add(1).wrapping_mul(ROW_MUL));
    mix64(h ^ (j_hat as u64).wrapping_add(1).wrapping_mul(COL_MUL))
}

/// Description of [`block_seed`] written into manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerSpec {
    pub name: String,
    pub formula: String,
    pub gamma: String,
    pub finalizer_multipliers: [String; 2],
    pub finalizer_shifts: [u32; 3],
    pub row_multiplier: String,
    pub col_multiplier: String,
    pub block_rng: String,
}

impl MixerSpec {
    pub fn current() -> Self {
        let hex = |v: u64| format!("0x{v:016x}");
        MixerSpec {
            name: "splitmix64-chain".into(),
            formula: "f(f(f(seed + gamma) ^ (i_hat+1)*row) ^ (j_hat+1)*col)".into(),
            gamma: hex(GOLDEN_GAMMA),
            finalizer_multipliers: [hex(MIX_MUL_1), hex(MIX_MUL_2)],
            finalizer_shifts: [30, 27, 31],
            row_multiplier: hex(ROW_MUL),
            col_multiplier: hex(COL_MUL),
            block_rng: "chacha8 seeded from u64 block seed".into(),
        }
    }
}

/// Uniform random permutation of `0..n` by Fisher–Yates.
fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut p: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        p.swap(i, j);
    }
    p
}

/// `k` distinct indices from `0..n`, uniformly at random, in ascending order.
fn choose_sorted(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..(n - i) as u64) as usize;
        p.swap(i, j);
    }
    let mut chosen = p[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Exact Kronecker block `a·R`.
    Plain,
    /// `a·R` with rows and columns independently permuted per block.
    Shuffle,
    /// `a·G(R, ω)` where `G` samples rows and columns of `R`.
    Sketch,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Shuffle => "shuffle",
            Variant::Sketch => "sketch",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "shuffle" => Ok(Variant::Shuffle),
            "sketch" => Ok(Variant::Sketch),
            other => Err(Error::invalid_argument(format!("unknown variant '{other}'"))),
        }
    }
}

/// The block generator `F(a, R, ω)`.
///
/// Implementations must be pure functions of their arguments so that blocks
/// can be generated in any order on any thread.
pub trait BlockTransform: Sync {
    /// Shape `(p, q)` of every block.
    fn block_shape(&self, base: &SparseInteractions) -> (usize, usize);

    /// Calls `emit(row, col, value)` for each nonzero of the block, with
    /// block-local coordinates.
    fn for_each_entry(
        &self,
        a: f64,
        base: &SparseInteractions,
        seed: u64,
        emit: &mut dyn FnMut(usize, usize, f64),
    );
}

pub struct PlainBlock;

impl BlockTransform for PlainBlock {
    fn block_shape(&self, base: &SparseInteractions) -> (usize, usize) {
        base.shape()
    }

    fn for_each_entry(&self, a: f64, base: &SparseInteractions, _seed: u64, emit: &mut dyn FnMut(usize, usize, f64)) {
        if a == 0.0 {
            return;
        }
        for (i, j, v) in base.iter() {
            emit(i, j, a * v);
        }
    }
}

pub struct ShuffleBlock;

impl BlockTransform for ShuffleBlock {
    fn block_shape(&self, base: &SparseInteractions) -> (usize, usize) {
        base.shape()
    }

    fn for_each_entry(&self, a: f64, base: &SparseInteractions, seed: u64, emit: &mut dyn FnMut(usize, usize, f64)) {
        if a == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = permutation(base.n_rows(), &mut rng);
        let cols = permutation(base.n_cols(), &mut rng);
        for (i, j, v) in base.iter() {
            emit(rows[i] as usize, cols[j] as usize, a * v);
        }
    }
}

pub struct SketchBlock {
    pub rows: usize,
    pub cols: usize,
}

impl BlockTransform for SketchBlock {
    fn block_shape(&self, _base: &SparseInteractions) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn for_each_entry(&self, a: f64, base: &SparseInteractions, seed: u64, emit: &mut dyn FnMut(usize, usize, f64)) {
        if a == 0.0 {
            return;
        }
        let s = sketch(base, self.rows, self.cols, seed).expect("sketch dims validated by the plan");
        for (i, j, v) in s.matrix.iter() {
            emit(i, j, a * v);
        }
    }
}

/// Block entries `(row, col, value)` in block-local coordinates.
pub type Block = Vec<(usize, usize, f64)>;

/// `F(a, R, ω)` for the plain and shuffle variants, materialized.
pub fn emit_block(a: f64, base: &SparseInteractions, seed: u64, variant: Variant) -> Result<Block> {
    let mut out = Vec::with_capacity(if a == 0.0 { 0 } else { base.nnz() });
    let mut push = |i, j, v| out.push((i, j, v));
    match variant {
        Variant::Plain => PlainBlock.for_each_entry(a, base, seed, &mut push),
        Variant::Shuffle => ShuffleBlock.for_each_entry(a, base, seed, &mut push),
        Variant::Sketch => {
            return Err(Error::invalid_argument(
                "sketch blocks need sketch dimensions; use `sketch`",
            ))
        }
    }
    Ok(out)
}

/// A random sub-matrix of `A` together with the rows and columns it kept.
#[derive(Debug, Clone)]
pub struct Sketch {
    pub matrix: SparseInteractions,
    /// Source row of each sketch row, ascending.
    pub rows: Vec<usize>,
    /// Source column of each sketch column, ascending.
    pub cols: Vec<usize>,
}

/// Keeps `rows` distinct rows and `cols` distinct columns of `a`, chosen
/// uniformly at random from `seed`, preserving their relative order.
pub fn sketch(a: &SparseInteractions, rows: usize, cols: usize, seed: u64) -> Result<Sketch> {
    let (m, n) = a.shape();
    if rows == 0 || cols == 0 || rows > m || cols > n {
        return Err(Error::invalid_argument(format!(
            "sketch of {rows}x{cols} from a {m}x{n} matrix"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_sel = choose_sorted(m, rows, &mut rng);
    let col_sel = choose_sorted(n, cols, &mut rng);
    let mut col_pos = vec![u32::MAX; n];
    for (local, &j) in col_sel.iter().enumerate() {
        col_pos[j] = local as u32;
    }
    let mut triplets = Vec::new();
    for (local_i, &i) in row_sel.iter().enumerate() {
        for (j, v) in a.row(i) {
            if col_pos[j] != u32::MAX {
                triplets.push((local_i as u32, col_pos[j], v));
            }
        }
    }
    Ok(Sketch {
        matrix: SparseInteractions::from_triplets(rows, cols, triplets)?,
        rows: row_sel,
        cols: col_sel,
    })
}

/// Everything that determines the content of an expansion.
#[derive(Debug, Clone)]
pub struct ExpansionPlan<'a> {
    pub variant: Variant,
    pub master_seed: u64,
    pub reduced: &'a ReducedMatrix,
    pub base: &'a SparseInteractions,
    pub rating_scale: Option<RatingScale>,
    pub sketch_dims: Option<(usize, usize)>,
    /// Echo of the invocation that produced the artifact.
    pub config: Option<serde_json::Value>,
}

impl<'a> ExpansionPlan<'a> {
    pub fn new(reduced: &'a ReducedMatrix, base: &'a SparseInteractions, variant: Variant, master_seed: u64) -> Self {
        ExpansionPlan {
            variant,
            master_seed,
            reduced,
            base,
            rating_scale: None,
            sketch_dims: None,
            config: None,
        }
    }

    pub fn with_sketch_dims(mut self, rows: usize, cols: usize) -> Self {
        self.sketch_dims = Some((rows, cols));
        self
    }

    pub fn with_rating_scale(mut self, scale: RatingScale) -> Self {
        self.rating_scale = Some(scale);
        self
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, self.sketch_dims) {
            (Variant::Sketch, None) => Err(Error::invalid_argument("sketch variant needs sketch dimensions")),
            (Variant::Sketch, Some((r, c))) => {
                let (m, n) = self.base.shape();
                if r == 0 || c == 0 || r > m || c > n {
                    Err(Error::invalid_argument(format!(
                        "sketch dimensions {r}x{c} must lie within 1..={m} x 1..={n}"
                    )))
                } else {
                    Ok(())
                }
            }
            (_, Some(_)) => Err(Error::invalid_argument("sketch dimensions given for a non-sketch variant")),
            (_, None) => Ok(()),
        }
    }

    fn transform(&self) -> Box<dyn BlockTransform> {
        match self.variant {
            Variant::Plain => Box::new(PlainBlock),
            Variant::Shuffle => Box::new(ShuffleBlock),
            Variant::Sketch => {
                let (rows, cols) = self.sketch_dims.expect("validated");
                Box::new(SketchBlock { rows, cols })
            }
        }
    }

    /// `(p, q)`: shape of every output block.
    pub fn block_shape(&self) -> (usize, usize) {
        match self.sketch_dims {
            Some(d) if self.variant == Variant::Sketch => d,
            _ => self.base.shape(),
        }
    }

    /// Size arithmetic for the plain and shuffle variants.
    pub fn shape(&self) -> ExpansionShape {
        ExpansionShape {
            reduced_rows: self.reduced.n_rows() as u64,
            reduced_cols: self.reduced.n_cols() as u64,
            reduced_nnz: self.reduced.nnz() as u64,
            base_rows: self.base.n_rows() as u64,
            base_cols: self.base.n_cols() as u64,
            base_nnz: self.base.nnz() as u64,
        }
    }
}

/// Sizes of the two Kronecker factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpansionShape {
    pub reduced_rows: u64,
    pub reduced_cols: u64,
    pub reduced_nnz: u64,
    pub base_rows: u64,
    pub base_cols: u64,
    pub base_nnz: u64,
}

impl ExpansionShape {
    pub fn dims(&self) -> [u64; 2] {
        [self.reduced_rows * self.base_rows, self.reduced_cols * self.base_cols]
    }

    pub fn nnz(&self) -> u64 {
        self.reduced_nnz * self.base_nnz
    }

    pub fn zero_blocks(&self) -> u64 {
        self.reduced_rows * self.reduced_cols - self.reduced_nnz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub reduced_rows: usize,
    pub reduced_cols: usize,
    pub base_rows: usize,
    pub base_cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub name: String,
    pub block_row: usize,
    pub nnz: u64,
    pub bytes: u64,
    /// Hex FNV-1a 64 of the shard bytes.
    pub checksum: String,
    pub complete: bool,
}

/// Seed and size of one sketch block, for auditing the selections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchBlockRecord {
    pub i_hat: usize,
    pub j_hat: usize,
    pub seed: u64,
    pub nnz: u64,
}

/// Machine-readable record of an expansion run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub variant: Variant,
    pub master_seed: u64,
    pub dims: [u64; 2],
    pub nnz_total: u64,
    pub block_dims: BlockDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_dims: Option<[usize; 2]>,
    pub rating_scale: Option<RatingScale>,
    pub block_seed_mixer: MixerSpec,
    pub checksum_algorithm: String,
    pub shards: Vec<ShardEntry>,
    pub skipped_zero_blocks: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sketch_blocks: Vec<SketchBlockRecord>,
    pub dry_run: bool,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Manifest {
    /// Accepts either the manifest file or the directory holding it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        Ok(serde_json::from_reader(BufReader::new(File::open(file)?))?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Manifest for a plain or shuffle expansion without writing any shard.
pub fn dry_run_manifest(
    shape: &ExpansionShape,
    variant: Variant,
    master_seed: u64,
    rating_scale: Option<RatingScale>,
) -> Result<Manifest> {
    if variant == Variant::Sketch {
        return Err(Error::invalid_argument("sketch dry runs need the factors; use `dry_run`"));
    }
    Ok(Manifest {
        version: MANIFEST_VERSION,
        variant,
        master_seed,
        dims: shape.dims(),
        nnz_total: shape.nnz(),
        block_dims: BlockDims {
            reduced_rows: shape.reduced_rows as usize,
            reduced_cols: shape.reduced_cols as usize,
            base_rows: shape.base_rows as usize,
            base_cols: shape.base_cols as usize,
        },
        sketch_dims: None,
        rating_scale,
        block_seed_mixer: MixerSpec::current(),
        checksum_algorithm: CHECKSUM_ALGORITHM.into(),
        shards: Vec::new(),
        skipped_zero_blocks: shape.zero_blocks(),
        sketch_blocks: Vec::new(),
        dry_run: true,
        complete: false,
        config: None,
    })
}

/// Manifest describing `plan` without writing shards. Sketch blocks are
/// generated (not written) to count their entries.
pub fn dry_run(plan: &ExpansionPlan) -> Result<Manifest> {
    plan.validate()?;
    let mut manifest = base_manifest(plan);
    manifest.dry_run = true;
    if plan.variant == Variant::Sketch {
        let (rows, cols) = plan.block_shape();
        let r_hat = plan.reduced.matrix();
        for i_hat in 0..r_hat.n_rows() {
            for j_hat in 0..r_hat.n_cols() {
                if r_hat[(i_hat, j_hat)] == 0.0 {
                    continue;
                }
                let seed = block_seed(plan.master_seed, i_hat, j_hat);
                let nnz = sketch(plan.base, rows, cols, seed)?.matrix.nnz() as u64;
                manifest.nnz_total += nnz;
                manifest.sketch_blocks.push(SketchBlockRecord { i_hat, j_hat, seed, nnz });
            }
        }
    } else {
        manifest.nnz_total = plan.shape().nnz();
    }
    Ok(manifest)
}

fn base_manifest(plan: &ExpansionPlan) -> Manifest {
    let (p, q) = plan.block_shape();
    let r_hat = plan.reduced.matrix();
    Manifest {
        version: MANIFEST_VERSION,
        variant: plan.variant,
        master_seed: plan.master_seed,
        dims: [r_hat.n_rows() as u64 * p as u64, r_hat.n_cols() as u64 * q as u64],
        nnz_total: 0,
        block_dims: BlockDims {
            reduced_rows: r_hat.n_rows(),
            reduced_cols: r_hat.n_cols(),
            base_rows: plan.base.n_rows(),
            base_cols: plan.base.n_cols(),
        },
        sketch_dims: match plan.variant {
            Variant::Sketch => plan.sketch_dims.map(|(r, c)| [r, c]),
            _ => None,
        },
        rating_scale: plan.rating_scale,
        block_seed_mixer: MixerSpec::current(),
        checksum_algorithm: CHECKSUM_ALGORITHM.into(),
        shards: Vec::new(),
        skipped_zero_blocks: (r_hat.n_rows() * r_hat.n_cols() - r_hat.nnz()) as u64,
        sketch_blocks: Vec::new(),
        dry_run: false,
        complete: false,
        config: plan.config.clone(),
    }
}

/// Destination for shards and the final manifest.
pub trait ShardSink: Sync {
    fn create_shard(&self, name: &str) -> io::Result<Box<dyn Write + Send>>;
    fn put_manifest(&self, manifest: &Manifest) -> Result<()>;
}

/// Writes shards and `manifest.json` into a directory.
#[derive(Debug, Clone)]
pub struct DirectorySink {
    dir: PathBuf,
}

impl DirectorySink {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DirectorySink { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ShardSink for DirectorySink {
    fn create_shard(&self, name: &str) -> io::Result<Box<dyn Write + Send>> {
        Ok(Box::new(File::create(self.dir.join(name))?))
    }

    fn put_manifest(&self, manifest: &Manifest) -> Result<()> {
        fs::write(self.dir.join(MANIFEST_FILE), manifest.to_json()?)?;
        Ok(())
    }
}

pub fn shard_name(block_row: usize) -> String {
    format!("part-r{block_row}.csv")
}

/// 64-bit FNV-1a over a byte stream.
#[derive(Default)]
pub struct Fnv1a64(fnv::FnvHasher);

impl Fnv1a64 {
    pub fn update(&mut self, bytes: &[u8]) {
        self.0.write(bytes);
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.finish())
    }
}

struct HashingWriter<W> {
    inner: W,
    hash: Fnv1a64,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hash.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct ShardOutcome {
    entry: ShardEntry,
    sketch_blocks: Vec<SketchBlockRecord>,
    error: Option<io::Error>,
}

fn write_shard(plan: &ExpansionPlan, transform: &dyn BlockTransform, sink: &dyn ShardSink, i_hat: usize) -> ShardOutcome {
    let name = shard_name(i_hat);
    let (p, q) = transform.block_shape(plan.base);
    let r_hat = plan.reduced.matrix();
    let mut nnz = 0u64;
    let mut sketch_blocks = Vec::new();

    let result = (|| -> io::Result<(u64, String)> {
        let file = sink.create_shard(&name)?;
        let mut w = BufWriter::with_capacity(1 << 20, HashingWriter {
            inner: file,
            hash: Fnv1a64::default(),
            bytes: 0,
        });
        let row_base = i_hat as u64 * p as u64;
        for j_hat in 0..r_hat.n_cols() {
            let a = r_hat[(i_hat, j_hat)];
            if a == 0.0 {
                continue;
            }
            let seed = block_seed(plan.master_seed, i_hat, j_hat);
            let col_base = j_hat as u64 * q as u64;
            let mut block_nnz = 0u64;
            let mut status = Ok(());
            transform.for_each_entry(a, plan.base, seed, &mut |i, j, v| {
                if status.is_ok() {
                    status = writeln!(w, "{},{},{:?}", row_base + i as u64, col_base + j as u64, v);
                    block_nnz += 1;
                }
            });
            status?;
            nnz += block_nnz;
            if plan.variant == Variant::Sketch {
                sketch_blocks.push(SketchBlockRecord { i_hat, j_hat, seed, nnz: block_nnz });
            }
        }
        let mut inner = w.into_inner().map_err(|e| e.into_error())?;
        inner.flush()?;
        Ok((inner.bytes, inner.hash.hex()))
    })();

    match result {
        Ok((bytes, checksum)) => ShardOutcome {
            entry: ShardEntry { name, block_row: i_hat, nnz, bytes, checksum, complete: true },
            sketch_blocks,
            error: None,
        },
        Err(e) => ShardOutcome {
            entry: ShardEntry { name, block_row: i_hat, nnz, bytes: 0, checksum: String::new(), complete: false },
            sketch_blocks,
            error: Some(e),
        },
    }
}

/// Writes every shard of `plan` to `sink` using `workers` threads, then the
/// manifest. Output bytes do not depend on `workers`.
///
/// If any shard fails, the manifest is still written with that shard marked
/// incomplete and [`Error::Incomplete`] is returned.
pub fn expand(plan: &ExpansionPlan, sink: &dyn ShardSink, workers: usize) -> Result<Manifest> {
    plan.validate()?;
    let transform = plan.transform();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid_argument(format!("cannot start {workers} workers: {e}")))?;
    let outcomes: Vec<ShardOutcome> = pool.install(|| {
        (0..plan.reduced.n_rows())
            .into_par_iter()
            .map(|i_hat| write_shard(plan, transform.as_ref(), sink, i_hat))
            .collect()
    });

    let mut manifest = base_manifest(plan);
    let mut failures = Vec::new();
    for outcome in outcomes {
        manifest.nnz_total += outcome.entry.nnz;
        if let Some(e) = outcome.error {
            failures.push(format!("{}: {e}", outcome.entry.name));
        }
        manifest.shards.push(outcome.entry);
        manifest.sketch_blocks.extend(outcome.sketch_blocks);
    }
    manifest.complete = failures.is_empty();
    sink.put_manifest(&manifest)?;
    if failures.is_empty() {
        log::info!(
            "expanded to {}x{} with {} entries in {} shards",
            manifest.dims[0],
            manifest.dims[1],
            manifest.nnz_total,
            manifest.shards.len()
        );
        Ok(manifest)
    } else {
        Err(Error::Incomplete(failures.join("; ")))
    }
}

/// Streams one shard file, calling `f(row, col, value)` per line, and returns
/// `(entries, checksum)` of the bytes read.
pub fn read_shard(path: impl AsRef<Path>, mut f: impl FnMut(u64, u64, f64)) -> Result<(u64, String)> {
    let path = path.as_ref();
    let mut hash = Fnv1a64::default();
    let reader = BufReader::with_capacity(1 << 20, HashingReader { inner: File::open(path)?, hash: &mut hash });
    let mut count = 0u64;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = n as u64 + 1;
        let bad = |what: &str| Error::Parse {
            line: line_no,
            message: format!("{}: {what} in '{line}'", path.display()),
        };
        let mut fields = line.split(',');
        let row = fields.next().and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| bad("bad row index"))?;
        let col = fields.next().and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| bad("bad column index"))?;
        let value = fields.next().and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad("bad value"))?;
        if fields.next().is_some() {
            return Err(bad("too many fields"));
        }
        f(row, col, value);
        count += 1;
    }
    Ok((count, hash.hex()))
}

struct HashingReader<'h, R> {
    inner: R,
    hash: &'h mut Fnv1a64,
}

impl<R: Read> Read for HashingReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hash.update(&buf[..n]);
        Ok(n)
    }
}

/// Checksum of a file's bytes.
pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    let mut hash = Fnv1a64::default();
    let mut file = File::open(path)?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hash.update(&buf[..n]);
    }
    Ok(hash.hex())
}
