//! Batched query x corpus kernel matrices with a persistent binary format.
//!
//! Work is partitioned by query row, self traces are computed once per
//! distinct sequence, and every cell is an independent pure evaluation, so
//! the result is bit-identical regardless of the degree of parallelism.
//!
//! On-disk layout (`OVRGRAM1`, little-endian):
//!
//! ```text
//! offset  0  magic          8 bytes  "OVRGRAM1"
//! offset  8  version        u32      1
//! offset 12  mode           u8       0 = RNTK, 1 = NNGP, 2 = SKNN
//! offset 13  n_query        u64
//! offset 21  n_corpus       u64
//! offset 29  params_digest  16 bytes
//! offset 45  query ids      n_query  x (u32 length + utf-8 bytes)
//!            corpus ids     n_corpus x (u32 length + utf-8 bytes)
//!            values         n_query * n_corpus f64, row-major by query
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::knn::cosine_over_item_sets;
use crate::rntk::{
    pair_kernels_cached, self_trace_items, FinalScale, ItemSequence, KernelHyperParams,
    RntkError, SelfTrace,
};

const MAGIC: &[u8; 8] = b"OVRGRAM1";
const VERSION: u32 = 1;
/// Byte offset of the params digest in the header, reported on mismatch.
pub const DIGEST_OFFSET: u64 = 29;
/// Default ceiling on `n_query * n_corpus`.
pub const DEFAULT_CELL_BUDGET: u64 = 1 << 31;

/// Which pairwise score fills the matrix.
#[derive(Clone, Copy, Debug, Eq, PartialEq)]
pub enum GramMode {
    Rntk,
    Nngp,
    Sknn,
}

impl GramMode {
    fn as_u8(self) -> u8 {
        match self {
            GramMode::Rntk => 0,
            GramMode::Nngp => 1,
            GramMode::Sknn => 2,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(GramMode::Rntk),
            1 => Some(GramMode::Nngp),
            2 => Some(GramMode::Sknn),
            _ => None,
        }
    }
}

impl std::fmt::Display for GramMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GramMode::Rntk => "rntk",
            GramMode::Nngp => "nngp",
            GramMode::Sknn => "sknn",
        };
        write!(f, "{s}")
    }
}

impl FromStr for GramMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rntk" => Ok(GramMode::Rntk),
            "nngp" => Ok(GramMode::Nngp),
            "sknn" => Ok(GramMode::Sknn),
            other => Err(format!("unknown gram mode '{other}' (expected rntk|nngp|sknn)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum GramError {
    #[error("query and corpus inputs must be non-empty")]
    EmptyInput,
    #[error("gram of {cells} cells exceeds the cell budget of {budget}")]
    Capacity { cells: u128, budget: u64 },
    #[error("kernel gram modes require sigma_b = 0 (got {sigma_b})")]
    NonzeroBias { sigma_b: f64 },
    #[error(transparent)]
    Kernel(#[from] RntkError),
    #[error("corrupt header at byte {offset}: {detail}")]
    CorruptHeader { offset: u64, detail: String },
    #[error("params digest mismatch at byte {offset}: expected {expected}, found {found}")]
    DigestMismatch { offset: u64, expected: String, found: String },
    #[error("file truncated at byte {offset}")]
    TruncatedPayload { offset: u64 },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Dense query-major matrix of pairwise scores plus its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub mode: GramMode,
    pub n_query: usize,
    pub n_corpus: usize,
    /// Row-major, one contiguous row per query.
    pub values: Vec<f64>,
    pub params_digest: [u8; 16],
    pub query_ids: Vec<String>,
    pub corpus_ids: Vec<String>,
}

impl GramMatrix {
    pub fn value(&self, query: usize, corpus: usize) -> f64 {
        self.values[query * self.n_corpus + corpus]
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.values[query * self.n_corpus..(query + 1) * self.n_corpus]
    }
}

/// 128-bit content hash of the hyper-parameters and mode.
pub fn params_digest(p: &KernelHyperParams, mode: GramMode) -> [u8; 16] {
    let mut hasher = Sha256::new();
    hasher.update(b"OVRGRAM-PARAMS-V1");
    hasher.update([mode.as_u8()]);
    hasher.update((p.layers as u64).to_le_bytes());
    for sigma in [p.sigma_w, p.sigma_u, p.sigma_b, p.sigma_v] {
        hasher.update(sigma.to_bits().to_le_bytes());
    }
    let full = hasher.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}

/// Verify that a loaded matrix was produced with the given parameters.
pub fn check_digest(
    g: &GramMatrix,
    p: &KernelHyperParams,
    mode: GramMode,
) -> Result<(), GramError> {
    let expected = params_digest(p, mode);
    if g.params_digest != expected {
        return Err(GramError::DigestMismatch {
            offset: DIGEST_OFFSET,
            expected: hex_string(&expected),
            found: hex_string(&g.params_digest),
        });
    }
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

enum SeqCache {
    Kernel(Vec<SelfTrace>),
    ItemSets(Vec<Vec<u32>>),
}

/// Compute the full query x corpus matrix for the selected mode.
///
/// Deterministic and independent of the ambient thread pool: each cell is
/// computed independently and written to a disjoint slot.
pub fn compute_gram(
    queries: &[ItemSequence],
    corpus: &[ItemSequence],
    p: &KernelHyperParams,
    mode: GramMode,
    cell_budget: u64,
) -> Result<GramMatrix, GramError> {
    if queries.is_empty() || corpus.is_empty() {
        return Err(GramError::EmptyInput);
    }
    let cells = queries.len() as u128 * corpus.len() as u128;
    if cells > cell_budget as u128 {
        return Err(GramError::Capacity { cells, budget: cell_budget });
    }
    if matches!(mode, GramMode::Rntk | GramMode::Nngp) {
        p.validate_strict()?;
        if p.sigma_b != 0.0 {
            return Err(GramError::NonzeroBias { sigma_b: p.sigma_b });
        }
    }
    for s in queries.iter().chain(corpus.iter()) {
        if s.is_empty() {
            return Err(GramError::Kernel(RntkError::EmptySequence));
        }
    }

    // Intern distinct sequences so self traces are computed exactly once.
    let mut index: HashMap<&[u32], usize> = HashMap::new();
    let mut unique: Vec<&[u32]> = Vec::new();
    let mut q_ref = Vec::with_capacity(queries.len());
    let mut c_ref = Vec::with_capacity(corpus.len());
    for (seqs, refs) in [(queries, &mut q_ref), (corpus, &mut c_ref)] {
        for s in seqs {
            let i = *index.entry(s.items.as_slice()).or_insert_with(|| {
                unique.push(s.items.as_slice());
                unique.len() - 1
            });
            refs.push(i);
        }
    }

    let cache = match mode {
        GramMode::Rntk | GramMode::Nngp => {
            let traces: Result<Vec<SelfTrace>, RntkError> =
                unique.par_iter().map(|items| self_trace_items(items, p)).collect();
            SeqCache::Kernel(traces?)
        }
        GramMode::Sknn => {
            let sets: Vec<Vec<u32>> = unique
                .par_iter()
                .map(|items| {
                    let mut set = items.to_vec();
                    set.sort_unstable();
                    set.dedup();
                    set
                })
                .collect();
            SeqCache::ItemSets(sets)
        }
    };

    let n_corpus = corpus.len();
    let mut values = vec![0.0f64; queries.len() * n_corpus];
    values
        .par_chunks_mut(n_corpus)
        .enumerate()
        .for_each(|(qi, row)| {
            let qu = q_ref[qi];
            for (cj, slot) in row.iter_mut().enumerate() {
                let cu = c_ref[cj];
                *slot = match &cache {
                    SeqCache::Kernel(traces) => {
                        let k = pair_kernels_cached(
                            unique[qu],
                            &traces[qu],
                            unique[cu],
                            &traces[cu],
                            p,
                            FinalScale::default(),
                        );
                        match mode {
                            GramMode::Rntk => k.ntk,
                            GramMode::Nngp => k.nngp,
                            GramMode::Sknn => unreachable!(),
                        }
                    }
                    SeqCache::ItemSets(sets) => cosine_over_item_sets(&sets[qu], &sets[cu]),
                };
            }
        });

    Ok(GramMatrix {
        mode,
        n_query: queries.len(),
        n_corpus,
        values,
        params_digest: params_digest(p, mode),
        query_ids: queries.iter().map(|s| s.user.clone()).collect(),
        corpus_ids: corpus.iter().map(|s| s.user.clone()).collect(),
    })
}

/// Write a matrix in the `OVRGRAM1` format. Round-trips bit-exactly.
pub fn save_gram(g: &GramMatrix, path: &Path) -> Result<(), GramError> {
    let io_err = |source| GramError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&[g.mode.as_u8()])?;
    write(&(g.n_query as u64).to_le_bytes())?;
    write(&(g.n_corpus as u64).to_le_bytes())?;
    write(&g.params_digest)?;
    for id in g.query_ids.iter().chain(g.corpus_ids.iter()) {
        write(&(id.len() as u32).to_le_bytes())?;
        write(id.as_bytes())?;
    }
    for v in &g.values {
        write(&v.to_bits().to_le_bytes())?;
    }
    w.flush().map_err(io_err)
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), GramError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(GramError::TruncatedPayload { offset: self.offset })
            }
            Err(e) => Err(GramError::Io { path: PathBuf::new(), source: e }),
        }
    }

    fn u32_le(&mut self) -> Result<u32, GramError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64_le(&mut self) -> Result<u64, GramError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Read a matrix back from the `OVRGRAM1` format.
pub fn load_gram(path: &Path) -> Result<GramMatrix, GramError> {
    let file = File::open(path).map_err(|source| GramError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader { inner: BufReader::new(file), offset: 0 };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GramError::CorruptHeader {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version_off = r.offset;
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(GramError::CorruptHeader {
            offset: version_off,
            detail: format!("unsupported version {version}"),
        });
    }
    let mode_off = r.offset;
    let mut mode_byte = [0u8; 1];
    r.read_exact(&mut mode_byte)?;
    let mode = GramMode::from_u8(mode_byte[0]).ok_or_else(|| GramError::CorruptHeader {
        offset: mode_off,
        detail: format!("unknown mode {}", mode_byte[0]),
    })?;
    let n_query = r.u64_le()? as usize;
    let n_corpus = r.u64_le()? as usize;
    let mut params_digest = [0u8; 16];
    r.read_exact(&mut params_digest)?;

    let read_ids = |count: usize, r: &mut Reader<BufReader<File>>| -> Result<Vec<String>, GramError> {
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len_off = r.offset;
            let len = r.u32_le()? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            let id = String::from_utf8(bytes).map_err(|_| GramError::CorruptHeader {
                offset: len_off,
                detail: "id is not valid utf-8".into(),
            })?;
            ids.push(id);
        }
        Ok(ids)
    };
    let query_ids = read_ids(n_query, &mut r)?;
    let corpus_ids = read_ids(n_corpus, &mut r)?;

    let cells = n_query
        .checked_mul(n_corpus)
        .ok_or(GramError::CorruptHeader { offset: 13, detail: "cell count overflow".into() })?;
    let mut values = Vec::with_capacity(cells);
    let mut buf = [0u8; 8];
    for _ in 0..cells {
        r.read_exact(&mut buf)?;
        values.push(f64::from_bits(u64::from_le_bytes(buf)));
    }

    Ok(GramMatrix { mode, n_query, n_corpus, values, params_digest, query_ids, corpus_ids })
}
