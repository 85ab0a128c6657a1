//! Column-oriented data handling. Fits stream over batches of row indices, so
//! the store exposes exactly one hot operation: gather a batch of rows for a
//! subset of columns. Stores are either fully in memory or file backed with
//! positioned reads; both return bit-identical values for the same file.
//!
//! File layout (magic `BBFC`, all integers little endian):
//! magic[4], version u32, n_rows u64, n_cols u32, then per column a name
//! (length u16 + UTF-8 bytes), then one payload region of n_cols * n_rows
//! f64 values in column-major order.

use std::fs::File;
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const STORE_MAGIC: &[u8; 4] = b"BBFC";
pub const ECDF_MAGIC: &[u8; 4] = b"BBFE";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not a column store file")]
    BadMagic,
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("file is truncated or has trailing bytes (expected {expected} payload bytes, found {found})")]
    PayloadSize { expected: u64, found: u64 },
    #[error("header ends unexpectedly")]
    TruncatedHeader,
    #[error("column name is not valid UTF-8")]
    NameNotUtf8,
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("store dimensions overflow: {rows} rows x {cols} columns")]
    TooLarge { rows: u64, cols: u32 },
    #[error("columns have differing lengths")]
    RaggedColumns,
    #[error("row index {id} out of range for {n_rows} rows")]
    IdOutOfRange { id: u32, n_rows: u64 },
    #[error("csv parse error at data row {row}, column {col:?}: {message}")]
    Csv {
        row: usize,
        col: String,
        message: String,
    },
    #[error("csv error: {0}")]
    CsvFile(#[from] csv::Error),
    #[error("batch plan needs at least 2 batches, got {0}")]
    TooFewBatches(usize),
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("store is empty")]
    NoRows,
    #[error("ecdf table {0:?} has no values")]
    EmptyTable(String),
}

enum Backing {
    Mem { data: Vec<Vec<f64>> },
    File { file: File, payload_offset: u64 },
}

/// A named set of equal-length f64 columns.
pub struct ColumnStore {
    names: Vec<String>,
    n_rows: u64,
    backing: Backing,
    path: Option<PathBuf>,
}

fn check_names(names: &[String]) -> Result<(), StoreError> {
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(StoreError::DuplicateColumn(n.clone()));
        }
    }
    Ok(())
}

impl ColumnStore {
    pub fn from_columns(names: Vec<String>, data: Vec<Vec<f64>>) -> Result<Self, StoreError> {
        check_names(&names)?;
        let n_rows = data.first().map(|c| c.len()).unwrap_or(0) as u64;
        if data.iter().any(|c| c.len() as u64 != n_rows) {
            return Err(StoreError::RaggedColumns);
        }
        if n_rows > u32::MAX as u64 {
            return Err(StoreError::TooLarge {
                rows: n_rows,
                cols: names.len() as u32,
            });
        }
        Ok(ColumnStore {
            names,
            n_rows,
            backing: Backing::Mem { data },
            path: None,
        })
    }

    pub fn n_rows(&self) -> u64 {
        self.n_rows
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Result<usize, StoreError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| StoreError::UnknownColumn(name.to_string()))
    }

    pub fn is_file_backed(&self) -> bool {
        matches!(self.backing, Backing::File { .. })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Serialize to the binary format.
    pub fn write_file(&self, path: &Path) -> Result<(), StoreError> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        f.write_all(STORE_MAGIC)?;
        f.write_all(&STORE_VERSION.to_le_bytes())?;
        f.write_all(&self.n_rows.to_le_bytes())?;
        f.write_all(&(self.names.len() as u32).to_le_bytes())?;
        for name in &self.names {
            let bytes = name.as_bytes();
            f.write_all(&(bytes.len() as u16).to_le_bytes())?;
            f.write_all(bytes)?;
        }
        let mut buf = Vec::with_capacity(8192);
        for c in 0..self.names.len() {
            buf.clear();
            for r in 0..self.n_rows as usize {
                buf.extend_from_slice(&self.value(r, c).to_le_bytes());
                if buf.len() >= 8192 {
                    f.write_all(&buf)?;
                    buf.clear();
                }
            }
            f.write_all(&buf)?;
        }
        f.flush()?;
        Ok(())
    }

    fn value(&self, row: usize, col: usize) -> f64 {
        match &self.backing {
            Backing::Mem { data } => data[col][row],
            Backing::File { file, payload_offset } => {
                let mut b = [0u8; 8];
                let off = payload_offset + (col as u64 * self.n_rows + row as u64) * 8;
                file.read_exact_at(&mut b, off).expect("store read");
                f64::from_le_bytes(b)
            }
        }
    }

    /// Open file backed: header is parsed eagerly, payload stays on disk and
    /// is gathered per batch. Concurrent `read_batch` calls are safe.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut reader = std::io::BufReader::new(&file);
        let (names, n_rows, header_len) = read_header(&mut reader, file_len)?;
        let expected = (names.len() as u64) * n_rows * 8;
        let found = file_len - header_len;
        if expected != found {
            return Err(StoreError::PayloadSize { expected, found });
        }
        Ok(ColumnStore {
            names,
            n_rows,
            backing: Backing::File {
                file,
                payload_offset: header_len,
            },
            path: Some(path.to_path_buf()),
        })
    }

    /// Read a file fully into memory.
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        let mut store = decode_store(&bytes)?;
        store.path = Some(path.to_path_buf());
        Ok(store)
    }

    /// Gather `ids` (in order) for the given column indices into a dense
    /// row-major block, shape (ids.len(), cols.len()).
    pub fn read_batch(&self, ids: &[u32], cols: &[usize]) -> Result<Array2<f64>, StoreError> {
        for &id in ids {
            if id as u64 >= self.n_rows {
                return Err(StoreError::IdOutOfRange {
                    id,
                    n_rows: self.n_rows,
                });
            }
        }
        let mut out = Array2::zeros((ids.len(), cols.len()));
        match &self.backing {
            Backing::Mem { data } => {
                for (j, &c) in cols.iter().enumerate() {
                    let col = &data[c];
                    for (i, &id) in ids.iter().enumerate() {
                        out[[i, j]] = col[id as usize];
                    }
                }
            }
            Backing::File { file, payload_offset } => {
                let mut b = [0u8; 8];
                for (j, &c) in cols.iter().enumerate() {
                    let col_off = payload_offset + c as u64 * self.n_rows * 8;
                    for (i, &id) in ids.iter().enumerate() {
                        file.read_exact_at(&mut b, col_off + id as u64 * 8)?;
                        out[[i, j]] = f64::from_le_bytes(b);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Full column as a vector.
    pub fn read_column(&self, col: usize) -> Result<Vec<f64>, StoreError> {
        match &self.backing {
            Backing::Mem { data } => Ok(data[col].clone()),
            Backing::File { file, payload_offset } => {
                let n = self.n_rows as usize;
                let mut bytes = vec![0u8; n * 8];
                file.read_exact_at(&mut bytes, payload_offset + col as u64 * self.n_rows * 8)?;
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
        }
    }
}

fn read_header<R: Read>(r: &mut R, limit: u64) -> Result<(Vec<String>, u64, u64), StoreError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| StoreError::TruncatedHeader)?;
    if &magic != STORE_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| StoreError::TruncatedHeader)?;
    let version = u32::from_le_bytes(b4);
    if version != STORE_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    r.read_exact(&mut b8).map_err(|_| StoreError::TruncatedHeader)?;
    let n_rows = u64::from_le_bytes(b8);
    r.read_exact(&mut b4).map_err(|_| StoreError::TruncatedHeader)?;
    let n_cols = u32::from_le_bytes(b4);
    // Reject dimensions that cannot possibly fit the file before allocating.
    let payload = (n_cols as u64)
        .checked_mul(n_rows)
        .and_then(|v| v.checked_mul(8))
        .ok_or(StoreError::TooLarge {
            rows: n_rows,
            cols: n_cols,
        })?;
    if payload > limit || n_rows > u32::MAX as u64 {
        return Err(StoreError::TooLarge {
            rows: n_rows,
            cols: n_cols,
        });
    }
    let mut offset = 4 + 4 + 8 + 4_u64;
    let mut names = Vec::with_capacity(n_cols.min(4096) as usize);
    let mut b2 = [0u8; 2];
    for _ in 0..n_cols {
        r.read_exact(&mut b2).map_err(|_| StoreError::TruncatedHeader)?;
        let len = u16::from_le_bytes(b2) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| StoreError::TruncatedHeader)?;
        names.push(String::from_utf8(name).map_err(|_| StoreError::NameNotUtf8)?);
        offset += 2 + len as u64;
    }
    check_names(&names)?;
    Ok((names, n_rows, offset))
}

/// Decode an entire store from a byte buffer (the fuzzing entry point).
pub fn decode_store(bytes: &[u8]) -> Result<ColumnStore, StoreError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let (names, n_rows, header_len) = read_header(&mut cursor, bytes.len() as u64)?;
    let expected = (names.len() as u64) * n_rows * 8;
    let found = bytes.len() as u64 - header_len;
    if expected != found {
        return Err(StoreError::PayloadSize { expected, found });
    }
    let mut data = Vec::with_capacity(names.len());
    let mut off = header_len as usize;
    for _ in 0..names.len() {
        let mut col = Vec::with_capacity(n_rows as usize);
        for _ in 0..n_rows {
            col.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        data.push(col);
    }
    ColumnStore::from_columns(names, data)
}

/// How row indices are assigned to batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Each batch is an independent uniform subset (ids distinct within a
    /// batch, rows reappear across batches).
    WithReplacement,
    /// Shuffle all rows, chop the permutation into consecutive chunks (last
    /// chunk possibly short), reshuffling at each epoch boundary.
    Epoch,
}

/// Deterministic batch plan: `t` index lists over `0..n_rows`.
pub fn make_batches(
    n_rows: u64,
    t: usize,
    batch_size: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<Vec<u32>>, StoreError> {
    if n_rows == 0 {
        return Err(StoreError::NoRows);
    }
    if t < 2 {
        return Err(StoreError::TooFewBatches(t));
    }
    if batch_size == 0 {
        return Err(StoreError::EmptyBatch);
    }
    let n = n_rows as usize;
    let size = batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(t);
    match sampling {
        Sampling::WithReplacement => {
            // Virtual partial Fisher-Yates so a batch never allocates O(n).
            let mut displaced = std::collections::HashMap::new();
            for _ in 0..t {
                displaced.clear();
                let mut ids = Vec::with_capacity(size);
                for i in 0..size {
                    let j = rng.random_range(i..n);
                    let vj = *displaced.get(&j).unwrap_or(&j);
                    let vi = *displaced.get(&i).unwrap_or(&i);
                    displaced.insert(j, vi);
                    ids.push(vj as u32);
                }
                out.push(ids);
            }
        }
        Sampling::Epoch => {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            let mut pos = n; // force a shuffle on first use
            while out.len() < t {
                if pos >= n {
                    for i in (1..n).rev() {
                        let j = rng.random_range(0..=i);
                        perm.swap(i, j);
                    }
                    pos = 0;
                }
                let end = (pos + size).min(n);
                out.push(perm[pos..end].to_vec());
                pos = end;
            }
        }
    }
    Ok(out)
}

/// Empirical cdf of one training column: F(x) = #{x_i <= x} / n over the
/// sorted unique values, so tied values share the upper step.
#[derive(Debug, Clone, PartialEq)]
pub struct EcdfTable {
    pub name: String,
    pub n_source: u64,
    pub values: Vec<f64>,
    pub f: Vec<f64>,
}

impl EcdfTable {
    pub fn from_column(name: &str, x: &[f64]) -> Result<Self, StoreError> {
        if x.is_empty() {
            return Err(StoreError::NoRows);
        }
        let n = x.len();
        let mut sorted = x.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in ecdf column"));
        let mut values = Vec::new();
        let mut f = Vec::new();
        let mut i = 0;
        while i < n {
            let v = sorted[i];
            let mut j = i + 1;
            while j < n && sorted[j] == v {
                j += 1;
            }
            values.push(v);
            f.push(j as f64 / n as f64);
            i = j;
        }
        Ok(EcdfTable {
            name: name.to_string(),
            n_source: n as u64,
            values,
            f,
        })
    }

    /// Map a new value through the stored table: linear interpolation between
    /// the unique training values, clamped to [1/(n+1), 1].
    pub fn transform(&self, x: f64) -> f64 {
        let lo_clamp = 1.0 / (self.n_source as f64 + 1.0);
        let m = self.values.len();
        if x < self.values[0] {
            return lo_clamp;
        }
        if x >= self.values[m - 1] {
            return 1.0;
        }
        // First index with value > x; the segment is [i-1, i].
        let i = self.values.partition_point(|v| *v <= x);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        let (f0, f1) = (self.f[i - 1], self.f[i]);
        let t = (x - v0) / (v1 - v0);
        (f0 + t * (f1 - f0)).clamp(lo_clamp, 1.0)
    }
}

/// Replace the named columns by their ECDF transforms (values in (0, 1]) and
/// return the transformed store plus the per-column tables.
pub fn ecdf_standardize(
    store: &ColumnStore,
    columns: &[String],
) -> Result<(ColumnStore, Vec<EcdfTable>), StoreError> {
    let mut tables = Vec::with_capacity(columns.len());
    let mut data = Vec::with_capacity(store.column_names().len());
    let names: Vec<String> = store.column_names().to_vec();
    for (c, name) in names.iter().enumerate() {
        let col = store.read_column(c)?;
        if columns.contains(name) {
            let table = EcdfTable::from_column(name, &col)?;
            data.push(col.iter().map(|&v| table.transform(v)).collect());
            tables.push(table);
        } else {
            data.push(col);
        }
    }
    Ok((ColumnStore::from_columns(names, data)?, tables))
}

/// Persist ECDF tables (magic `BBFE`): per table name, source row count,
/// unique-value count, then the value and F arrays as little-endian f64.
pub fn write_ecdf_tables(tables: &[EcdfTable], path: &Path) -> Result<(), StoreError> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    f.write_all(ECDF_MAGIC)?;
    f.write_all(&STORE_VERSION.to_le_bytes())?;
    f.write_all(&(tables.len() as u32).to_le_bytes())?;
    for t in tables {
        let name = t.name.as_bytes();
        f.write_all(&(name.len() as u16).to_le_bytes())?;
        f.write_all(name)?;
        f.write_all(&t.n_source.to_le_bytes())?;
        f.write_all(&(t.values.len() as u64).to_le_bytes())?;
        for v in &t.values {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in &t.f {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Decode ECDF tables from bytes (also a fuzzing entry point).
pub fn decode_ecdf_tables(bytes: &[u8]) -> Result<Vec<EcdfTable>, StoreError> {
    let take = |off: &mut usize, len: usize| -> Result<&[u8], StoreError> {
        let end = off.checked_add(len).ok_or(StoreError::TruncatedHeader)?;
        if end > bytes.len() {
            return Err(StoreError::TruncatedHeader);
        }
        let s = &bytes[*off..end];
        *off = end;
        Ok(s)
    };
    let mut off = 0usize;
    if take(&mut off, 4)? != ECDF_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != STORE_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let n_tables = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    let mut tables = Vec::with_capacity(n_tables.min(4096) as usize);
    for _ in 0..n_tables {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| StoreError::NameNotUtf8)?;
        let n_source = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let m = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        if m == 0 || n_source == 0 {
            // transform() needs at least one support point.
            return Err(StoreError::EmptyTable(name));
        }
        let m_bytes = m.checked_mul(8).ok_or(StoreError::TruncatedHeader)?;
        if m_bytes.checked_mul(2).ok_or(StoreError::TruncatedHeader)? > bytes.len() as u64 {
            return Err(StoreError::TruncatedHeader);
        }
        let mut values = Vec::with_capacity(m as usize);
        for chunk in take(&mut off, (m * 8) as usize)?.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut f = Vec::with_capacity(m as usize);
        for chunk in take(&mut off, (m * 8) as usize)?.chunks_exact(8) {
            f.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tables.push(EcdfTable {
            name,
            n_source,
            values,
            f,
        });
    }
    Ok(tables)
}

pub fn read_ecdf_tables(path: &Path) -> Result<Vec<EcdfTable>, StoreError> {
    decode_ecdf_tables(&std::fs::read(path)?)
}

/// Parse an RFC 4180 CSV file with a header row into an in-memory store.
/// Every field must be a finite number; the first offending cell is reported
/// with its 1-based data row and column name.
pub fn ingest_csv(path: &Path, columns: Option<&[String]>) -> Result<ColumnStore, StoreError> {
    let file = File::open(path)?;
    ingest_csv_reader(file, columns)
}

/// CSV ingestion from any reader (the fuzzing entry point).
pub fn ingest_csv_reader<R: Read>(
    reader: R,
    columns: Option<&[String]>,
) -> Result<ColumnStore, StoreError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    check_names(&headers)?;
    let selected: Vec<usize> = match columns {
        None => (0..headers.len()).collect(),
        Some(want) => want
            .iter()
            .map(|w| {
                headers
                    .iter()
                    .position(|h| h == w)
                    .ok_or_else(|| StoreError::UnknownColumn(w.clone()))
            })
            .collect::<Result<_, _>>()?,
    };
    let names: Vec<String> = selected.iter().map(|&i| headers[i].clone()).collect();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); selected.len()];
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        for (out_idx, &col_idx) in selected.iter().enumerate() {
            let raw = record.get(col_idx).ok_or_else(|| StoreError::Csv {
                row: row_idx + 1,
                col: headers.get(col_idx).cloned().unwrap_or_default(),
                message: "missing field".to_string(),
            })?;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                return Err(StoreError::Csv {
                    row: row_idx + 1,
                    col: names[out_idx].clone(),
                    message: "empty value (missing values are not allowed)".to_string(),
                });
            }
            let value: f64 = trimmed.parse().map_err(|_| StoreError::Csv {
                row: row_idx + 1,
                col: names[out_idx].clone(),
                message: format!("cannot parse {trimmed:?} as a number"),
            })?;
            if !value.is_finite() {
                return Err(StoreError::Csv {
                    row: row_idx + 1,
                    col: names[out_idx].clone(),
                    message: format!("non-finite value {trimmed:?}"),
                });
            }
            data[out_idx].push(value);
        }
    }
    ColumnStore::from_columns(names, data)
}
