//! Chunked, hop-split on-disk feature storage.
//!
//! Each (operator, hop) pair gets its own file so a loader can issue the R+1
//! reads for a batch chunk in parallel. Chunks are padded to 4096-byte
//! boundaries and the data section starts at a 4096-byte offset, keeping every
//! chunk read aligned for direct I/O. Reads are positioned (`pread`), so
//! concurrent chunk reads from multiple threads share one descriptor safely.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const PPGF_MAGIC: &[u8; 4] = b"PPGF";
const PPGF_VERSION: u32 = 1;
const ALIGNMENT: u64 = 4096;
const HEADER_BYTES: usize = 37;

pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkStoreHeader {
    pub version: u32,
    pub num_rows: u64,
    pub feature_dim: u32,
    pub dtype_code: u8,
    pub chunk_rows: u32,
    pub hop_index: u16,
    pub operator_id: u16,
    pub data_offset: u64,
}

impl ChunkStoreHeader {
    fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut buf = [0u8; HEADER_BYTES];
        buf[0..4].copy_from_slice(PPGF_MAGIC);
        buf[4..8].copy_from_slice(&self.version.to_le_bytes());
        buf[8..16].copy_from_slice(&self.num_rows.to_le_bytes());
        buf[16..20].copy_from_slice(&self.feature_dim.to_le_bytes());
        buf[20] = self.dtype_code;
        buf[21..25].copy_from_slice(&self.chunk_rows.to_le_bytes());
        buf[25..27].copy_from_slice(&self.hop_index.to_le_bytes());
        buf[27..29].copy_from_slice(&self.operator_id.to_le_bytes());
        buf[29..37].copy_from_slice(&self.data_offset.to_le_bytes());
        buf
    }

    fn decode(buf: &[u8; HEADER_BYTES], path: &Path) -> Result<Self> {
        if &buf[0..4] != PPGF_MAGIC {
            return Err(Error::data(path, "bad magic (expected PPGF)"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != PPGF_VERSION {
            return Err(Error::data(path, format!("unsupported version {version}")));
        }
        let header = Self {
            version,
            num_rows: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            feature_dim: u32::from_le_bytes(buf[16..20].try_into().unwrap()),
            dtype_code: buf[20],
            chunk_rows: u32::from_le_bytes(buf[21..25].try_into().unwrap()),
            hop_index: u16::from_le_bytes(buf[25..27].try_into().unwrap()),
            operator_id: u16::from_le_bytes(buf[27..29].try_into().unwrap()),
            data_offset: u64::from_le_bytes(buf[29..37].try_into().unwrap()),
        };
        if header.dtype_code != DTYPE_F32 {
            return Err(Error::data(path, format!("unsupported dtype {}", header.dtype_code)));
        }
        if header.chunk_rows == 0 {
            return Err(Error::data(path, "chunk_rows must be at least 1"));
        }
        if header.data_offset % ALIGNMENT != 0 {
            return Err(Error::data(path, "data offset not 4096-aligned"));
        }
        Ok(header)
    }
}

/// Read-only handle to one hop file.
#[derive(Debug)]
pub struct ChunkStore {
    header: ChunkStoreHeader,
    file: File,
    path: PathBuf,
}

impl ChunkStore {
    pub fn header(&self) -> &ChunkStoreHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn num_rows(&self) -> usize {
        self.header.num_rows as usize
    }

    pub fn feature_dim(&self) -> usize {
        self.header.feature_dim as usize
    }

    pub fn chunk_rows(&self) -> usize {
        self.header.chunk_rows as usize
    }

    pub fn num_chunks(&self) -> usize {
        self.num_rows().div_ceil(self.chunk_rows())
    }

    /// Unpadded payload bytes of one full chunk.
    fn chunk_payload_bytes(&self) -> u64 {
        self.header.chunk_rows as u64 * self.header.feature_dim as u64 * 4
    }

    /// On-disk stride between chunk starts.
    pub fn padded_chunk_bytes(&self) -> u64 {
        self.chunk_payload_bytes().div_ceil(ALIGNMENT) * ALIGNMENT
    }

    /// Absolute byte offset of a chunk; always 4096-aligned.
    pub fn chunk_offset(&self, chunk_id: usize) -> u64 {
        self.header.data_offset + chunk_id as u64 * self.padded_chunk_bytes()
    }

    /// Rows covered by a chunk (the last one may be ragged).
    pub fn chunk_row_range(&self, chunk_id: usize) -> (usize, usize) {
        let start = chunk_id * self.chunk_rows();
        let end = ((chunk_id + 1) * self.chunk_rows()).min(self.num_rows());
        (start, end)
    }

    /// Read one chunk into a fresh matrix.
    pub fn read_chunk(&self, chunk_id: usize) -> Result<Matrix<f32>> {
        let (start, end) = self.bounds_checked_range(chunk_id)?;
        let rows = end - start;
        let mut out = Matrix::zeros(rows, self.feature_dim());
        self.read_chunk_into(chunk_id, out.data_mut())?;
        Ok(out)
    }

    /// Read one chunk into a caller-provided f32 buffer of exactly
    /// `chunk_rows_effective * feature_dim` elements.
    pub fn read_chunk_into(&self, chunk_id: usize, out: &mut [f32]) -> Result<()> {
        let (start, end) = self.bounds_checked_range(chunk_id)?;
        let rows = end - start;
        let expected = rows * self.feature_dim();
        if out.len() != expected {
            return Err(Error::Shape(format!(
                "chunk {chunk_id} holds {expected} values but buffer has {}",
                out.len()
            )));
        }
        let byte_len = expected * 4;
        let mut bytes = vec![0u8; byte_len];
        self.file
            .read_exact_at(&mut bytes, self.chunk_offset(chunk_id))
            .map_err(|e| Error::io(&self.path, e))?;
        for (dst, src) in out.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
        Ok(())
    }

    /// Read an arbitrary row range by visiting the chunks that cover it.
    pub fn read_row_range(&self, start_row: usize, end_row: usize) -> Result<Matrix<f32>> {
        if start_row > end_row || end_row > self.num_rows() {
            return Err(Error::Shape(format!(
                "row range {start_row}..{end_row} out of bounds for {} rows",
                self.num_rows()
            )));
        }
        let f = self.feature_dim();
        let mut out = Matrix::zeros(end_row - start_row, f);
        if start_row == end_row {
            return Ok(out);
        }
        let first = start_row / self.chunk_rows();
        let last = (end_row - 1) / self.chunk_rows();
        for chunk_id in first..=last {
            let (c_start, c_end) = self.chunk_row_range(chunk_id);
            let chunk = self.read_chunk(chunk_id)?;
            let copy_start = start_row.max(c_start);
            let copy_end = end_row.min(c_end);
            for row in copy_start..copy_end {
                out.row_mut(row - start_row)
                    .copy_from_slice(chunk.row(row - c_start));
            }
        }
        Ok(out)
    }

    fn bounds_checked_range(&self, chunk_id: usize) -> Result<(usize, usize)> {
        if chunk_id >= self.num_chunks() {
            return Err(Error::Shape(format!(
                "chunk id {chunk_id} out of range ({} chunks)",
                self.num_chunks()
            )));
        }
        Ok(self.chunk_row_range(chunk_id))
    }
}

/// Write a dense matrix as a chunked hop file and reopen it read-only.
pub fn write_hop_file(
    matrix: &Matrix<f32>,
    path: &Path,
    chunk_rows: usize,
    hop_index: u16,
    operator_id: u16,
) -> Result<ChunkStore> {
    if chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be at least 1".into()));
    }
    let header = ChunkStoreHeader {
        version: PPGF_VERSION,
        num_rows: matrix.rows() as u64,
        feature_dim: matrix.cols() as u32,
        dtype_code: DTYPE_F32,
        chunk_rows: chunk_rows as u32,
        hop_index,
        operator_id,
        data_offset: ALIGNMENT,
    };

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(&header.encode())?;
        w.write_all(&vec![0u8; (header.data_offset as usize) - HEADER_BYTES])?;

        let payload = chunk_rows as u64 * matrix.cols() as u64 * 4;
        let padded = payload.div_ceil(ALIGNMENT) * ALIGNMENT;
        let num_chunks = matrix.rows().div_ceil(chunk_rows);
        for c in 0..num_chunks {
            let start = c * chunk_rows;
            let end = ((c + 1) * chunk_rows).min(matrix.rows());
            let mut written = 0u64;
            for row in start..end {
                for &v in matrix.row(row) {
                    w.write_all(&v.to_le_bytes())?;
                }
                written += matrix.cols() as u64 * 4;
            }
            w.write_all(&vec![0u8; (padded - written) as usize])?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))?;

    open_hop_store(path)
}

/// Open and validate an existing hop file.
pub fn open_hop_store(path: &Path) -> Result<ChunkStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_BYTES];
    file.read_exact_at(&mut buf, 0)
        .map_err(|e| Error::io(path, e))?;
    let header = ChunkStoreHeader::decode(&buf, path)?;

    let store = ChunkStore {
        header,
        file,
        path: path.to_path_buf(),
    };
    let expected_size = store.header.data_offset
        + store.num_chunks() as u64 * store.padded_chunk_bytes();
    let actual = store
        .file
        .metadata()
        .map_err(|e| Error::io(path, e))?
        .len();
    if actual != expected_size {
        return Err(Error::data(
            path,
            format!("file size {actual} does not match expected {expected_size}"),
        ));
    }
    Ok(store)
}

/// Open all hop files of one operator and check they agree on shape.
pub fn open_hop_set(dir: &Path, operator_id: u16, num_hops: usize) -> Result<Vec<ChunkStore>> {
    let mut stores = Vec::with_capacity(num_hops + 1);
    for hop in 0..=num_hops {
        let path = hop_file_path(dir, operator_id, hop);
        let store = open_hop_store(&path)?;
        if store.header().hop_index as usize != hop {
            return Err(Error::data(&path, "hop index does not match file name"));
        }
        if let Some(first) = stores.first() {
            let first: &ChunkStore = first;
            if store.num_rows() != first.num_rows()
                || store.feature_dim() != first.feature_dim()
                || store.chunk_rows() != first.chunk_rows()
            {
                return Err(Error::data(
                    &path,
                    "hop files disagree on rows, feature dim, or chunk size",
                ));
            }
        }
        stores.push(store);
    }
    Ok(stores)
}

/// Path convention for hop files: `<dir>/hop_<operator>_<hop>.ppgf`.
pub fn hop_file_path(dir: &Path, operator_id: u16, hop: usize) -> PathBuf {
    dir.join(format!("hop_{operator_id}_{hop}.ppgf"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random()).collect())
    }

    #[test]
    fn chunk_layout_for_ten_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(1, 10, 2);
        let store = write_hop_file(&m, &path, 4, 0, 0).unwrap();
        assert_eq!(store.num_chunks(), 3);
        assert_eq!(store.chunk_row_range(0), (0, 4));
        assert_eq!(store.chunk_row_range(1), (4, 8));
        assert_eq!(store.chunk_row_range(2), (8, 10));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(2, 10, 2);
        let store = write_hop_file(&m, &path, 4, 3, 1).unwrap();
        let mut rows = Vec::new();
        for c in 0..store.num_chunks() {
            let chunk = store.read_chunk(c).unwrap();
            rows.extend_from_slice(chunk.data());
        }
        assert_eq!(rows, m.data());
        assert_eq!(store.header().hop_index, 3);
        assert_eq!(store.header().operator_id, 1);
    }

    #[test]
    fn single_row_huge_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(3, 1, 1);
        let store = write_hop_file(&m, &path, 8000, 0, 0).unwrap();
        assert_eq!(store.num_chunks(), 1);
        let got = store.read_chunk(0).unwrap();
        assert_eq!(got.data(), m.data());
        // file is padded to a whole chunk
        let size = std::fs::metadata(&path).unwrap().len();
        assert_eq!(size, store.chunk_offset(0) + store.padded_chunk_bytes());
    }

    #[test]
    fn ragged_last_chunk_has_leftover_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(4, 10, 3);
        let store = write_hop_file(&m, &path, 4, 0, 0).unwrap();
        let last = store.read_chunk(2).unwrap();
        assert_eq!(last.rows(), 2);
        assert_eq!(last.row(0), m.row(8));
        assert_eq!(last.row(1), m.row(9));
    }

    #[test]
    fn chunk_offsets_are_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(5, 100, 7);
        let store = write_hop_file(&m, &path, 9, 0, 0).unwrap();
        for c in 0..store.num_chunks() {
            assert_eq!(store.chunk_offset(c) % 4096, 0);
        }
    }

    #[test]
    fn out_of_range_chunk_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(6, 10, 2);
        let store = write_hop_file(&m, &path, 4, 0, 0).unwrap();
        assert!(store.read_chunk(3).is_err());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(7, 10, 2);
        write_hop_file(&m, &path, 4, 0, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = open_hop_store(&path).unwrap_err();
        assert!(format!("{err}").contains("magic"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(8, 10, 2);
        write_hop_file(&m, &path, 4, 0, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = open_hop_store(&path).unwrap_err();
        assert!(format!("{err}").contains("size"));
    }

    #[test]
    fn read_row_range_spans_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hop.ppgf");
        let m = random_matrix(9, 23, 5);
        let store = write_hop_file(&m, &path, 4, 0, 0).unwrap();
        let got = store.read_row_range(3, 18).unwrap();
        for (i, row) in (3..18).enumerate() {
            assert_eq!(got.row(i), m.row(row));
        }
        assert_eq!(store.read_row_range(5, 5).unwrap().rows(), 0);
    }

    #[test]
    fn hop_set_validation_catches_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = random_matrix(10, 10, 2);
        let b = random_matrix(11, 10, 3); // different feature dim
        write_hop_file(&a, &hop_file_path(dir.path(), 0, 0), 4, 0, 0).unwrap();
        write_hop_file(&b, &hop_file_path(dir.path(), 0, 1), 4, 1, 0).unwrap();
        assert!(open_hop_set(dir.path(), 0, 1).is_err());
    }
}
