//! Per-epoch batch schedules.
//!
//! Two shuffling granularities: row-level random reshuffling (a fresh uniform
//! permutation of training rows each epoch) and chunk reshuffling (permuting
//! fixed-size runs of contiguous rows, enabling bulk transfers). Shuffles use
//! a seeded ChaCha8 generator with Fisher-Yates, so a (seed, parameters) pair
//! fully determines the schedule.
//!
//! Training rows are assumed to occupy `[0, train_rows)` in the stored
//! matrices; preprocessing reorders nodes so the training split is a prefix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Row-level random reshuffling.
    Rr,
    /// Chunk reshuffling.
    Cr,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Rr => write!(f, "rr"),
            Method::Cr => write!(f, "cr"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rr" => Ok(Method::Rr),
            "cr" => Ok(Method::Cr),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected rr|cr)"
            ))),
        }
    }
}

/// One batch is either explicit row ids or chunk ids to expand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchSpec {
    Rows(Vec<u32>),
    Chunks(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct EpochSchedule {
    pub method: Method,
    pub batch_size: usize,
    /// Chunk granularity; 0 for row reshuffling.
    pub chunk_rows: usize,
    pub train_rows: usize,
    pub epoch_seed: u64,
    pub batches: Vec<BatchSpec>,
}

impl EpochSchedule {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    /// Rows of chunk `c`: `[c * chunk_rows, min((c+1) * chunk_rows, train_rows))`.
    pub fn chunk_range(&self, chunk_id: u32) -> (usize, usize) {
        chunk_range(self.train_rows, self.chunk_rows, chunk_id)
    }

    /// Row ids of one batch in delivery order (chunks expand to ascending runs).
    pub fn batch_rows(&self, idx: usize) -> Vec<u32> {
        match &self.batches[idx] {
            BatchSpec::Rows(rows) => rows.clone(),
            BatchSpec::Chunks(chunks) => {
                let mut rows = Vec::new();
                for &c in chunks {
                    let (start, end) = self.chunk_range(c);
                    rows.extend((start as u32)..(end as u32));
                }
                rows
            }
        }
    }

    pub fn batch_row_count(&self, idx: usize) -> usize {
        match &self.batches[idx] {
            BatchSpec::Rows(rows) => rows.len(),
            BatchSpec::Chunks(chunks) => chunks
                .iter()
                .map(|&c| {
                    let (start, end) = self.chunk_range(c);
                    end - start
                })
                .sum(),
        }
    }
}

fn chunk_range(train_rows: usize, chunk_rows: usize, chunk_id: u32) -> (usize, usize) {
    let start = chunk_id as usize * chunk_rows;
    let end = ((chunk_id as usize + 1) * chunk_rows).min(train_rows);
    (start, end)
}

/// Uniformly permute `[0, train_rows)` and split into consecutive batches.
pub fn rr_schedule(train_rows: usize, batch_size: usize, seed: u64) -> Result<EpochSchedule> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<u32> = (0..train_rows as u32).collect();
    perm.shuffle(&mut rng);

    let batches = perm
        .chunks(batch_size)
        .map(|b| BatchSpec::Rows(b.to_vec()))
        .collect();
    Ok(EpochSchedule {
        method: Method::Rr,
        batch_size,
        chunk_rows: 0,
        train_rows,
        epoch_seed: seed,
        batches,
    })
}

/// Permute fixed-size chunks of contiguous training rows, then group
/// consecutive permuted chunks into batches until each batch reaches at least
/// `batch_size` rows. The ragged final chunk joins whichever batch it lands
/// in, preserving exactly-once coverage.
pub fn cr_schedule(
    train_rows: usize,
    chunk_rows: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EpochSchedule> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be at least 1".into()));
    }
    if chunk_rows > batch_size {
        return Err(Error::Config("chunk must not exceed batch".into()));
    }
    let num_chunks = train_rows.div_ceil(chunk_rows);
    let mut order: Vec<u32> = (0..num_chunks as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let batches = group_chunks_into_batches(&order, train_rows, chunk_rows, batch_size);
    Ok(EpochSchedule {
        method: Method::Cr,
        batch_size,
        chunk_rows,
        train_rows,
        epoch_seed: seed,
        batches,
    })
}

/// Batch grouping for a given chunk order; split out so tests can enumerate
/// every permutation directly.
pub fn group_chunks_into_batches(
    order: &[u32],
    train_rows: usize,
    chunk_rows: usize,
    batch_size: usize,
) -> Vec<BatchSpec> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut rows_in_batch = 0usize;
    for &c in order {
        let (start, end) = chunk_range(train_rows, chunk_rows, c);
        current.push(c);
        rows_in_batch += end - start;
        if rows_in_batch >= batch_size {
            batches.push(BatchSpec::Chunks(std::mem::take(&mut current)));
            rows_in_batch = 0;
        }
    }
    if !current.is_empty() {
        batches.push(BatchSpec::Chunks(current));
    }
    batches
}
