//! Batch assembly against data tiers, with serial and prefetching loaders.
//!
//! Hop features live in one of three tiers. `Resident` models data already in
//! fast memory: rows are gathered straight into the batch. `Staged` models
//! data in bulk memory: rows are gathered into a fixed staging buffer and then
//! copied ("transferred") into the batch, optionally with an injected transfer
//! delay standing in for a DMA hop. `Storage` reads whole chunks from the
//! hop-split files, one positioned read per (hop, chunk), with the R+1 hop
//! reads of a batch issued concurrently; it only accepts chunk-reshuffled
//! schedules.
//!
//! The prefetch loader rendezvouses a producer thread (assembly + transfer)
//! with the consuming training step through a single-slot handoff, giving
//! double-buffer semantics: batch i+1 is assembled while batch i is being
//! consumed, and at most two batches exist at any instant.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sampler::{rr_schedule, BatchSpec, EpochSchedule, Method};
use crate::store::ChunkStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TierKind {
    /// Hop matrices held in fast memory.
    Resident,
    /// Hop matrices in bulk memory; batches pass through a staging buffer.
    Staged,
    /// Hop data read chunk-wise from on-disk stores.
    Storage,
}

impl std::fmt::Display for TierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TierKind::Resident => write!(f, "resident"),
            TierKind::Staged => write!(f, "staged"),
            TierKind::Storage => write!(f, "storage"),
        }
    }
}

impl std::str::FromStr for TierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resident" => Ok(TierKind::Resident),
            "staged" => Ok(TierKind::Staged),
            "storage" => Ok(TierKind::Storage),
            other => Err(Error::Config(format!(
                "unknown tier {other:?} (expected resident|staged|storage)"
            ))),
        }
    }
}

/// Cumulative per-epoch loading counters. Monotone within an epoch; callers
/// snapshot before and after to attribute work to one epoch.
#[derive(Debug, Default)]
pub struct TransferStats {
    bytes_assembled: AtomicU64,
    bytes_transferred: AtomicU64,
    batches_produced: AtomicU64,
    assemble_micros: AtomicU64,
    transfer_micros: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferSnapshot {
    pub bytes_assembled: u64,
    pub bytes_transferred: u64,
    pub batches_produced: u64,
    pub assemble_micros: u64,
    pub transfer_micros: u64,
}

impl TransferStats {
    pub fn snapshot(&self) -> TransferSnapshot {
        TransferSnapshot {
            bytes_assembled: self.bytes_assembled.load(Ordering::Relaxed),
            bytes_transferred: self.bytes_transferred.load(Ordering::Relaxed),
            batches_produced: self.batches_produced.load(Ordering::Relaxed),
            assemble_micros: self.assemble_micros.load(Ordering::Relaxed),
            transfer_micros: self.transfer_micros.load(Ordering::Relaxed),
        }
    }
}

impl TransferSnapshot {
    /// Counter deltas since `earlier`.
    pub fn since(&self, earlier: &TransferSnapshot) -> TransferSnapshot {
        TransferSnapshot {
            bytes_assembled: self.bytes_assembled - earlier.bytes_assembled,
            bytes_transferred: self.bytes_transferred - earlier.bytes_transferred,
            batches_produced: self.batches_produced - earlier.batches_produced,
            assemble_micros: self.assemble_micros - earlier.assemble_micros,
            transfer_micros: self.transfer_micros - earlier.transfer_micros,
        }
    }
}

#[derive(Clone)]
enum TierData {
    Resident { hops: Arc<Vec<Matrix<f32>>> },
    Staged { hops: Arc<Vec<Matrix<f32>>> },
    Storage { stores: Arc<Vec<ChunkStore>> },
}

/// A data tier plus the always-resident training labels.
#[derive(Clone)]
pub struct Tier {
    data: TierData,
    labels: Arc<Vec<u32>>,
    inject_assemble_us: u64,
    inject_transfer_us: u64,
    stats: Arc<TransferStats>,
}

impl Tier {
    pub fn resident(hops: Arc<Vec<Matrix<f32>>>, labels: Arc<Vec<u32>>) -> Result<Tier> {
        Self::memory_tier(TierData::Resident { hops }, labels)
    }

    pub fn staged(hops: Arc<Vec<Matrix<f32>>>, labels: Arc<Vec<u32>>) -> Result<Tier> {
        Self::memory_tier(TierData::Staged { hops }, labels)
    }

    fn memory_tier(data: TierData, labels: Arc<Vec<u32>>) -> Result<Tier> {
        let hops = match &data {
            TierData::Resident { hops } | TierData::Staged { hops } => hops,
            TierData::Storage { .. } => unreachable!(),
        };
        if hops.is_empty() {
            return Err(Error::Config("tier needs at least one hop matrix".into()));
        }
        let rows = hops[0].rows();
        let cols = hops[0].cols();
        if hops.iter().any(|h| h.rows() != rows || h.cols() != cols) {
            return Err(Error::Shape("hop matrices disagree on shape".into()));
        }
        if labels.len() > rows {
            return Err(Error::Shape(format!(
                "{} labels but only {rows} feature rows",
                labels.len()
            )));
        }
        Ok(Tier {
            data,
            labels,
            inject_assemble_us: 0,
            inject_transfer_us: 0,
            stats: Arc::new(TransferStats::default()),
        })
    }

    pub fn storage(stores: Arc<Vec<ChunkStore>>, labels: Arc<Vec<u32>>) -> Result<Tier> {
        if stores.is_empty() {
            return Err(Error::Config(
                "storage tier needs at least one hop file".into(),
            ));
        }
        let rows = stores[0].num_rows();
        let cols = stores[0].feature_dim();
        let chunk = stores[0].chunk_rows();
        for s in stores.iter() {
            if s.num_rows() != rows || s.feature_dim() != cols || s.chunk_rows() != chunk {
                return Err(Error::data(
                    s.path(),
                    "hop files disagree on rows, feature dim, or chunk size",
                ));
            }
        }
        if labels.len() > rows {
            return Err(Error::Shape(format!(
                "{} labels but only {rows} stored rows",
                labels.len()
            )));
        }
        Ok(Tier {
            data: TierData::Storage { stores },
            labels,
            inject_assemble_us: 0,
            inject_transfer_us: 0,
            stats: Arc::new(TransferStats::default()),
        })
    }

    /// Benchmark mode: per-batch delays added to assembly and transfer.
    pub fn with_injected_delays(mut self, assemble_us: u64, transfer_us: u64) -> Tier {
        self.inject_assemble_us = assemble_us;
        self.inject_transfer_us = transfer_us;
        self
    }

    pub fn kind(&self) -> TierKind {
        match &self.data {
            TierData::Resident { .. } => TierKind::Resident,
            TierData::Staged { .. } => TierKind::Staged,
            TierData::Storage { .. } => TierKind::Storage,
        }
    }

    pub fn stats(&self) -> &TransferStats {
        &self.stats
    }

    pub fn num_hops_stored(&self) -> usize {
        match &self.data {
            TierData::Resident { hops } | TierData::Staged { hops } => hops.len(),
            TierData::Storage { stores } => stores.len(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.data {
            TierData::Resident { hops } | TierData::Staged { hops } => hops[0].cols(),
            TierData::Storage { stores } => stores[0].feature_dim(),
        }
    }

    /// Labeled training rows served by this tier.
    pub fn train_rows(&self) -> usize {
        self.labels.len()
    }

    /// Chunk granularity of the backing stores; `None` for memory tiers.
    pub fn storage_chunk_rows(&self) -> Option<usize> {
        match &self.data {
            TierData::Storage { stores } => Some(stores[0].chunk_rows()),
            _ => None,
        }
    }
}

/// One assembled minibatch: R+1 hop matrices sharing row order, plus labels
/// and the global (stored-order) row ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub hops: Vec<Matrix<f32>>,
    pub labels: Vec<u32>,
    pub rows: Vec<u32>,
    pub ordinal: usize,
}

impl Batch {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Bytes of assembled hop feature data.
    pub fn feature_bytes(&self) -> u64 {
        self.hops.iter().map(|h| h.byte_size()).sum()
    }
}

/// Injected delays model time some *other* device (DMA engine, interconnect,
/// accelerator) is busy, so they sleep and leave the CPUs to the opposite
/// pipeline worker.
pub(crate) fn inject_delay_us(us: u64) {
    if us > 0 {
        std::thread::sleep(Duration::from_micros(us));
    }
}

/// Reusable assembly state. The staging buffer for the staged tier is
/// allocated once and reused for every batch of the epoch.
struct Assembler {
    tier: Tier,
    staging: Vec<Matrix<f32>>,
}

impl Assembler {
    fn new(tier: Tier) -> Self {
        Assembler {
            tier,
            staging: Vec::new(),
        }
    }

    fn ensure_staging(&mut self, rows: usize, cols: usize, hops: usize) {
        let fits = self.staging.len() == hops
            && self
                .staging
                .iter()
                .all(|m| m.rows() >= rows && m.cols() == cols);
        if !fits {
            self.staging = (0..hops).map(|_| Matrix::zeros(rows, cols)).collect();
        }
    }

    fn assemble(&mut self, schedule: &EpochSchedule, idx: usize) -> Result<Batch> {
        match &schedule.batches[idx] {
            BatchSpec::Rows(rows) => {
                let rows = rows.clone();
                self.assemble_rows(&rows, idx)
            }
            BatchSpec::Chunks(chunks) => {
                let chunks = chunks.clone();
                self.assemble_chunks(schedule, &chunks, idx)
            }
        }
    }

    fn gather_labels(&self, rows: &[u32]) -> Result<Vec<u32>> {
        let labels = &self.tier.labels;
        rows.iter()
            .map(|&r| {
                labels
                    .get(r as usize)
                    .copied()
                    .ok_or_else(|| Error::Shape(format!("row id {r} out of range")))
            })
            .collect()
    }

    /// Row-level assembly: a single gather pass per hop matrix.
    fn assemble_rows(&mut self, rows: &[u32], ordinal: usize) -> Result<Batch> {
        let labels = self.gather_labels(rows)?;
        let stats = Arc::clone(&self.tier.stats);
        let b = rows.len();

        let hops = match &self.tier.data {
            TierData::Resident { hops } => {
                let src = Arc::clone(hops);
                let t0 = Instant::now();
                let out = gather_rows(&src, rows)?;
                inject_delay_us(self.tier.inject_assemble_us);
                stats
                    .assemble_micros
                    .fetch_add(t0.elapsed().as_micros() as u64, Ordering::Relaxed);
                let bytes: u64 = out.iter().map(|m| m.byte_size()).sum();
                stats.bytes_assembled.fetch_add(bytes, Ordering::Relaxed);
                out
            }
            TierData::Staged { hops } => {
                let src = Arc::clone(hops);
                let n = src[0].rows();
                if let Some(&bad) = rows.iter().find(|&&r| r as usize >= n) {
                    return Err(Error::Shape(format!("row id {bad} out of range ({n} rows)")));
                }
                let f = src[0].cols();
                self.ensure_staging(b, f, src.len());

                let t0 = Instant::now();
                for (stage, hop) in self.staging.iter_mut().zip(src.iter()) {
                    for (k, &r) in rows.iter().enumerate() {
                        stage.row_mut(k).copy_from_slice(hop.row(r as usize));
                    }
                }
                inject_delay_us(self.tier.inject_assemble_us);
                stats
                    .assemble_micros
                    .fetch_add(t0.elapsed().as_micros() as u64, Ordering::Relaxed);

                let t1 = Instant::now();
                let out: Vec<Matrix<f32>> = self
                    .staging
                    .iter()
                    .map(|stage| stage.slice_rows(0, b))
                    .collect();
                inject_delay_us(self.tier.inject_transfer_us);
                stats
                    .transfer_micros
                    .fetch_add(t1.elapsed().as_micros() as u64, Ordering::Relaxed);

                let bytes: u64 = out.iter().map(|m| m.byte_size()).sum();
                stats.bytes_assembled.fetch_add(bytes, Ordering::Relaxed);
                stats.bytes_transferred.fetch_add(bytes, Ordering::Relaxed);
                out
            }
            TierData::Storage { .. } => {
                return Err(Error::Config(
                    "row-level assembly requires a memory tier; storage serves chunks only".into(),
                ))
            }
        };

        stats.batches_produced.fetch_add(1, Ordering::Relaxed);
        Ok(Batch {
            hops,
            labels,
            rows: rows.to_vec(),
            ordinal,
        })
    }

    /// Chunk-level assembly: chunks are copied contiguously in schedule order.
    fn assemble_chunks(
        &mut self,
        schedule: &EpochSchedule,
        chunks: &[u32],
        ordinal: usize,
    ) -> Result<Batch> {
        if schedule.method != Method::Cr {
            return Err(Error::Config(
                "chunk assembly requires a chunk schedule".into(),
            ));
        }
        let mut rows: Vec<u32> = Vec::new();
        for &c in chunks {
            let (start, end) = schedule.chunk_range(c);
            rows.extend(start as u32..end as u32);
        }
        let labels = self.gather_labels(&rows)?;
        let stats = Arc::clone(&self.tier.stats);
        let b = rows.len();

        let hops = match &self.tier.data {
            TierData::Resident { hops } => {
                let src = Arc::clone(hops);
                let t0 = Instant::now();
                let out = copy_chunks(&src, schedule, chunks, b)?;
                inject_delay_us(self.tier.inject_assemble_us);
                stats
                    .assemble_micros
                    .fetch_add(t0.elapsed().as_micros() as u64, Ordering::Relaxed);
                let bytes: u64 = out.iter().map(|m| m.byte_size()).sum();
                stats.bytes_assembled.fetch_add(bytes, Ordering::Relaxed);
                out
            }
            TierData::Staged { hops } => {
                let src = Arc::clone(hops);
                let f = src[0].cols();
                self.ensure_staging(b, f, src.len());

                let t0 = Instant::now();
                for (stage, hop) in self.staging.iter_mut().zip(src.iter()) {
                    let mut cursor = 0usize;
                    for &c in chunks {
                        let (start, end) = schedule.chunk_range(c);
                        if end > hop.rows() {
                            return Err(Error::Shape(format!(
                                "chunk {c} exceeds hop matrix rows"
                            )));
                        }
                        let width = f * (end - start);
                        stage.data_mut()[cursor * f..cursor * f + width]
                            .copy_from_slice(&hop.data()[start * f..end * f]);
                        cursor += end - start;
                    }
                }
                inject_delay_us(self.tier.inject_assemble_us);
                stats
                    .assemble_micros
                    .fetch_add(t0.elapsed().as_micros() as u64, Ordering::Relaxed);

                let t1 = Instant::now();
                let out: Vec<Matrix<f32>> = self
                    .staging
                    .iter()
                    .map(|stage| stage.slice_rows(0, b))
                    .collect();
                inject_delay_us(self.tier.inject_transfer_us);
                stats
                    .transfer_micros
                    .fetch_add(t1.elapsed().as_micros() as u64, Ordering::Relaxed);

                let bytes: u64 = out.iter().map(|m| m.byte_size()).sum();
                stats.bytes_assembled.fetch_add(bytes, Ordering::Relaxed);
                stats.bytes_transferred.fetch_add(bytes, Ordering::Relaxed);
                out
            }
            TierData::Storage { stores } => {
                let stores = Arc::clone(stores);
                let f = stores[0].feature_dim();
                let t0 = Instant::now();
                let mut out: Vec<Matrix<f32>> =
                    (0..stores.len()).map(|_| Matrix::zeros(b, f)).collect();
                // the per-hop reads of this batch go out in parallel
                out.par_iter_mut()
                    .zip(stores.par_iter())
                    .enumerate()
                    .try_for_each(|(hop, (dst, store))| -> Result<()> {
                        let mut cursor = 0usize;
                        for &c in chunks {
                            let (start, end) = schedule.chunk_range(c);
                            let rows_in_chunk = end - start;
                            let dst_slice =
                                &mut dst.data_mut()[cursor * f..(cursor + rows_in_chunk) * f];
                            let (file_start, file_end) = store.chunk_row_range(c as usize);
                            if file_start != start || file_end < end {
                                return Err(Error::Runtime(format!(
                                    "hop {hop} chunk {c}: file chunk {file_start}..{file_end} \
                                     cannot serve schedule rows {start}..{end}"
                                )));
                            }
                            if file_end == end {
                                store.read_chunk_into(c as usize, dst_slice).map_err(|e| {
                                    Error::Runtime(format!("hop {hop} chunk {c}: {e}"))
                                })?;
                            } else {
                                // the last training chunk covers only the head
                                // of its file chunk when validation/test rows
                                // follow the training prefix
                                let full = store.read_chunk(c as usize).map_err(|e| {
                                    Error::Runtime(format!("hop {hop} chunk {c}: {e}"))
                                })?;
                                dst_slice.copy_from_slice(&full.data()[..rows_in_chunk * f]);
                            }
                            cursor += rows_in_chunk;
                        }
                        Ok(())
                    })?;
                inject_delay_us(self.tier.inject_assemble_us);
                inject_delay_us(self.tier.inject_transfer_us);
                stats
                    .transfer_micros
                    .fetch_add(t0.elapsed().as_micros() as u64, Ordering::Relaxed);
                let bytes: u64 = out.iter().map(|m| m.byte_size()).sum();
                stats.bytes_assembled.fetch_add(bytes, Ordering::Relaxed);
                stats.bytes_transferred.fetch_add(bytes, Ordering::Relaxed);
                out
            }
        };

        stats.batches_produced.fetch_add(1, Ordering::Relaxed);
        Ok(Batch {
            hops,
            labels,
            rows,
            ordinal,
        })
    }
}

fn gather_rows(src: &[Matrix<f32>], rows: &[u32]) -> Result<Vec<Matrix<f32>>> {
    let n = src[0].rows();
    if let Some(&bad) = rows.iter().find(|&&r| r as usize >= n) {
        return Err(Error::Shape(format!("row id {bad} out of range ({n} rows)")));
    }
    Ok(src
        .iter()
        .map(|hop| {
            let mut out = Matrix::zeros(rows.len(), hop.cols());
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(k).copy_from_slice(hop.row(r as usize));
            }
            out
        })
        .collect())
}

fn copy_chunks(
    src: &[Matrix<f32>],
    schedule: &EpochSchedule,
    chunks: &[u32],
    batch_rows: usize,
) -> Result<Vec<Matrix<f32>>> {
    let f = src[0].cols();
    src.iter()
        .map(|hop| {
            let mut out = Matrix::zeros(batch_rows, f);
            let mut cursor = 0usize;
            for &c in chunks {
                let (start, end) = schedule.chunk_range(c);
                if end > hop.rows() {
                    return Err(Error::Shape(format!("chunk {c} exceeds hop matrix rows")));
                }
                let width = f * (end - start);
                out.data_mut()[cursor * f..cursor * f + width]
                    .copy_from_slice(&hop.data()[start * f..end * f]);
                cursor += end - start;
            }
            Ok(out)
        })
        .collect()
}

/// Row-level batch assembly (resident and staged tiers).
pub fn assemble_batch_rows(tier: &Tier, rows: &[u32], ordinal: usize) -> Result<Batch> {
    Assembler::new(tier.clone()).assemble_rows(rows, ordinal)
}

/// Chunk-level batch assembly (all tiers).
pub fn assemble_batch_chunks(
    tier: &Tier,
    schedule: &EpochSchedule,
    chunks: &[u32],
    ordinal: usize,
) -> Result<Batch> {
    Assembler::new(tier.clone()).assemble_chunks(schedule, chunks, ordinal)
}

fn validate(schedule: &EpochSchedule, tier: &Tier) -> Result<()> {
    if tier.kind() == TierKind::Storage && schedule.method != Method::Cr {
        return Err(Error::Config(
            "storage tier only supports chunk reshuffling".into(),
        ));
    }
    if let Some(store_chunk) = tier.storage_chunk_rows() {
        if schedule.method == Method::Cr && schedule.chunk_rows != store_chunk {
            return Err(Error::Config(format!(
                "schedule chunk_rows {} does not match stored chunk_rows {store_chunk}",
                schedule.chunk_rows
            )));
        }
    }
    if schedule.train_rows != tier.train_rows() {
        return Err(Error::Shape(format!(
            "schedule covers {} training rows but tier serves {}",
            schedule.train_rows,
            tier.train_rows()
        )));
    }
    Ok(())
}

/// Yields batches strictly in schedule order, assembling each on demand.
pub struct SerialLoader {
    schedule: Arc<EpochSchedule>,
    asm: Assembler,
    next_idx: usize,
    failed: bool,
}

impl Iterator for SerialLoader {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_idx >= self.schedule.num_batches() {
            return None;
        }
        let idx = self.next_idx;
        self.next_idx += 1;
        let out = self.asm.assemble(&self.schedule, idx);
        if out.is_err() {
            self.failed = true;
        }
        Some(out)
    }
}

pub fn serial_loader(schedule: &EpochSchedule, tier: &Tier) -> Result<SerialLoader> {
    validate(schedule, tier)?;
    Ok(SerialLoader {
        schedule: Arc::new(schedule.clone()),
        asm: Assembler::new(tier.clone()),
        next_idx: 0,
        failed: false,
    })
}

/// Single-slot rendezvous between the producer and consumer threads.
///
/// `send` publishes one item and then blocks until the consumer has taken it,
/// so the producer never runs more than one batch ahead: together with the
/// item the consumer holds, at most two batches exist at any instant.
///
/// Waiting polls (briefly spinning, then yielding) instead of parking on a
/// futex: handoffs happen once per batch and cross-thread wake-up latency
/// would otherwise dominate millisecond-scale pipeline measurements. A waiter
/// yields its core whenever other threads are runnable.
struct RendezvousSlot {
    item: Mutex<Option<Result<Batch>>>,
    producer_done: AtomicBool,
    consumer_gone: AtomicBool,
}

fn poll_backoff(iteration: u32) {
    if iteration < 64 {
        std::hint::spin_loop();
    } else if iteration < 4096 {
        std::thread::yield_now();
    } else {
        // long waits (the other side is doing real work): stop burning the
        // core and poll at a coarse interval instead
        std::thread::sleep(Duration::from_micros(100));
    }
}

impl RendezvousSlot {
    fn new() -> Self {
        RendezvousSlot {
            item: Mutex::new(None),
            producer_done: AtomicBool::new(false),
            consumer_gone: AtomicBool::new(false),
        }
    }

    /// Publish and wait for pickup. Returns false if the consumer went away.
    fn send(&self, item: Result<Batch>) -> bool {
        *self.item.lock().expect("slot poisoned") = Some(item);
        let mut i = 0u32;
        loop {
            if self.consumer_gone.load(Ordering::Acquire) {
                return false;
            }
            if self.item.lock().expect("slot poisoned").is_none() {
                return true;
            }
            poll_backoff(i);
            i = i.wrapping_add(1);
        }
    }

    /// Take the next item; `None` once the producer finished and the slot
    /// drained.
    fn recv(&self) -> Option<Result<Batch>> {
        let mut i = 0u32;
        loop {
            if let Some(item) = self.item.lock().expect("slot poisoned").take() {
                return Some(item);
            }
            if self.producer_done.load(Ordering::Acquire) {
                // check the slot once more: the producer may have published
                // between our take attempt and the done flag read
                return self.item.lock().expect("slot poisoned").take();
            }
            poll_backoff(i);
            i = i.wrapping_add(1);
        }
    }
}

/// Double-buffered loader: one producer thread assembles batch i+1 while the
/// consumer processes batch i. Delivery order equals schedule order; a
/// producer error is delivered at its ordinal and ends iteration.
pub struct PrefetchLoader {
    slot: Arc<RendezvousSlot>,
    handle: Option<JoinHandle<()>>,
    failed: bool,
}

impl Iterator for PrefetchLoader {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.slot.recv() {
            Some(item) => {
                if item.is_err() {
                    self.failed = true;
                }
                Some(item)
            }
            None => None,
        }
    }
}

impl Drop for PrefetchLoader {
    fn drop(&mut self) {
        // unblock any in-flight send, then wait for the producer to exit
        self.slot.consumer_gone.store(true, Ordering::Release);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

pub fn prefetch_loader(schedule: &EpochSchedule, tier: &Tier) -> Result<PrefetchLoader> {
    validate(schedule, tier)?;
    let schedule = Arc::new(schedule.clone());
    let slot = Arc::new(RendezvousSlot::new());
    let producer_slot = Arc::clone(&slot);
    let mut asm = Assembler::new(tier.clone());

    let handle = std::thread::Builder::new()
        .name("ppgnn-prefetch".into())
        .spawn(move || {
            for idx in 0..schedule.num_batches() {
                let item = asm.assemble(&schedule, idx);
                let stop = item.is_err();
                if !producer_slot.send(item) {
                    return; // consumer went away
                }
                if stop {
                    break;
                }
            }
            producer_slot.producer_done.store(true, Ordering::Release);
        })
        .map_err(|e| Error::Runtime(format!("failed to spawn prefetch thread: {e}")))?;

    Ok(PrefetchLoader {
        slot,
        handle: Some(handle),
        failed: false,
    })
}

/// Configuration for the serial-vs-prefetch loader benchmark.
#[derive(Debug, Clone)]
pub struct LoaderBenchConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub num_hops: usize,
    pub tier: TierKind,
    pub inject_assemble_us: u64,
    pub inject_compute_us: u64,
    pub seed: u64,
}

impl Default for LoaderBenchConfig {
    fn default() -> Self {
        LoaderBenchConfig {
            batches: 100,
            batch_size: 64,
            feature_dim: 16,
            num_hops: 2,
            tier: TierKind::Resident,
            inject_assemble_us: 1000,
            inject_compute_us: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoaderBenchReport {
    pub batches: usize,
    pub serial_wall_ms: f64,
    pub prefetch_wall_ms: f64,
    pub speedup: f64,
    pub sequences_match: bool,
    pub serial_stats: TransferSnapshot,
    pub prefetch_stats: TransferSnapshot,
}

/// Run the same synthetic epoch through both loaders with injected assembly
/// delay (producer side) and compute delay (consumer side), report wall times
/// and verify the two batch sequences are identical.
pub fn bench_loaders(cfg: &LoaderBenchConfig) -> Result<LoaderBenchReport> {
    if cfg.batches == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "benchmark needs at least one batch and row".into(),
        ));
    }
    if cfg.tier == TierKind::Storage {
        return Err(Error::Config(
            "loader benchmark supports resident and staged tiers".into(),
        ));
    }
    let train_rows = cfg.batches * cfg.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hops: Vec<Matrix<f32>> = (0..=cfg.num_hops)
        .map(|_| {
            Matrix::from_vec(
                train_rows,
                cfg.feature_dim,
                (0..train_rows * cfg.feature_dim)
                    .map(|_| rng.random())
                    .collect(),
            )
        })
        .collect();
    let hops = Arc::new(hops);
    let labels = Arc::new(vec![0u32; train_rows]);
    let schedule = rr_schedule(train_rows, cfg.batch_size, cfg.seed)?;

    let make_tier = |kind: TierKind| -> Result<Tier> {
        let t = match kind {
            TierKind::Resident => Tier::resident(Arc::clone(&hops), Arc::clone(&labels))?,
            TierKind::Staged => Tier::staged(Arc::clone(&hops), Arc::clone(&labels))?,
            TierKind::Storage => unreachable!(),
        };
        Ok(t.with_injected_delays(cfg.inject_assemble_us, 0))
    };

    let run = |iter: Box<dyn Iterator<Item = Result<Batch>>>| -> Result<(f64, Vec<Batch>)> {
        let mut collected = Vec::with_capacity(cfg.batches);
        let t0 = Instant::now();
        for item in iter {
            let batch = item?;
            inject_delay_us(cfg.inject_compute_us);
            collected.push(batch);
        }
        Ok((t0.elapsed().as_secs_f64() * 1e3, collected))
    };

    let serial_tier = make_tier(cfg.tier)?;
    let (serial_wall_ms, serial_batches) = run(Box::new(serial_loader(&schedule, &serial_tier)?))?;

    let prefetch_tier = make_tier(cfg.tier)?;
    let (prefetch_wall_ms, prefetch_batches) =
        run(Box::new(prefetch_loader(&schedule, &prefetch_tier)?))?;

    let sequences_match = batches_equal(&serial_batches, &prefetch_batches);

    Ok(LoaderBenchReport {
        batches: cfg.batches,
        serial_wall_ms,
        prefetch_wall_ms,
        speedup: serial_wall_ms / prefetch_wall_ms,
        sequences_match,
        serial_stats: serial_tier.stats().snapshot(),
        prefetch_stats: prefetch_tier.stats().snapshot(),
    })
}

/// Bitwise equality of two batch sequences.
pub fn batches_equal(a: &[Batch], b: &[Batch]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.ordinal == y.ordinal
                && x.rows == y.rows
                && x.labels == y.labels
                && x.hops.len() == y.hops.len()
                && x.hops
                    .iter()
                    .zip(&y.hops)
                    .all(|(hx, hy)| hx.data() == hy.data())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::cr_schedule;
    use crate::store::{hop_file_path, write_hop_file};

    fn make_hops(
        train_rows: usize,
        f: usize,
        num_hops: usize,
        seed: u64,
    ) -> Arc<Vec<Matrix<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(
            (0..=num_hops)
                .map(|_| {
                    Matrix::from_vec(
                        train_rows,
                        f,
                        (0..train_rows * f).map(|_| rng.random()).collect(),
                    )
                })
                .collect(),
        )
    }

    fn make_labels(train_rows: usize) -> Arc<Vec<u32>> {
        Arc::new((0..train_rows as u32).map(|i| i % 7).collect())
    }

    fn storage_tier_from(
        hops: &[Matrix<f32>],
        chunk_rows: usize,
        labels: Arc<Vec<u32>>,
        dir: &std::path::Path,
    ) -> Tier {
        let stores: Vec<ChunkStore> = hops
            .iter()
            .enumerate()
            .map(|(r, m)| {
                write_hop_file(m, &hop_file_path(dir, 0, r), chunk_rows, r as u16, 0).unwrap()
            })
            .collect();
        Tier::storage(Arc::new(stores), labels).unwrap()
    }

    #[test]
    fn assemble_rows_gathers_in_order() {
        let hops = Arc::new(vec![Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0])]);
        let tier = Tier::resident(hops, Arc::new(vec![5, 6, 7])).unwrap();
        let batch = assemble_batch_rows(&tier, &[2, 0], 0).unwrap();
        assert_eq!(batch.hops[0].data(), &[2.0, 0.0]);
        assert_eq!(batch.labels, vec![7, 5]);
        assert_eq!(batch.rows, vec![2, 0]);
    }

    #[test]
    fn assemble_identity_order_is_prefix() {
        let hops = make_hops(10, 4, 1, 3);
        let tier = Tier::resident(Arc::clone(&hops), make_labels(10)).unwrap();
        let batch = assemble_batch_rows(&tier, &[0, 1, 2], 0).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                assert_eq!(batch.hops[h].row(i), hops[h].row(i));
            }
        }
    }

    #[test]
    fn assemble_rows_matches_per_row_copy_oracle() {
        let hops = make_hops(50, 6, 2, 9);
        for tier in [
            Tier::resident(Arc::clone(&hops), make_labels(50)).unwrap(),
            Tier::staged(Arc::clone(&hops), make_labels(50)).unwrap(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let rows: Vec<u32> = (0..20).map(|_| rng.random_range(0..50)).collect();
            let batch = assemble_batch_rows(&tier, &rows, 0).unwrap();
            for (h, hop) in hops.iter().enumerate() {
                for (k, &r) in rows.iter().enumerate() {
                    assert_eq!(batch.hops[h].row(k), hop.row(r as usize), "hop {h} row {k}");
                }
            }
        }
    }

    #[test]
    fn assemble_rows_rejects_out_of_range_ids() {
        let hops = make_hops(5, 2, 0, 4);
        let tier = Tier::resident(hops, make_labels(5)).unwrap();
        assert!(assemble_batch_rows(&tier, &[4, 5], 0).is_err());
    }

    #[test]
    fn assemble_rows_rejected_on_storage_tier() {
        let dir = tempfile::tempdir().unwrap();
        let hops = make_hops(8, 2, 1, 5);
        let tier = storage_tier_from(&hops, 4, make_labels(8), dir.path());
        assert!(matches!(
            assemble_batch_rows(&tier, &[0, 1], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn assemble_chunks_orders_rows_by_schedule() {
        let hops = Arc::new(vec![Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0])]);
        let tier = Tier::resident(hops, Arc::new(vec![0, 1, 2, 3])).unwrap();
        let schedule = EpochSchedule {
            method: Method::Cr,
            batch_size: 4,
            chunk_rows: 2,
            train_rows: 4,
            epoch_seed: 0,
            batches: vec![BatchSpec::Chunks(vec![1, 0])],
        };
        let batch = assemble_batch_chunks(&tier, &schedule, &[1, 0], 0).unwrap();
        assert_eq!(batch.hops[0].data(), &[2.0, 3.0, 0.0, 1.0]);
        assert_eq!(batch.rows, vec![2, 3, 0, 1]);
        assert_eq!(batch.labels, vec![2, 3, 0, 1]);
    }

    #[test]
    fn storage_batches_equal_resident_batches() {
        let dir = tempfile::tempdir().unwrap();
        let hops = make_hops(37, 5, 3, 11);
        let labels = make_labels(37);
        let schedule = cr_schedule(37, 5, 10, 99).unwrap();

        let resident = Tier::resident(Arc::clone(&hops), Arc::clone(&labels)).unwrap();
        let storage = storage_tier_from(&hops, 5, Arc::clone(&labels), dir.path());

        let res: Vec<Batch> = serial_loader(&schedule, &resident)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        let sto: Vec<Batch> = serial_loader(&schedule, &storage)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        assert!(batches_equal(&res, &sto));
    }

    #[test]
    fn storage_serves_ragged_training_tail_before_other_splits() {
        // 10 training rows inside a 16-row file: the third schedule chunk is
        // rows 8..10 while the file chunk holds rows 8..12
        let dir = tempfile::tempdir().unwrap();
        let full = make_hops(16, 3, 1, 13);
        let labels = make_labels(10);
        let storage = storage_tier_from(&full, 4, Arc::clone(&labels), dir.path());
        let schedule = cr_schedule(10, 4, 8, 2).unwrap();

        let train_hops: Vec<Matrix<f32>> = full.iter().map(|m| m.slice_rows(0, 10)).collect();
        let resident = Tier::resident(Arc::new(train_hops), labels).unwrap();

        let sto: Vec<Batch> = serial_loader(&schedule, &storage)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        let res: Vec<Batch> = serial_loader(&schedule, &resident)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        assert!(batches_equal(&sto, &res));
        let total: usize = sto.iter().map(|b| b.num_rows()).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn single_ragged_chunk_batch() {
        let hops = make_hops(10, 2, 1, 7);
        let tier = Tier::resident(Arc::clone(&hops), make_labels(10)).unwrap();
        let schedule = EpochSchedule {
            method: Method::Cr,
            batch_size: 4,
            chunk_rows: 4,
            train_rows: 10,
            epoch_seed: 0,
            batches: vec![BatchSpec::Chunks(vec![2])],
        };
        let batch = assemble_batch_chunks(&tier, &schedule, &[2], 0).unwrap();
        assert_eq!(batch.num_rows(), 10 % 4);
    }

    #[test]
    fn serial_loader_yields_schedule_exactly() {
        let hops = make_hops(23, 3, 2, 21);
        let tier = Tier::resident(hops, make_labels(23)).unwrap();
        let schedule = rr_schedule(23, 5, 77).unwrap();
        let batches: Vec<Batch> = serial_loader(&schedule, &tier)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(batches.len(), schedule.num_batches());
        for (i, b) in batches.iter().enumerate() {
            assert_eq!(b.ordinal, i);
            assert_eq!(b.rows, schedule.batch_rows(i));
        }
    }

    #[test]
    fn storage_tier_rejects_rr_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let hops = make_hops(12, 2, 1, 31);
        let tier = storage_tier_from(&hops, 4, make_labels(12), dir.path());
        let schedule = rr_schedule(12, 4, 0).unwrap();
        assert!(matches!(
            serial_loader(&schedule, &tier),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            prefetch_loader(&schedule, &tier),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prefetch_equals_serial_on_all_tiers() {
        let dir = tempfile::tempdir().unwrap();
        let hops = make_hops(40, 4, 2, 41);
        let labels = make_labels(40);
        let schedule = cr_schedule(40, 4, 8, 13).unwrap();

        let tiers = vec![
            Tier::resident(Arc::clone(&hops), Arc::clone(&labels)).unwrap(),
            Tier::staged(Arc::clone(&hops), Arc::clone(&labels)).unwrap(),
            storage_tier_from(&hops, 4, Arc::clone(&labels), dir.path()),
        ];
        let mut reference: Option<Vec<Batch>> = None;
        for tier in tiers {
            let serial: Vec<Batch> = serial_loader(&schedule, &tier)
                .unwrap()
                .map(|b| b.unwrap())
                .collect();
            let prefetch: Vec<Batch> = prefetch_loader(&schedule, &tier)
                .unwrap()
                .map(|b| b.unwrap())
                .collect();
            assert!(batches_equal(&serial, &prefetch));
            if let Some(reference) = &reference {
                assert!(batches_equal(reference, &serial));
            } else {
                reference = Some(serial);
            }
        }
    }

    #[test]
    fn prefetch_single_batch_schedule() {
        let hops = make_hops(4, 2, 1, 51);
        let tier = Tier::resident(hops, make_labels(4)).unwrap();
        let schedule = rr_schedule(4, 8, 0).unwrap();
        let batches: Vec<Batch> = prefetch_loader(&schedule, &tier)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].num_rows(), 4);
    }

    #[test]
    fn prefetch_delivers_error_at_failed_ordinal_then_stops() {
        let hops = make_hops(10, 2, 1, 61);
        let tier = Tier::resident(hops, make_labels(10)).unwrap();
        // row id 99 is out of range; placed in the second batch
        let schedule = EpochSchedule {
            method: Method::Rr,
            batch_size: 3,
            chunk_rows: 0,
            train_rows: 10,
            epoch_seed: 0,
            batches: vec![
                BatchSpec::Rows(vec![0, 1, 2]),
                BatchSpec::Rows(vec![3, 99, 4]),
                BatchSpec::Rows(vec![5, 6, 7]),
            ],
        };
        let mut iter = prefetch_loader(&schedule, &tier).unwrap();
        assert!(iter.next().unwrap().is_ok());
        assert!(iter.next().unwrap().is_err());
        assert!(iter.next().is_none());
    }

    #[test]
    fn dropping_prefetch_early_does_not_hang() {
        let hops = make_hops(100, 2, 1, 71);
        let tier = Tier::resident(hops, make_labels(100)).unwrap();
        let schedule = rr_schedule(100, 5, 0).unwrap();
        let mut iter = prefetch_loader(&schedule, &tier).unwrap();
        let _ = iter.next();
        drop(iter); // must unblock the producer and join
    }

    #[test]
    fn staged_epoch_transfers_each_row_exactly_once() {
        let train_rows = 96;
        let f = 5;
        let num_hops = 3;
        let hops = make_hops(train_rows, f, num_hops, 81);
        let tier = Tier::staged(hops, make_labels(train_rows)).unwrap();
        let schedule = rr_schedule(train_rows, 10, 3).unwrap();
        for b in serial_loader(&schedule, &tier).unwrap() {
            b.unwrap();
        }
        let snap = tier.stats().snapshot();
        let expected = (train_rows * f * 4 * (num_hops + 1)) as u64;
        assert_eq!(snap.bytes_transferred, expected);
        assert_eq!(snap.bytes_assembled, expected);
        assert_eq!(snap.batches_produced, schedule.num_batches() as u64);
    }

    #[test]
    fn stats_are_monotone_within_epoch() {
        let hops = make_hops(30, 3, 1, 91);
        let tier = Tier::staged(hops, make_labels(30)).unwrap();
        let schedule = rr_schedule(30, 7, 1).unwrap();
        let mut last = tier.stats().snapshot();
        for b in serial_loader(&schedule, &tier).unwrap() {
            b.unwrap();
            let now = tier.stats().snapshot();
            assert!(now.bytes_assembled >= last.bytes_assembled);
            assert!(now.batches_produced >= last.batches_produced);
            last = now;
        }
    }

    // The double-buffer memory bound is asserted in tests/memory_accounting.rs
    // where nothing else allocates concurrently.

    #[test]
    fn serial_wall_time_tracks_injected_delays() {
        let cfg = LoaderBenchConfig {
            batches: 8,
            batch_size: 8,
            feature_dim: 4,
            num_hops: 1,
            tier: TierKind::Resident,
            inject_assemble_us: 25_000,
            inject_compute_us: 25_000,
            seed: 7,
        };
        let report = bench_loaders(&cfg).unwrap();
        let expected_ms = (cfg.batches as f64) * 50.0;
        assert!(
            (report.serial_wall_ms - expected_ms).abs() <= expected_ms * 0.10,
            "serial wall {:.1} ms vs expected {:.1} ms",
            report.serial_wall_ms,
            expected_ms
        );
        assert!(report.sequences_match);
    }

    #[test]
    fn prefetch_overlaps_assembly_and_compute() {
        let cfg = LoaderBenchConfig {
            batches: 100,
            batch_size: 8,
            feature_dim: 4,
            num_hops: 1,
            tier: TierKind::Resident,
            inject_assemble_us: 1000,
            inject_compute_us: 1000,
            seed: 3,
        };
        let report = bench_loaders(&cfg).unwrap();
        assert!(report.sequences_match);
        assert!(
            report.prefetch_wall_ms <= 0.65 * report.serial_wall_ms,
            "prefetch {:.1} ms vs serial {:.1} ms",
            report.prefetch_wall_ms,
            report.serial_wall_ms
        );
    }
}
