//! Capacity-based data placement: estimate the stored footprint, probe the
//! fast-tier working set with a short instrumented run, then pick a tier and
//! shuffling method.
//!
//! Policy: preload to the fast tier when everything fits there (row
//! reshuffling, since assembly is cheap in fast memory); otherwise stage in
//! bulk memory (row reshuffling by default, chunk reshuffling on request);
//! otherwise read from storage, which only supports chunk reshuffling.
//! "Fits" includes a 10% headroom factor.

use std::path::Path;

use serde::Serialize;

use crate::dataset::load_storage_tier;
use crate::error::{Error, Result};
use crate::loader::{prefetch_loader, TierKind};
use crate::matrix::mem;
use crate::models::{
    adam_step, backward, cross_entropy, forward, AdamState, ModelParams,
};
use crate::sampler::{cr_schedule, Method};
use crate::trainer::TrainConfig;

const HEADROOM: f64 = 1.10;

/// Available capacity per tier, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HardwareBudget {
    pub fast_tier_bytes: u64,
    pub bulk_tier_bytes: u64,
}

/// Stored size of the preprocessed training input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DataFootprint {
    pub train_rows: u64,
    pub feature_dim: u64,
    pub num_hops: u64,
    pub num_operators: u64,
    pub dtype_bytes: u64,
    pub total_bytes: u64,
}

/// `train_rows * F * dtype * K * (R + 1)`.
pub fn estimate_footprint(
    train_rows: u64,
    feature_dim: u64,
    num_hops: u64,
    num_operators: u64,
    dtype_bytes: u64,
) -> DataFootprint {
    DataFootprint {
        train_rows,
        feature_dim,
        num_hops,
        num_operators,
        dtype_bytes,
        total_bytes: train_rows * feature_dim * dtype_bytes * num_operators * (num_hops + 1),
    }
}

/// Peak matrix bytes observed during the probe run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryProbe {
    pub peak_bytes: u64,
}

const PROBE_BATCHES: usize = 3;

/// One-time short training session against the storage tier (the most
/// expensive configuration: chunk reshuffling plus double buffering) with the
/// instrumented allocator watching peak live matrix bytes.
///
/// The probe assumes it is the only training activity in the process.
pub fn probe_peak_memory(config: &TrainConfig, dataset_dir: &Path) -> Result<MemoryProbe> {
    let (tier, meta) = load_storage_tier(dataset_dir, config.num_hops)?;
    let chunk_rows = tier
        .storage_chunk_rows()
        .ok_or_else(|| Error::Config("probe needs a storage tier".into()))?;
    if chunk_rows > config.batch_size {
        return Err(Error::Config(format!(
            "stored chunk_rows {chunk_rows} exceeds probe batch_size {}",
            config.batch_size
        )));
    }

    let model_cfg = crate::models::ModelConfig {
        kind: config.model,
        feature_dim: meta.feature_dim,
        num_classes: meta.num_classes,
        num_hops: config.num_hops,
        hidden_dim: config.hidden_dim,
        heads: config.heads,
        dropout: config.dropout,
    };

    mem::reset_peak();
    let baseline = mem::live_bytes();

    let mut params = ModelParams::<f32>::init(&model_cfg, config.seed)?;
    let mut adam = AdamState::new(&params, config.lr);
    let schedule = cr_schedule(
        tier.train_rows(),
        chunk_rows,
        config.batch_size,
        config.seed,
    )?;

    let mut seen = 0usize;
    for item in prefetch_loader(&schedule, &tier)? {
        let batch = item?;
        let (logits, tape) = forward(&params, &batch.hops, true, config.seed)?;
        let (_, dlogits) = cross_entropy(&logits, &batch.labels)?;
        let grads = backward(&params, &batch.hops, &tape, &dlogits)?;
        adam_step(&mut params, &grads, &mut adam)?;
        seen += 1;
        if seen >= PROBE_BATCHES {
            break;
        }
    }
    if seen == 0 {
        return Err(Error::Runtime("probe produced no batches".into()));
    }

    Ok(MemoryProbe {
        peak_bytes: mem::peak_bytes() - baseline,
    })
}

/// Chosen placement plus the reasoning behind it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementPlan {
    pub tier: String,
    pub method: String,
    pub rationale: String,
}

impl PlacementPlan {
    pub fn tier_kind(&self) -> Result<TierKind> {
        self.tier.parse()
    }

    pub fn method_kind(&self) -> Result<Method> {
        self.method.parse()
    }
}

/// Pure placement decision. `user_method_override` can force a method on
/// memory tiers; row reshuffling on the storage tier is rejected.
pub fn plan(
    budget: &HardwareBudget,
    footprint: &DataFootprint,
    probe: &MemoryProbe,
    user_method_override: Option<Method>,
) -> Result<PlacementPlan> {
    let fast_need = (footprint.total_bytes + probe.peak_bytes) as f64 * HEADROOM;
    let bulk_need = footprint.total_bytes as f64 * HEADROOM;

    if fast_need <= budget.fast_tier_bytes as f64 {
        let method = user_method_override.unwrap_or(Method::Rr);
        return Ok(PlacementPlan {
            tier: TierKind::Resident.to_string(),
            method: method.to_string(),
            rationale: format!(
                "input ({} B) plus working set ({} B) fits the fast tier ({} B) with headroom; \
                 fast-tier assembly is cheap so row reshuffling is preferred",
                footprint.total_bytes, probe.peak_bytes, budget.fast_tier_bytes
            ),
        });
    }
    if bulk_need <= budget.bulk_tier_bytes as f64 {
        let method = user_method_override.unwrap_or(Method::Rr);
        return Ok(PlacementPlan {
            tier: TierKind::Staged.to_string(),
            method: method.to_string(),
            rationale: format!(
                "input ({} B) exceeds the fast tier but fits bulk memory ({} B); \
                 row reshuffling by default, chunk reshuffling on request",
                footprint.total_bytes, budget.bulk_tier_bytes
            ),
        });
    }
    if user_method_override == Some(Method::Rr) {
        return Err(Error::Config(
            "input exceeds bulk memory; the storage tier only supports chunk reshuffling".into(),
        ));
    }
    Ok(PlacementPlan {
        tier: TierKind::Storage.to_string(),
        method: Method::Cr.to_string(),
        rationale: format!(
            "input ({} B) exceeds bulk memory ({} B); reading chunks from storage, \
             which requires chunk reshuffling",
            footprint.total_bytes, budget.bulk_tier_bytes
        ),
    })
}

/// Total system memory from /proc/meminfo, when available.
pub fn detect_bulk_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("MemTotal:") {
            let kb: u64 = rest.trim().trim_end_matches(" kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}
