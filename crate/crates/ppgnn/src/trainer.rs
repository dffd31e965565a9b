//! Training loop over schedules and loaders, evaluation, the convergence
//! metric, and per-epoch time decomposition.
//!
//! Each epoch builds a fresh schedule from `seed ^ epoch`, streams batches
//! through the double-buffered prefetch loader, and runs forward / loss /
//! backward / Adam per batch. Validation runs every `eval_every` epochs in
//! eval mode on resident data, and test accuracy is reported at the epoch of
//! peak validation accuracy.
//!
//! Profiles attribute producer-side loading time only up to the time the
//! consumer actually stalled waiting for batches; loading that was hidden by
//! pipelining does not show up, mirroring what an end-to-end epoch feels like.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use crate::dataset::RunData;
use crate::error::{Error, Result};
use crate::loader::{prefetch_loader, TierKind, TransferSnapshot};
use crate::matrix::Matrix;
use crate::models::{
    adam_step, backward, cross_entropy, forward, AdamState, ModelConfig, ModelKind, ModelParams,
};
use crate::sampler::{cr_schedule, rr_schedule, EpochSchedule, Method};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub num_hops: usize,
    pub batch_size: usize,
    /// Chunk granularity for chunk reshuffling; ignored under row reshuffling.
    pub chunk_rows: usize,
    pub method: Method,
    pub tier: TierKind,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub inject_assemble_us: u64,
    pub inject_compute_us: u64,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Sign,
            num_hops: 3,
            batch_size: 500,
            chunk_rows: 0,
            method: Method::Rr,
            tier: TierKind::Resident,
            epochs: 50,
            lr: 0.01,
            dropout: 0.0,
            seed: 0,
            eval_every: 1,
            hidden_dim: 64,
            heads: 4,
            inject_assemble_us: 0,
            inject_compute_us: 0,
            log_path: None,
        }
    }
}

impl TrainConfig {
    /// Reject invalid combinations before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.tier == TierKind::Storage && self.method != Method::Cr {
            return Err(Error::Config(
                "storage tier only supports chunk reshuffling".into(),
            ));
        }
        if self.method == Method::Cr {
            if self.chunk_rows == 0 {
                return Err(Error::Config(
                    "chunk reshuffling needs chunk_rows >= 1".into(),
                ));
            }
            if self.chunk_rows > self.batch_size {
                return Err(Error::Config("chunk must not exceed batch".into()));
            }
        }
        Ok(())
    }

    fn schedule(&self, train_rows: usize, epoch: usize) -> Result<EpochSchedule> {
        let epoch_seed = self.seed ^ epoch as u64;
        match self.method {
            Method::Rr => rr_schedule(train_rows, self.batch_size, epoch_seed),
            Method::Cr => cr_schedule(train_rows, self.chunk_rows, self.batch_size, epoch_seed),
        }
    }
}

/// Wall-time decomposition of one epoch, in milliseconds.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct EpochProfile {
    pub assembly_ms: f64,
    pub transfer_ms: f64,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub optimizer_ms: f64,
    pub eval_ms: f64,
    pub total_ms: f64,
    pub bytes_transferred: u64,
}

impl EpochProfile {
    pub fn component_sum_ms(&self) -> f64 {
        self.assembly_ms
            + self.transfer_ms
            + self.forward_ms
            + self.backward_ms
            + self.optimizer_ms
            + self.eval_ms
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Row-weighted mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// (epoch, accuracy) at each evaluation point.
    pub val_curve: Vec<(usize, f64)>,
    pub best_val: f64,
    pub best_val_epoch: usize,
    pub test_acc_at_best: f64,
    /// First epoch reaching 99% of peak validation accuracy.
    pub convergence_epoch: usize,
    pub profiles: Vec<EpochProfile>,
    pub train_rows: usize,
    pub epochs: usize,
    pub total_seconds: f64,
}

/// Smallest index e with `curve[e] >= 0.99 * max(curve)`.
pub fn convergence_point(val_curve: &[f64]) -> Result<usize> {
    if val_curve.is_empty() {
        return Err(Error::Config("empty validation curve".into()));
    }
    let peak = val_curve.iter().cloned().fold(f64::MIN, f64::max);
    Ok(val_curve
        .iter()
        .position(|&v| v >= 0.99 * peak)
        .expect("peak itself qualifies"))
}

const EVAL_BLOCK_ROWS: usize = 2048;

/// Argmax accuracy over a split, streamed in fixed-size row blocks with
/// dropout off.
pub fn evaluate(
    params: &ModelParams<f32>,
    hops: &[Matrix<f32>],
    labels: &[u32],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    if hops.is_empty() || hops[0].rows() != labels.len() {
        return Err(Error::Shape("evaluation hops do not match labels".into()));
    }
    let n = labels.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BLOCK_ROWS).min(n);
        let block: Vec<Matrix<f32>> = hops.iter().map(|h| h.slice_rows(start, end)).collect();
        let (logits, _) = forward(params, &block, false, 0)?;
        for (i, &label) in labels[start..end].iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Labeled training rows per second over the whole run.
pub fn throughput(result: &RunResult) -> Result<f64> {
    if result.total_seconds <= 0.0 {
        return Err(Error::Runtime("run reported no elapsed time".into()));
    }
    Ok(result.train_rows as f64 * result.epochs as f64 / result.total_seconds)
}

fn mix_seed(seed: u64, epoch: u64, ordinal: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(ordinal.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct NdjsonLog {
    writer: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl NdjsonLog {
    fn open(path: &PathBuf) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(NdjsonLog {
            writer: std::io::BufWriter::new(file),
            path: path.clone(),
        })
    }

    fn record(&mut self, value: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.writer, value)
            .map_err(|e| Error::Runtime(format!("log serialization failed: {e}")))?;
        self.writer
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Run the full training loop described in the module docs.
pub fn train_run(config: &TrainConfig, data: &RunData) -> Result<RunResult> {
    train_run_with_params(config, data).map(|(result, _)| result)
}

/// Like [`train_run`], but also hands back the final parameters (for
/// checkpointing).
pub fn train_run_with_params(
    config: &TrainConfig,
    data: &RunData,
) -> Result<(RunResult, ModelParams<f32>)> {
    config.validate()?;
    if data.tier.kind() != config.tier {
        return Err(Error::Config(format!(
            "run data was staged for tier {}, config asks for {}",
            data.tier.kind(),
            config.tier
        )));
    }
    if config.tier == TierKind::Storage
        && config.method == Method::Cr
        && config.chunk_rows != data.store_chunk_rows
    {
        return Err(Error::Config(format!(
            "storage tier reads whole chunks: config chunk_rows {} must equal stored chunk_rows {}",
            config.chunk_rows, data.store_chunk_rows
        )));
    }

    let train_rows = data.tier.train_rows();
    if train_rows == 0 {
        return Err(Error::Config("no training rows".into()));
    }

    let model_cfg = ModelConfig {
        kind: config.model,
        feature_dim: data.meta.feature_dim,
        num_classes: data.meta.num_classes,
        num_hops: config.num_hops,
        hidden_dim: config.hidden_dim,
        heads: config.heads,
        dropout: config.dropout,
    };
    let mut params = ModelParams::<f32>::init(&model_cfg, config.seed)?;
    let mut adam = AdamState::new(&params, config.lr);

    let tier = data
        .tier
        .clone()
        .with_injected_delays(config.inject_assemble_us, 0);

    let mut log = match &config.log_path {
        Some(path) => Some(NdjsonLog::open(path)?),
        None => None,
    };

    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_curve: Vec<(usize, f64)> = Vec::new();
    let mut profiles = Vec::with_capacity(config.epochs);
    let mut best_val = f64::MIN;
    let mut best_val_epoch = 0usize;
    let mut test_acc_at_best = 0.0f64;

    let run_start = Instant::now();
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let stats_before = tier.stats().snapshot();
        let schedule = config.schedule(train_rows, epoch)?;

        let mut stall = std::time::Duration::ZERO;
        let mut forward_time = std::time::Duration::ZERO;
        let mut backward_time = std::time::Duration::ZERO;
        let mut optimizer_time = std::time::Duration::ZERO;
        let mut loss_weighted = 0.0f64;

        let mut iter = prefetch_loader(&schedule, &tier)?;
        loop {
            let t_wait = Instant::now();
            let Some(item) = iter.next() else {
                break;
            };
            stall += t_wait.elapsed();
            let batch = item?;

            let t_fwd = Instant::now();
            // benchmark mode: injected compute counts as forward time
            crate::loader::inject_delay_us(config.inject_compute_us);
            let dropout_seed = mix_seed(config.seed, epoch as u64, batch.ordinal as u64);
            let (logits, tape) = forward(&params, &batch.hops, true, dropout_seed)?;
            let (loss, dlogits) = cross_entropy(&logits, &batch.labels)?;
            forward_time += t_fwd.elapsed();

            let t_bwd = Instant::now();
            let grads = backward(&params, &batch.hops, &tape, &dlogits)?;
            backward_time += t_bwd.elapsed();

            let t_opt = Instant::now();
            adam_step(&mut params, &grads, &mut adam)?;
            optimizer_time += t_opt.elapsed();

            loss_weighted += loss as f64 * batch.num_rows() as f64;
        }
        drop(iter);
        let epoch_loss = loss_weighted / train_rows as f64;
        train_loss.push(epoch_loss);

        let mut eval_time = std::time::Duration::ZERO;
        let mut epoch_val: Option<f64> = None;
        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
            let t_eval = Instant::now();
            let val_acc = evaluate(&params, &data.val_hops, &data.val_labels)?;
            val_curve.push((epoch, val_acc));
            epoch_val = Some(val_acc);
            if val_acc > best_val {
                best_val = val_acc;
                best_val_epoch = epoch;
                test_acc_at_best = evaluate(&params, &data.test_hops, &data.test_labels)?;
            }
            eval_time = t_eval.elapsed();
        }

        let total = epoch_start.elapsed();
        let stats_delta = tier.stats().snapshot().since(&stats_before);
        let profile = attribute_profile(
            stall,
            forward_time,
            backward_time,
            optimizer_time,
            eval_time,
            total,
            &stats_delta,
        );
        if let Some(log) = log.as_mut() {
            log.record(&serde_json::json!({
                "epoch": epoch,
                "loss": epoch_loss,
                "val_acc": epoch_val,
                "assembly_ms": profile.assembly_ms,
                "transfer_ms": profile.transfer_ms,
                "forward_ms": profile.forward_ms,
                "backward_ms": profile.backward_ms,
                "optimizer_ms": profile.optimizer_ms,
                "eval_ms": profile.eval_ms,
                "total_ms": profile.total_ms,
                "bytes_transferred": profile.bytes_transferred,
            }))?;
        }
        profiles.push(profile);
    }
    let total_seconds = run_start.elapsed().as_secs_f64();

    let curve_values: Vec<f64> = val_curve.iter().map(|&(_, v)| v).collect();
    let convergence_epoch = val_curve[convergence_point(&curve_values)?].0;

    let result = RunResult {
        train_loss,
        val_curve,
        best_val,
        best_val_epoch,
        test_acc_at_best,
        convergence_epoch,
        profiles,
        train_rows,
        epochs: config.epochs,
        total_seconds,
    };
    if let Some(log) = log.as_mut() {
        log.record(&serde_json::json!({
            "summary": true,
            "best_val": result.best_val,
            "best_val_epoch": result.best_val_epoch,
            "test_acc": result.test_acc_at_best,
            "convergence_epoch": result.convergence_epoch,
            "throughput_rows_per_s": throughput(&result)?,
            "total_seconds": result.total_seconds,
        }))?;
        log.flush()?;
    }
    Ok((result, params))
}

/// Split consumer stall time into assembly/transfer proportionally to the
/// producer's own accounting; loading hidden behind compute is not charged.
fn attribute_profile(
    stall: std::time::Duration,
    forward: std::time::Duration,
    backward: std::time::Duration,
    optimizer: std::time::Duration,
    eval: std::time::Duration,
    total: std::time::Duration,
    stats: &TransferSnapshot,
) -> EpochProfile {
    let stall_ms = stall.as_secs_f64() * 1e3;
    let prod_assemble_ms = stats.assemble_micros as f64 / 1e3;
    let prod_transfer_ms = stats.transfer_micros as f64 / 1e3;
    let prod_total = prod_assemble_ms + prod_transfer_ms;

    let (assembly_ms, transfer_ms) = if prod_total <= 0.0 {
        (stall_ms, 0.0)
    } else if stall_ms >= prod_total {
        // producer was the bottleneck; charge the full split plus leftover wait
        (prod_assemble_ms + (stall_ms - prod_total), prod_transfer_ms)
    } else {
        let scale = stall_ms / prod_total;
        (prod_assemble_ms * scale, prod_transfer_ms * scale)
    };

    EpochProfile {
        assembly_ms,
        transfer_ms,
        forward_ms: forward.as_secs_f64() * 1e3,
        backward_ms: backward.as_secs_f64() * 1e3,
        optimizer_ms: optimizer.as_secs_f64() * 1e3,
        eval_ms: eval.as_secs_f64() * 1e3,
        total_ms: total.as_secs_f64() * 1e3,
        bytes_transferred: stats.bytes_transferred,
    }
}
