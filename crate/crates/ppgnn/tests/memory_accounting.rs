//! Instrumented-allocator checks.
//!
//! The live/peak counters are process-global, so these tests live in their own
//! binary and serialize on a lock: nothing else may allocate matrices while a
//! counter assertion runs.

use std::sync::{Arc, Mutex};
use std::time::Duration;

static COUNTER_LOCK: Mutex<()> = Mutex::new(());

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppgnn::dataset::{preprocess, write_dataset};
use ppgnn::loader::{prefetch_loader, Tier};
use ppgnn::matrix::{mem, Matrix};
use ppgnn::models::ModelKind;
use ppgnn::planner::probe_peak_memory;
use ppgnn::propagation::NormKind;
use ppgnn::sampler::{rr_schedule, Method};
use ppgnn::synth::{gen_synth, SynthSpec};
use ppgnn::trainer::TrainConfig;

#[test]
fn allocation_counters_and_pipeline_bound() {
    let _guard = COUNTER_LOCK.lock().unwrap();

    // --- alloc/free balance ---
    let before = mem::live_bytes();
    {
        let a = Matrix::<f32>::zeros(10, 10);
        assert_eq!(mem::live_bytes(), before + a.byte_size());
        let b = a.clone();
        assert_eq!(mem::live_bytes(), before + a.byte_size() + b.byte_size());
    }
    assert_eq!(mem::live_bytes(), before);

    // --- peak is a high-water mark ---
    mem::reset_peak();
    let base = mem::peak_bytes();
    {
        let _a = Matrix::<f32>::zeros(100, 100);
        let _b = Matrix::<f32>::zeros(100, 100);
    }
    assert!(mem::peak_bytes() >= base + 2 * 100 * 100 * 4);
    assert!(mem::live_bytes() < mem::peak_bytes());

    // --- the prefetch pipeline holds at most two batches of feature data ---
    let train_rows = 512;
    let f = 32;
    let num_hops = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(95);
    let hops: Vec<Matrix<f32>> = (0..=num_hops)
        .map(|_| {
            Matrix::from_vec(
                train_rows,
                f,
                (0..train_rows * f).map(|_| rng.random()).collect(),
            )
        })
        .collect();
    let labels: Vec<u32> = (0..train_rows as u32).collect();
    let tier = Tier::resident(Arc::new(hops), Arc::new(labels)).unwrap();
    let schedule = rr_schedule(train_rows, 64, 5).unwrap();
    let batch_bytes = (64 * f * 4 * (num_hops + 1)) as u64;

    mem::reset_peak();
    let baseline = mem::live_bytes();
    for item in prefetch_loader(&schedule, &tier).unwrap() {
        let batch = item.unwrap();
        // give the producer time to fully assemble the next batch
        std::thread::sleep(Duration::from_millis(2));
        drop(batch);
    }
    let peak_extra = mem::peak_bytes() - baseline;
    assert!(
        peak_extra <= 2 * batch_bytes,
        "pipeline held {peak_extra} extra bytes, double-buffer bound is {}",
        2 * batch_bytes
    );
    // and it really does double-buffer: both slots were live at some instant
    assert!(
        peak_extra > batch_bytes,
        "pipeline never overlapped assembly with consumption ({peak_extra} bytes)"
    );
}

#[test]
fn planner_probe_measures_model_working_sets() {
    let _guard = COUNTER_LOCK.lock().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_nodes: 400,
        num_classes: 4,
        feature_dim: 16,
        p_intra: 0.04,
        q_inter: 0.004,
        signal: 1.0,
        noise: 1.0,
        seed: 21,
    };
    let num_hops = 2;
    let chunk_rows = 40;
    let batch_size = 80;
    write_dataset(dir.path(), &gen_synth(&spec).unwrap()).unwrap();
    preprocess(dir.path(), num_hops, NormKind::Symmetric, true, chunk_rows).unwrap();

    let config = |kind: ModelKind| TrainConfig {
        model: kind,
        num_hops,
        batch_size,
        chunk_rows,
        method: Method::Cr,
        tier: ppgnn::loader::TierKind::Storage,
        epochs: 1,
        lr: 0.01,
        dropout: 0.0,
        seed: 5,
        hidden_dim: 32,
        heads: 4,
        ..TrainConfig::default()
    };

    // double-buffer lower bound: two batches of hop features live at once
    let sgc = probe_peak_memory(&config(ModelKind::Sgc), dir.path()).unwrap();
    let batch_bytes = (batch_size * spec.feature_dim * 4 * (num_hops + 1)) as u64;
    assert!(
        sgc.peak_bytes >= 2 * batch_bytes,
        "probe {} below double-buffer bound {}",
        sgc.peak_bytes,
        2 * batch_bytes
    );

    // attention intermediates make the HOGA working set strictly larger
    let hoga = probe_peak_memory(&config(ModelKind::Hoga), dir.path()).unwrap();
    assert!(
        hoga.peak_bytes > sgc.peak_bytes,
        "hoga probe {} not above sgc probe {}",
        hoga.peak_bytes,
        sgc.peak_bytes
    );

    // repeated probes see the same allocation pattern
    let again = probe_peak_memory(&config(ModelKind::Hoga), dir.path()).unwrap();
    let hi = hoga.peak_bytes.max(again.peak_bytes) as f64;
    let lo = hoga.peak_bytes.min(again.peak_bytes) as f64;
    assert!(
        hi / lo <= 1.10,
        "probe varies too much: {} vs {}",
        hoga.peak_bytes,
        again.peak_bytes
    );
}
