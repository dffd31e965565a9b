//! On-disk dataset layout and the one-time preprocessing step.
//!
//! A dataset directory holds:
//! - `graph.ppgc`: the CSR graph
//! - `features.bin`: 16-byte header (rows u64, cols u64) + raw f32 rows
//! - `labels.bin`: one u32 class id per node
//! - `splits.bin`: one u8 per node (0 train, 1 val, 2 test)
//! - `meta`: text key/value summary (n, feature_dim, classes, split counts)
//!
//! Preprocessing propagates features over the whole graph for R hops, then
//! writes the rows reordered so the training split is a contiguous prefix
//! (train, then val, then test) into one chunked `hop_<op>_<r>.ppgf` file per
//! hop, plus `perm.bin` recording stored-row -> original-node so evaluation
//! bookkeeping stays invertible. The prefix layout keeps chunk-reshuffled
//! storage reads inside pure training data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::loader::{Tier, TierKind};
use crate::matrix::Matrix;
use crate::propagation::{build_operator, propagate, NormKind};
use crate::store::{hop_file_path, open_hop_set, write_hop_file, ChunkStore};
use crate::synth::{SynthDataset, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL};

const PERM_MAGIC: &[u8; 4] = b"PPGP";
const PERM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
}

/// Fully loaded raw dataset (pre-propagation).
#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub graph: CsrGraph,
    pub features: Matrix<f32>,
    pub labels: Vec<u32>,
    pub splits: Vec<u8>,
}

pub fn graph_path(dir: &Path) -> PathBuf {
    dir.join("graph.ppgc")
}

pub fn features_path(dir: &Path) -> PathBuf {
    dir.join("features.bin")
}

pub fn labels_path(dir: &Path) -> PathBuf {
    dir.join("labels.bin")
}

pub fn splits_path(dir: &Path) -> PathBuf {
    dir.join("splits.bin")
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta")
}

pub fn perm_path(dir: &Path) -> PathBuf {
    dir.join("perm.bin")
}

/// Write a generated dataset into `dir` (created if needed).
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<DatasetMeta> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = data.graph.num_nodes();
    if data.features.rows() != n || data.labels.len() != n || data.splits.len() != n {
        return Err(Error::Shape("dataset components disagree on node count".into()));
    }

    data.graph.save(&graph_path(dir))?;
    write_features(&features_path(dir), &data.features)?;

    let path = labels_path(dir);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for &l in &data.labels {
        w.write_all(&l.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = splits_path(dir);
    std::fs::write(&path, &data.splits).map_err(|e| Error::io(&path, e))?;

    let meta = DatasetMeta {
        num_nodes: n,
        feature_dim: data.features.cols(),
        num_classes: data.num_classes,
        train_rows: count_split(&data.splits, SPLIT_TRAIN),
        val_rows: count_split(&data.splits, SPLIT_VAL),
        test_rows: count_split(&data.splits, SPLIT_TEST),
    };
    write_meta(&meta_path(dir), &meta)?;
    Ok(meta)
}

fn count_split(splits: &[u8], which: u8) -> usize {
    splits.iter().filter(|&&s| s == which).count()
}

fn write_features(path: &Path, features: &Matrix<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    (|| -> std::io::Result<()> {
        w.write_all(&(features.rows() as u64).to_le_bytes())?;
        w.write_all(&(features.cols() as u64).to_le_bytes())?;
        for &v in features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

fn read_features(path: &Path) -> Result<Matrix<f32>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(|e| Error::io(path, e))?;
    let rows = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8).map_err(|e| Error::io(path, e))?;
    let cols = u64::from_le_bytes(buf8) as usize;

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::data(
            path,
            format!("expected {} feature bytes, found {}", rows * cols * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let text = format!(
        "n = {}\nfeature_dim = {}\nclasses = {}\ntrain = {}\nval = {}\ntest = {}\n",
        meta.num_nodes,
        meta.feature_dim,
        meta.num_classes,
        meta.train_rows,
        meta.val_rows,
        meta.test_rows
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = meta_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut fields = std::collections::HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: idx + 1,
            msg: "expected key = value".into(),
        })?;
        let value: usize = value.trim().parse().map_err(|_| Error::Parse {
            path: path.clone(),
            line: idx + 1,
            msg: format!("invalid number {:?}", value.trim()),
        })?;
        fields.insert(key.trim().to_string(), value);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::data(&path, format!("missing meta key {k}")))
    };
    Ok(DatasetMeta {
        num_nodes: get("n")?,
        feature_dim: get("feature_dim")?,
        num_classes: get("classes")?,
        train_rows: get("train")?,
        val_rows: get("val")?,
        test_rows: get("test")?,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let graph = CsrGraph::load(&graph_path(dir))?;
    let features = read_features(&features_path(dir))?;

    let path = labels_path(dir);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != meta.num_nodes * 4 {
        return Err(Error::data(&path, "label count does not match meta"));
    }
    let labels: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let path = splits_path(dir);
    let splits = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if splits.len() != meta.num_nodes {
        return Err(Error::data(&path, "split count does not match meta"));
    }

    if graph.num_nodes() != meta.num_nodes || features.rows() != meta.num_nodes {
        return Err(Error::data(dir, "graph/features disagree with meta"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= meta.num_classes) {
        return Err(Error::data(labels_path(dir), format!("label {bad} out of range")));
    }
    if let Some(&bad) = splits.iter().find(|&&s| s > SPLIT_TEST) {
        return Err(Error::data(splits_path(dir), format!("split value {bad} invalid")));
    }

    Ok(Dataset {
        meta,
        graph,
        features,
        labels,
        splits,
    })
}

/// Stored-row to original-node mapping produced by preprocessing.
pub fn write_perm(path: &Path, new_to_old: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    (|| -> std::io::Result<()> {
        w.write_all(PERM_MAGIC)?;
        w.write_all(&PERM_VERSION.to_le_bytes())?;
        w.write_all(&(new_to_old.len() as u64).to_le_bytes())?;
        for &o in new_to_old {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn read_perm(path: &Path) -> Result<Vec<u32>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != PERM_MAGIC {
        return Err(Error::data(path, "bad magic (expected PPGP)"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|e| Error::io(path, e))?;
    if u32::from_le_bytes(buf4) != PERM_VERSION {
        return Err(Error::data(path, "unsupported permutation version"));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(|e| Error::io(path, e))?;
    let n = u64::from_le_bytes(buf8) as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf8).map_err(|e| Error::io(path, e))?;
        out.push(u64::from_le_bytes(buf8) as u32);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PreprocessReport {
    pub num_hops: usize,
    pub rows_written: usize,
    pub chunk_rows: usize,
    /// Stored bytes relative to the raw feature matrix (K=1 gives R+1).
    pub expansion_factor: usize,
    pub wall_ms: f64,
    pub hop_files: Vec<PathBuf>,
}

/// Propagate over the full graph, reorder rows train-first, and write one
/// chunked file per hop. Re-running with identical inputs produces
/// byte-identical files.
pub fn preprocess(
    dir: &Path,
    num_hops: usize,
    norm_kind: NormKind,
    self_loops: bool,
    chunk_rows: usize,
) -> Result<PreprocessReport> {
    if chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be at least 1".into()));
    }
    let t0 = Instant::now();
    let data = load_dataset(dir)?;

    let operator = build_operator(&data.graph, norm_kind, self_loops);
    let hop_set = propagate(&operator, &data.features, num_hops)?;

    // stable order inside each split keeps re-runs byte-identical
    let mut new_to_old: Vec<u32> = Vec::with_capacity(data.meta.num_nodes);
    for split in [SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST] {
        new_to_old.extend(
            (0..data.meta.num_nodes as u32).filter(|&i| data.splits[i as usize] == split),
        );
    }

    let mut hop_files = Vec::with_capacity(num_hops + 1);
    for (r, hop) in hop_set.hops.iter().enumerate() {
        let mut permuted = Matrix::zeros(hop.rows(), hop.cols());
        for (new_row, &old) in new_to_old.iter().enumerate() {
            permuted.row_mut(new_row).copy_from_slice(hop.row(old as usize));
        }
        let path = hop_file_path(dir, operator.operator_id(), r);
        write_hop_file(&permuted, &path, chunk_rows, r as u16, operator.operator_id())?;
        hop_files.push(path);
    }
    write_perm(&perm_path(dir), &new_to_old)?;

    Ok(PreprocessReport {
        num_hops,
        rows_written: data.meta.num_nodes,
        chunk_rows,
        expansion_factor: num_hops + 1,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        hop_files,
    })
}

/// Highest hop index r such that `hop_0_0.ppgf..hop_0_r.ppgf` all exist.
pub fn discover_num_hops(dir: &Path, operator_id: u16) -> Option<usize> {
    let mut r = 0usize;
    if !hop_file_path(dir, operator_id, 0).exists() {
        return None;
    }
    while hop_file_path(dir, operator_id, r + 1).exists() {
        r += 1;
    }
    Some(r)
}

/// Data handles for one training run: the training tier plus always-resident
/// evaluation splits and labels in stored-row order.
pub struct RunData {
    pub meta: DatasetMeta,
    pub tier: Tier,
    pub val_hops: Vec<Matrix<f32>>,
    pub test_hops: Vec<Matrix<f32>>,
    pub train_labels: Arc<Vec<u32>>,
    pub val_labels: Vec<u32>,
    pub test_labels: Vec<u32>,
    pub store_chunk_rows: usize,
}

/// Open the preprocessed hop files of `dir` and stage them for `tier_kind`.
pub fn load_run_data(dir: &Path, num_hops: usize, tier_kind: TierKind) -> Result<RunData> {
    let meta = read_meta(dir)?;
    let stores = open_hop_set(dir, 0, num_hops)?;
    let store_chunk_rows = stores[0].chunk_rows();
    if stores[0].num_rows() != meta.num_nodes {
        return Err(Error::data(dir, "hop files do not cover every node"));
    }
    if stores[0].feature_dim() != meta.feature_dim {
        return Err(Error::data(dir, "hop files disagree with meta feature_dim"));
    }

    let perm = read_perm(&perm_path(dir))?;
    if perm.len() != meta.num_nodes {
        return Err(Error::data(dir, "permutation does not cover every node"));
    }
    let raw = load_labels_raw(dir, meta.num_nodes)?;
    let stored_labels: Vec<u32> = perm.iter().map(|&old| raw[old as usize]).collect();

    let train_end = meta.train_rows;
    let val_end = train_end + meta.val_rows;
    let test_end = val_end + meta.test_rows;

    let train_labels = Arc::new(stored_labels[..train_end].to_vec());
    let val_labels = stored_labels[train_end..val_end].to_vec();
    let test_labels = stored_labels[val_end..test_end].to_vec();

    let read_split = |start: usize, end: usize| -> Result<Vec<Matrix<f32>>> {
        stores.iter().map(|s| s.read_row_range(start, end)).collect()
    };
    let val_hops = read_split(train_end, val_end)?;
    let test_hops = read_split(val_end, test_end)?;

    let tier = match tier_kind {
        TierKind::Resident | TierKind::Staged => {
            let train_hops = Arc::new(read_split(0, train_end)?);
            if tier_kind == TierKind::Resident {
                Tier::resident(train_hops, Arc::clone(&train_labels))?
            } else {
                Tier::staged(train_hops, Arc::clone(&train_labels))?
            }
        }
        TierKind::Storage => Tier::storage(Arc::new(stores), Arc::clone(&train_labels))?,
    };

    Ok(RunData {
        meta,
        tier,
        val_hops,
        test_hops,
        train_labels,
        val_labels,
        test_labels,
        store_chunk_rows,
    })
}

/// Storage-tier handles only, for planner probing: no eval data is loaded.
pub fn load_storage_tier(dir: &Path, num_hops: usize) -> Result<(Tier, DatasetMeta)> {
    let meta = read_meta(dir)?;
    let stores: Vec<ChunkStore> = open_hop_set(dir, 0, num_hops)?;
    let perm = read_perm(&perm_path(dir))?;
    let raw = load_labels_raw(dir, meta.num_nodes)?;
    let train_labels: Vec<u32> = perm[..meta.train_rows]
        .iter()
        .map(|&old| raw[old as usize])
        .collect();
    let tier = Tier::storage(Arc::new(stores), Arc::new(train_labels))?;
    Ok((tier, meta))
}

fn load_labels_raw(dir: &Path, n: usize) -> Result<Vec<u32>> {
    let path = labels_path(dir);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != n * 4 {
        return Err(Error::data(&path, "label count does not match meta"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_synth, SynthSpec};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_nodes: 60,
            num_classes: 3,
            feature_dim: 6,
            p_intra: 0.1,
            q_inter: 0.01,
            signal: 1.0,
            noise: 0.5,
            seed: 5,
        }
    }

    fn make_dataset(dir: &Path) -> DatasetMeta {
        let data = gen_synth(&small_spec()).unwrap();
        write_dataset(dir, &data).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = make_dataset(dir.path());
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.meta.train_rows, 36);
        let regenerated = gen_synth(&small_spec()).unwrap();
        assert_eq!(loaded.features.data(), regenerated.features.data());
        assert_eq!(loaded.labels, regenerated.labels);
    }

    #[test]
    fn preprocess_zero_hops_stores_permuted_features() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path());
        let report = preprocess(dir.path(), 0, NormKind::Symmetric, true, 16).unwrap();
        assert_eq!(report.expansion_factor, 1);

        let data = load_dataset(dir.path()).unwrap();
        let perm = read_perm(&perm_path(dir.path())).unwrap();
        let store = open_hop_set(dir.path(), 0, 0).unwrap().remove(0);
        let stored = store.read_row_range(0, data.meta.num_nodes).unwrap();
        for (new_row, &old) in perm.iter().enumerate() {
            assert_eq!(stored.row(new_row), data.features.row(old as usize));
        }
    }

    #[test]
    fn preprocess_rows_match_in_memory_propagation() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path());
        let report = preprocess(dir.path(), 2, NormKind::Symmetric, true, 8).unwrap();
        assert_eq!(report.expansion_factor, 3); // R+1 stored copies for one operator

        let data = load_dataset(dir.path()).unwrap();
        let op = build_operator(&data.graph, NormKind::Symmetric, true);
        let hop_set = propagate(&op, &data.features, 2).unwrap();
        let perm = read_perm(&perm_path(dir.path())).unwrap();

        let stores = open_hop_set(dir.path(), 0, 2).unwrap();
        for (r, store) in stores.iter().enumerate() {
            let stored = store.read_row_range(0, data.meta.num_nodes).unwrap();
            for (new_row, &old) in perm.iter().enumerate() {
                assert_eq!(
                    stored.row(new_row),
                    hop_set.hops[r].row(old as usize),
                    "hop {r} row {new_row}"
                );
            }
        }
    }

    #[test]
    fn preprocess_puts_training_rows_first() {
        let dir = tempfile::tempdir().unwrap();
        let meta = make_dataset(dir.path());
        preprocess(dir.path(), 1, NormKind::Row, true, 8).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        let perm = read_perm(&perm_path(dir.path())).unwrap();
        for (new_row, &old) in perm.iter().enumerate() {
            let expected = if new_row < meta.train_rows {
                SPLIT_TRAIN
            } else if new_row < meta.train_rows + meta.val_rows {
                SPLIT_VAL
            } else {
                SPLIT_TEST
            };
            assert_eq!(data.splits[old as usize], expected);
        }
    }

    #[test]
    fn preprocess_is_idempotent_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path());
        preprocess(dir.path(), 1, NormKind::Symmetric, true, 8).unwrap();
        let first: Vec<Vec<u8>> = (0..=1)
            .map(|r| std::fs::read(hop_file_path(dir.path(), 0, r)).unwrap())
            .collect();
        preprocess(dir.path(), 1, NormKind::Symmetric, true, 8).unwrap();
        for (r, bytes) in first.iter().enumerate() {
            let again = std::fs::read(hop_file_path(dir.path(), 0, r)).unwrap();
            assert_eq!(bytes, &again, "hop {r} changed across runs");
        }
    }

    #[test]
    fn run_data_labels_follow_permutation() {
        let dir = tempfile::tempdir().unwrap();
        let meta = make_dataset(dir.path());
        preprocess(dir.path(), 1, NormKind::Symmetric, true, 8).unwrap();
        let run = load_run_data(dir.path(), 1, TierKind::Resident).unwrap();

        let data = load_dataset(dir.path()).unwrap();
        let perm = read_perm(&perm_path(dir.path())).unwrap();
        for (i, &label) in run.train_labels.iter().enumerate() {
            assert_eq!(label, data.labels[perm[i] as usize]);
        }
        assert_eq!(run.val_labels.len(), meta.val_rows);
        assert_eq!(run.test_labels.len(), meta.test_rows);
        assert_eq!(run.val_hops[0].rows(), meta.val_rows);
    }

    #[test]
    fn discover_num_hops_counts_files() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path());
        assert_eq!(discover_num_hops(dir.path(), 0), None);
        preprocess(dir.path(), 3, NormKind::Symmetric, true, 8).unwrap();
        assert_eq!(discover_num_hops(dir.path(), 0), Some(3));
    }
}
