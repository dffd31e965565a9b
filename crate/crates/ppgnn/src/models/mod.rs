//! Trainable dense models over hop features: SGC, SIGN, and HOGA.
//!
//! Forward and backward passes are written by hand against the dense matrix
//! kernels; gradients are verified against central finite differences in a
//! float64 shadow configuration (see the tests and the acceptance suite).

mod adam;
pub mod common;
mod hoga;
mod loss;
mod sgc;
mod sign;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState};
pub use hoga::{HogaParams, HogaTape};
pub use loss::cross_entropy;
pub use sgc::{SgcParams, SgcTape};
pub use sign::{SignParams, SignTape};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

const PPGM_MAGIC: &[u8; 4] = b"PPGM";
const PPGM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Sgc,
    Sign,
    Hoga,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Sgc => write!(f, "sgc"),
            ModelKind::Sign => write!(f, "sign"),
            ModelKind::Hoga => write!(f, "hoga"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgc" => Ok(ModelKind::Sgc),
            "sign" => Ok(ModelKind::Sign),
            "hoga" => Ok(ModelKind::Hoga),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected sgc|sign|hoga)"
            ))),
        }
    }
}

/// Everything needed to build a model's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_hops: usize,
    /// SIGN per-hop width / HOGA d_model; unused by SGC.
    pub hidden_dim: usize,
    /// HOGA attention heads; unused by the others.
    pub heads: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub enum ModelParams<T: Scalar> {
    Sgc(SgcParams<T>),
    Sign(SignParams<T>),
    Hoga(HogaParams<T>),
}

#[derive(Debug)]
pub enum Tape<T: Scalar> {
    Sgc(SgcTape),
    Sign(SignTape<T>),
    Hoga(HogaTape<T>),
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization; the draw order per layer is fixed, so a
    /// (config, seed) pair reproduces parameters exactly.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if cfg.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                cfg.dropout
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match cfg.kind {
            ModelKind::Sgc => ModelParams::Sgc(SgcParams::init(
                cfg.feature_dim,
                cfg.num_classes,
                cfg.num_hops,
                &mut rng,
            )),
            ModelKind::Sign => {
                if cfg.hidden_dim == 0 {
                    return Err(Error::Config("hidden_dim must be positive".into()));
                }
                ModelParams::Sign(SignParams::init(
                    cfg.feature_dim,
                    cfg.num_classes,
                    cfg.num_hops,
                    cfg.hidden_dim,
                    cfg.dropout,
                    &mut rng,
                ))
            }
            ModelKind::Hoga => ModelParams::Hoga(HogaParams::init(
                cfg.feature_dim,
                cfg.num_classes,
                cfg.num_hops,
                cfg.hidden_dim,
                cfg.heads,
                cfg.dropout,
                &mut rng,
            )?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Sgc(_) => ModelKind::Sgc,
            ModelParams::Sign(_) => ModelKind::Sign,
            ModelParams::Hoga(_) => ModelKind::Hoga,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            ModelParams::Sgc(p) => ModelParams::Sgc(p.zeros_like()),
            ModelParams::Sign(p) => ModelParams::Sign(p.zeros_like()),
            ModelParams::Hoga(p) => ModelParams::Hoga(p.zeros_like()),
        }
    }

    /// Parameter tensors flattened in a fixed order (weights then bias per
    /// layer); the optimizer and the checkpoint format rely on this order.
    pub fn flat(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        match self {
            ModelParams::Sgc(p) => {
                out.push(p.linear.w.data());
                out.push(p.linear.b.as_slice());
            }
            ModelParams::Sign(p) => {
                for l in p.hop_layers.iter().chain(&p.mlp) {
                    out.push(l.w.data());
                    out.push(l.b.as_slice());
                }
            }
            ModelParams::Hoga(p) => {
                for l in [&p.input_proj, &p.wq, &p.wk, &p.wv, &p.wo]
                    .into_iter()
                    .chain(&p.mlp)
                {
                    out.push(l.w.data());
                    out.push(l.b.as_slice());
                }
            }
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        match self {
            ModelParams::Sgc(p) => {
                out.push(p.linear.w.data_mut());
                out.push(p.linear.b.as_mut_slice());
            }
            ModelParams::Sign(p) => {
                for l in p.hop_layers.iter_mut().chain(&mut p.mlp) {
                    out.push(l.w.data_mut());
                    out.push(l.b.as_mut_slice());
                }
            }
            ModelParams::Hoga(p) => {
                for l in [
                    &mut p.input_proj,
                    &mut p.wq,
                    &mut p.wk,
                    &mut p.wv,
                    &mut p.wo,
                ]
                .into_iter()
                .chain(&mut p.mlp)
                {
                    out.push(l.w.data_mut());
                    out.push(l.b.as_mut_slice());
                }
            }
        }
        out
    }

    /// Tensor shapes in `flat` order; biases report as one row.
    fn shapes(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let push_layer = |out: &mut Vec<(u64, u64)>, l: &common::Linear<T>| {
            out.push((l.w.rows() as u64, l.w.cols() as u64));
            out.push((1, l.b.len() as u64));
        };
        match self {
            ModelParams::Sgc(p) => push_layer(&mut out, &p.linear),
            ModelParams::Sign(p) => {
                for l in p.hop_layers.iter().chain(&p.mlp) {
                    push_layer(&mut out, l);
                }
            }
            ModelParams::Hoga(p) => {
                for l in [&p.input_proj, &p.wq, &p.wk, &p.wv, &p.wo]
                    .into_iter()
                    .chain(&p.mlp)
                {
                    push_layer(&mut out, l);
                }
            }
        }
        out
    }
}

/// Compute logits plus the activation tape for the matching backward pass.
/// Dropout masks are fully determined by `dropout_seed`; eval mode ignores it.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    hops: &[Matrix<T>],
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(Matrix<T>, Tape<T>)> {
    if hops.is_empty() {
        return Err(Error::Shape("need at least one hop matrix".into()));
    }
    match params {
        ModelParams::Sgc(p) => {
            let (logits, tape) = p.forward(hops)?;
            Ok((logits, Tape::Sgc(tape)))
        }
        ModelParams::Sign(p) => {
            let (logits, tape) = p.forward(hops, train_mode, dropout_seed)?;
            Ok((logits, Tape::Sign(tape)))
        }
        ModelParams::Hoga(p) => {
            let (logits, tape) = p.forward(hops, train_mode, dropout_seed)?;
            Ok((logits, Tape::Hoga(tape)))
        }
    }
}

/// Gradients for every parameter, mirroring the parameter structure.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    hops: &[Matrix<T>],
    tape: &Tape<T>,
    dlogits: &Matrix<T>,
) -> Result<ModelParams<T>> {
    match (params, tape) {
        (ModelParams::Sgc(p), Tape::Sgc(_)) => Ok(ModelParams::Sgc(p.backward(hops, dlogits))),
        (ModelParams::Sign(p), Tape::Sign(t)) => {
            Ok(ModelParams::Sign(p.backward(hops, t, dlogits)))
        }
        (ModelParams::Hoga(p), Tape::Hoga(t)) => {
            Ok(ModelParams::Hoga(p.backward(hops, t, dlogits)))
        }
        _ => Err(Error::Shape("tape does not match model kind".into())),
    }
}

/// Write a float32 parameter checkpoint: magic, version, model config, shape
/// table, then the tensor blobs in `flat` order, all little-endian.
pub fn save_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    if params.kind() != cfg.kind {
        return Err(Error::Config(
            "checkpoint config does not match model".into(),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(PPGM_MAGIC)?;
        w.write_all(&PPGM_VERSION.to_le_bytes())?;
        let kind: u8 = match cfg.kind {
            ModelKind::Sgc => 0,
            ModelKind::Sign => 1,
            ModelKind::Hoga => 2,
        };
        w.write_all(&[kind])?;
        w.write_all(&(cfg.num_hops as u16).to_le_bytes())?;
        w.write_all(&(cfg.feature_dim as u32).to_le_bytes())?;
        w.write_all(&(cfg.num_classes as u32).to_le_bytes())?;
        w.write_all(&(cfg.hidden_dim as u32).to_le_bytes())?;
        w.write_all(&(cfg.heads as u16).to_le_bytes())?;
        w.write_all(&(cfg.dropout as f32).to_le_bytes())?;

        let shapes = params.shapes();
        w.write_all(&(shapes.len() as u32).to_le_bytes())?;
        for (rows, cols) in &shapes {
            w.write_all(&rows.to_le_bytes())?;
            w.write_all(&cols.to_le_bytes())?;
        }
        for tensor in params.flat() {
            for &v in tensor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ModelConfig)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != PPGM_MAGIC {
        return Err(Error::data(path, "bad magic (expected PPGM)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != PPGM_VERSION {
        return Err(Error::data(path, format!("unsupported version {version}")));
    }
    let mut kind_byte = [0u8; 1];
    r.read_exact(&mut kind_byte)
        .map_err(|e| Error::io(path, e))?;
    let kind = match kind_byte[0] {
        0 => ModelKind::Sgc,
        1 => ModelKind::Sign,
        2 => ModelKind::Hoga,
        other => return Err(Error::data(path, format!("unknown model kind {other}"))),
    };
    let cfg = ModelConfig {
        kind,
        num_hops: read_u16(&mut r, path)? as usize,
        feature_dim: read_u32(&mut r, path)? as usize,
        num_classes: read_u32(&mut r, path)? as usize,
        hidden_dim: read_u32(&mut r, path)? as usize,
        heads: read_u16(&mut r, path)? as usize,
        dropout: read_f32(&mut r, path)? as f64,
    };

    let mut params = ModelParams::<f32>::init(&cfg, 0)?;
    let num_tensors = read_u32(&mut r, path)? as usize;
    let expected = params.shapes();
    if num_tensors != expected.len() {
        return Err(Error::data(
            path,
            format!("{num_tensors} tensors but model needs {}", expected.len()),
        ));
    }
    for (i, &(rows, cols)) in expected.iter().enumerate() {
        let file_rows = read_u64(&mut r, path)?;
        let file_cols = read_u64(&mut r, path)?;
        if (file_rows, file_cols) != (rows, cols) {
            return Err(Error::data(
                path,
                format!("tensor {i} is {file_rows}x{file_cols}, expected {rows}x{cols}"),
            ));
        }
    }
    for slice in params.flat_mut() {
        for v in slice {
            *v = read_f32(&mut r, path)?;
        }
    }
    Ok((params, cfg))
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn shadow_config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            feature_dim: 5,
            num_classes: 3,
            num_hops: 2,
            hidden_dim: 8,
            heads: 2,
            dropout: 0.3,
        }
    }

    fn random_hops(cfg: &ModelConfig, b: usize, seed: u64) -> Vec<Matrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..=cfg.num_hops)
            .map(|_| {
                Matrix::from_vec(
                    b,
                    cfg.feature_dim,
                    (0..b * cfg.feature_dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                )
            })
            .collect()
    }

    fn loss_of(
        params: &ModelParams<f64>,
        hops: &[Matrix<f64>],
        labels: &[u32],
        train: bool,
        seed: u64,
    ) -> f64 {
        let (logits, _) = forward(params, hops, train, seed).unwrap();
        let (loss, _) = cross_entropy(&logits, labels).unwrap();
        loss
    }

    /// Central finite differences over every parameter in float64.
    fn check_gradients(kind: ModelKind, train: bool) {
        let cfg = shadow_config(kind);
        let b = 8;
        let hops = random_hops(&cfg, b, 17);
        let labels: Vec<u32> = (0..b as u32).map(|i| i % cfg.num_classes as u32).collect();
        let dropout_seed = 11;

        let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let (logits, tape) = forward(&params, &hops, train, dropout_seed).unwrap();
        let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
        let analytic = backward(&params, &hops, &tape, &dlogits).unwrap();
        let analytic_flat: Vec<Vec<f64>> =
            analytic.flat().into_iter().map(|s| s.to_vec()).collect();

        let num_tensors = analytic_flat.len();
        for t in 0..num_tensors {
            for idx in 0..analytic_flat[t].len() {
                let original = params.flat()[t][idx];
                let h = 1e-5 * original.abs().max(1.0);

                params.flat_mut()[t][idx] = original + h;
                let loss_plus = loss_of(&params, &hops, &labels, train, dropout_seed);
                params.flat_mut()[t][idx] = original - h;
                let loss_minus = loss_of(&params, &hops, &labels, train, dropout_seed);
                params.flat_mut()[t][idx] = original;

                let fd = (loss_plus - loss_minus) / (2.0 * h);
                let an = analytic_flat[t][idx];
                if fd.abs() < 1e-9 && an.abs() < 1e-9 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(
                    rel <= 1e-4,
                    "{kind} tensor {t} idx {idx}: fd {fd:.8e} vs analytic {an:.8e} (rel {rel:.2e})"
                );
            }
        }
    }

    #[test]
    fn sgc_gradients_match_finite_differences() {
        check_gradients(ModelKind::Sgc, false);
    }

    #[test]
    fn sign_gradients_match_finite_differences() {
        check_gradients(ModelKind::Sign, false);
        check_gradients(ModelKind::Sign, true); // through the dropout masks
    }

    #[test]
    fn hoga_gradients_match_finite_differences() {
        check_gradients(ModelKind::Hoga, false);
        check_gradients(ModelKind::Hoga, true);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradients() {
        for kind in [ModelKind::Sgc, ModelKind::Sign, ModelKind::Hoga] {
            let cfg = shadow_config(kind);
            let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
            let hops = random_hops(&cfg, 4, 31);
            let labels = [0u32, 1, 2, 0];

            let doubled_hops: Vec<Matrix<f64>> = hops
                .iter()
                .map(|m| {
                    let mut data = m.data().to_vec();
                    data.extend_from_slice(m.data());
                    Matrix::from_vec(8, m.cols(), data)
                })
                .collect();
            let doubled_labels = [0u32, 1, 2, 0, 0, 1, 2, 0];

            let grad = |hops: &[Matrix<f64>], labels: &[u32]| {
                let (logits, tape) = forward(&params, hops, false, 0).unwrap();
                let (_, dlogits) = cross_entropy(&logits, labels).unwrap();
                backward(&params, hops, &tape, &dlogits)
                    .unwrap()
                    .flat()
                    .concat()
            };
            let g1 = grad(&hops, &labels);
            let g2 = grad(&doubled_hops, &doubled_labels);
            for (a, b) in g1.iter().zip(&g2) {
                assert!((a - b).abs() <= 1e-12, "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::Sgc, ModelKind::Sign, ModelKind::Hoga] {
            let cfg = shadow_config(kind);
            let params = ModelParams::<f32>::init(&cfg, 77).unwrap();
            let path = dir.path().join(format!("{kind}.ppgm"));
            save_checkpoint(&params, &cfg, &path).unwrap();
            let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
            assert_eq!(loaded_cfg.kind, cfg.kind);
            assert_eq!(loaded_cfg.num_hops, cfg.num_hops);
            assert_eq!(loaded.flat().concat(), params.flat().concat());
        }
    }

    #[test]
    fn checkpoint_rejects_corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = shadow_config(ModelKind::Sgc);
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let path = dir.path().join("m.ppgm");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
