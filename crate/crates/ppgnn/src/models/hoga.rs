//! HOGA-style model: each node's R+1 hop features become R+1 tokens, mixed by
//! one multi-head self-attention layer, mean-pooled, then classified by an
//! MLP.
//!
//! Attention is per node: queries, keys, and values are projections of that
//! node's own hop tokens, scores are scaled by `1/sqrt(head_dim)`, and the
//! softmax runs over the R+1 key tokens.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

use super::common::{
    colsum, dropout_backward_inplace, dropout_inplace, flush_tiny, relu_backward_from_output,
    relu_inplace, Linear,
};

const TAG_MLP: u64 = 0x3000;

#[derive(Debug, Clone)]
pub struct HogaParams<T: Scalar> {
    /// Token embedding, `F -> d_model`.
    pub input_proj: Linear<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    /// Readout MLP, `d_model -> d_model -> C`.
    pub mlp: Vec<Linear<T>>,
    pub heads: usize,
    pub num_hops: usize,
    pub dropout: f64,
}

#[derive(Debug)]
pub struct HogaTape<T: Scalar> {
    tokens: Vec<Matrix<T>>,
    q: Vec<Matrix<T>>,
    k: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    /// Per head: attention weights, shape `(R+1)*(R+1) x b`, row `r*(R+1)+s`.
    alpha: Vec<Matrix<T>>,
    /// Pre-output-projection attended tokens (heads concatenated).
    attended: Vec<Matrix<T>>,
    mlp_inputs: Vec<Matrix<T>>,
    train_mode: bool,
    dropout_seed: u64,
}

impl<T: Scalar> HogaTape<T> {
    #[cfg(test)]
    pub(crate) fn attended(&self) -> &[Matrix<T>] {
        &self.attended
    }

    #[cfg(test)]
    pub(crate) fn values(&self) -> &[Matrix<T>] {
        &self.v
    }
}

impl<T: Scalar> HogaParams<T> {
    pub fn init(
        feature_dim: usize,
        num_classes: usize,
        num_hops: usize,
        d_model: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by heads {heads}"
            )));
        }
        Ok(HogaParams {
            input_proj: Linear::glorot(feature_dim, d_model, rng),
            wq: Linear::glorot(d_model, d_model, rng),
            wk: Linear::glorot(d_model, d_model, rng),
            wv: Linear::glorot(d_model, d_model, rng),
            wo: Linear::glorot(d_model, d_model, rng),
            mlp: vec![
                Linear::glorot(d_model, d_model, rng),
                Linear::glorot(d_model, num_classes, rng),
            ],
            heads,
            num_hops,
            dropout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.input_proj.out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.in_dim(), l.out_dim());
        HogaParams {
            input_proj: z(&self.input_proj),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            mlp: self.mlp.iter().map(z).collect(),
            heads: self.heads,
            num_hops: self.num_hops,
            dropout: self.dropout,
        }
    }

    pub fn forward(
        &self,
        hops: &[Matrix<T>],
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<(Matrix<T>, HogaTape<T>)> {
        if hops.len() != self.num_hops + 1 {
            return Err(Error::Shape(format!(
                "expected {} hop matrices, got {}",
                self.num_hops + 1,
                hops.len()
            )));
        }
        let tokens_n = hops.len();
        let b = hops[0].rows();
        let dm = self.d_model();
        let heads = self.heads;
        let dh = dm / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let rate = if train_mode { self.dropout } else { 0.0 };

        let tokens: Vec<Matrix<T>> = hops.iter().map(|h| self.input_proj.forward(h)).collect();
        let q: Vec<Matrix<T>> = tokens.iter().map(|t| self.wq.forward(t)).collect();
        let k: Vec<Matrix<T>> = tokens.iter().map(|t| self.wk.forward(t)).collect();
        let v: Vec<Matrix<T>> = tokens.iter().map(|t| self.wv.forward(t)).collect();

        // scaled dot-product scores per head, then softmax over key tokens
        let mut alpha: Vec<Matrix<T>> = Vec::with_capacity(heads);
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let mut scores = Matrix::zeros(tokens_n * tokens_n, b);
            for r in 0..tokens_n {
                for s in 0..tokens_n {
                    let row = scores.row_mut(r * tokens_n + s);
                    for (i, val) in row.iter_mut().enumerate() {
                        let qi = &q[r].row(i)[lo..hi];
                        let ki = &k[s].row(i)[lo..hi];
                        let mut acc = T::ZERO;
                        for (&a, &c) in qi.iter().zip(ki) {
                            acc += a * c;
                        }
                        *val = acc * scale;
                    }
                }
            }
            // softmax across s for each (r, i)
            for r in 0..tokens_n {
                for i in 0..b {
                    let mut max = scores.get(r * tokens_n, i);
                    for s in 1..tokens_n {
                        max = max.maximum(scores.get(r * tokens_n + s, i));
                    }
                    let mut sum = T::ZERO;
                    for s in 0..tokens_n {
                        let e = (scores.get(r * tokens_n + s, i) - max).exp();
                        scores.set(r * tokens_n + s, i, e);
                        sum += e;
                    }
                    for s in 0..tokens_n {
                        let val = flush_tiny(scores.get(r * tokens_n + s, i) / sum);
                        scores.set(r * tokens_n + s, i, val);
                    }
                }
            }
            alpha.push(scores);
        }

        let mut attended: Vec<Matrix<T>> = (0..tokens_n).map(|_| Matrix::zeros(b, dm)).collect();
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            for (r, att_r) in attended.iter_mut().enumerate() {
                for (s, v_s) in v.iter().enumerate() {
                    let weights = alpha[h].row(r * tokens_n + s);
                    for i in 0..b {
                        let w = weights[i];
                        let src = &v_s.row(i)[lo..hi];
                        let dst = &mut att_r.row_mut(i)[lo..hi];
                        for (d, &x) in dst.iter_mut().zip(src) {
                            *d += w * x;
                        }
                    }
                }
            }
        }

        let inv_tokens = T::from_f64(1.0 / tokens_n as f64);
        let mut pooled = Matrix::zeros(b, dm);
        for att in &attended {
            let out_r = self.wo.forward(att);
            for (p, &o) in pooled.data_mut().iter_mut().zip(out_r.data()) {
                *p += o * inv_tokens;
            }
        }

        let mut mlp_inputs = vec![pooled];
        let last = self.mlp.len() - 1;
        for (l, layer) in self.mlp.iter().enumerate() {
            let input = mlp_inputs.last().expect("mlp input");
            let mut hdn = layer.forward(input);
            if l < last {
                relu_inplace(&mut hdn);
                dropout_inplace(&mut hdn, rate, dropout_seed, TAG_MLP + l as u64);
                mlp_inputs.push(hdn);
            } else {
                return Ok((
                    hdn,
                    HogaTape {
                        tokens,
                        q,
                        k,
                        v,
                        alpha,
                        attended,
                        mlp_inputs,
                        train_mode,
                        dropout_seed,
                    },
                ));
            }
        }
        unreachable!("mlp has at least one layer")
    }

    pub fn backward(
        &self,
        hops: &[Matrix<T>],
        tape: &HogaTape<T>,
        dlogits: &Matrix<T>,
    ) -> HogaParams<T> {
        let tokens_n = hops.len();
        let b = hops[0].rows();
        let dm = self.d_model();
        let heads = self.heads;
        let dh = dm / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let rate = if tape.train_mode { self.dropout } else { 0.0 };
        let mut grads = self.zeros_like();

        // MLP backward
        let mut delta = dlogits.clone();
        for l in (0..self.mlp.len()).rev() {
            let input = &tape.mlp_inputs[l];
            let (dw, db, dx) = self.mlp[l].backward(input, &delta);
            grads.mlp[l] = Linear { w: dw, b: db };
            delta = dx;
            if l > 0 {
                dropout_backward_inplace(&mut delta, rate, tape.dropout_seed, TAG_MLP + (l - 1) as u64);
                relu_backward_from_output(&mut delta, input);
            }
        }
        // delta is now d(pooled); mean pooling spreads it evenly over tokens
        let inv_tokens = T::from_f64(1.0 / tokens_n as f64);
        let dout = delta.map(|x| x * inv_tokens);

        let mut dattended: Vec<Matrix<T>> = Vec::with_capacity(tokens_n);
        for att in &tape.attended {
            let (dw, db, dx) = self.wo.backward(att, &dout);
            add_matrix(&mut grads.wo.w, &dw);
            add_vec(&mut grads.wo.b, &db);
            dattended.push(dx);
        }

        let mut dq: Vec<Matrix<T>> = (0..tokens_n).map(|_| Matrix::zeros(b, dm)).collect();
        let mut dk: Vec<Matrix<T>> = (0..tokens_n).map(|_| Matrix::zeros(b, dm)).collect();
        let mut dv: Vec<Matrix<T>> = (0..tokens_n).map(|_| Matrix::zeros(b, dm)).collect();

        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let alpha = &tape.alpha[h];

            // d(alpha) and d(v)
            let mut dalpha = Matrix::zeros(tokens_n * tokens_n, b);
            for (r, datt_r) in dattended.iter().enumerate() {
                for (s, dv_s) in dv.iter_mut().enumerate() {
                    let row_idx = r * tokens_n + s;
                    let v_s = &tape.v[s];
                    for i in 0..b {
                        let datt = &datt_r.row(i)[lo..hi];
                        let vs = &v_s.row(i)[lo..hi];
                        let mut acc = T::ZERO;
                        for (&a, &c) in datt.iter().zip(vs) {
                            acc += a * c;
                        }
                        dalpha.set(row_idx, i, acc);

                        let w = alpha.get(row_idx, i);
                        let dv_row = &mut dv_s.row_mut(i)[lo..hi];
                        for (d, &g) in dv_row.iter_mut().zip(datt) {
                            *d += w * g;
                        }
                    }
                }
            }

            // softmax backward: ds = alpha * (dalpha - sum_t alpha_t dalpha_t)
            let mut dscore = Matrix::zeros(tokens_n * tokens_n, b);
            for r in 0..tokens_n {
                for i in 0..b {
                    let mut dot = T::ZERO;
                    for s in 0..tokens_n {
                        dot += alpha.get(r * tokens_n + s, i) * dalpha.get(r * tokens_n + s, i);
                    }
                    for s in 0..tokens_n {
                        let a = alpha.get(r * tokens_n + s, i);
                        let g = dalpha.get(r * tokens_n + s, i);
                        dscore.set(r * tokens_n + s, i, a * (g - dot));
                    }
                }
            }

            // scores = scale * q . k
            for (r, dq_r) in dq.iter_mut().enumerate() {
                for (s, dk_s) in dk.iter_mut().enumerate() {
                    let row_idx = r * tokens_n + s;
                    let k_s = &tape.k[s];
                    let q_r = &tape.q[r];
                    for i in 0..b {
                        let ds = dscore.get(row_idx, i) * scale;
                        let dq_row = &mut dq_r.row_mut(i)[lo..hi];
                        for (d, &kv) in dq_row.iter_mut().zip(&k_s.row(i)[lo..hi]) {
                            *d += ds * kv;
                        }
                        let dk_row = &mut dk_s.row_mut(i)[lo..hi];
                        for (d, &qv) in dk_row.iter_mut().zip(&q_r.row(i)[lo..hi]) {
                            *d += ds * qv;
                        }
                    }
                }
            }
        }

        // projections back to tokens, then to the input embedding
        for r in 0..tokens_n {
            let (dwq, dbq, dtq) = self.wq.backward(&tape.tokens[r], &dq[r]);
            add_matrix(&mut grads.wq.w, &dwq);
            add_vec(&mut grads.wq.b, &dbq);
            let (dwk, dbk, dtk) = self.wk.backward(&tape.tokens[r], &dk[r]);
            add_matrix(&mut grads.wk.w, &dwk);
            add_vec(&mut grads.wk.b, &dbk);
            let (dwv, dbv, dtv) = self.wv.backward(&tape.tokens[r], &dv[r]);
            add_matrix(&mut grads.wv.w, &dwv);
            add_vec(&mut grads.wv.b, &dbv);

            let mut dtoken = dtq;
            add_matrix(&mut dtoken, &dtk);
            add_matrix(&mut dtoken, &dtv);

            let dw = crate::matrix::matmul_at_b(&hops[r], &dtoken);
            add_matrix(&mut grads.input_proj.w, &dw);
            add_vec(&mut grads.input_proj.b, &colsum(&dtoken));
        }

        grads
    }
}

fn add_matrix<T: Scalar>(acc: &mut Matrix<T>, other: &Matrix<T>) {
    for (a, &o) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += o;
    }
}

fn add_vec<T: Scalar>(acc: &mut [T], other: &[T]) {
    for (a, &o) in acc.iter_mut().zip(other) {
        *a += o;
    }
}
