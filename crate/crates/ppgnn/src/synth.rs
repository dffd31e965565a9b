//! Stochastic block model dataset generator.
//!
//! Nodes get round-robin class labels; intra-class edges appear with
//! probability `p_intra`, inter-class with `q_inter`. Features are a
//! class-mean vector scaled by `signal` plus Gaussian noise. Splits are a
//! shuffled 60/20/20 train/val/test assignment. Everything is a deterministic
//! function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::matrix::Matrix;

pub const SPLIT_TRAIN: u8 = 0;
pub const SPLIT_VAL: u8 = 1;
pub const SPLIT_TEST: u8 = 2;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub p_intra: f64,
    pub q_inter: f64,
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.num_classes < 2 || self.feature_dim == 0 {
            return Err(Error::Config(
                "need at least one node, two classes, and one feature".into(),
            ));
        }
        if self.num_classes > self.num_nodes {
            return Err(Error::Config("more classes than nodes".into()));
        }
        for (name, p) in [("p_intra", self.p_intra), ("q_inter", self.q_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} must lie in [0, 1]")));
            }
        }
        if self.noise < 0.0 || self.signal < 0.0 {
            return Err(Error::Config(
                "signal and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// In-memory synthetic dataset.
#[derive(Debug)]
pub struct SynthDataset {
    pub graph: CsrGraph,
    pub features: Matrix<f32>,
    pub labels: Vec<u32>,
    pub splits: Vec<u8>,
    pub num_classes: usize,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument strictly positive
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn gen_synth(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let n = spec.num_nodes;
    let c = spec.num_classes;
    let f = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();

    // fixed draw order: class means, edges, features, splits.
    // means are unit-norm so `signal` is the class-separation scale and the
    // task does not get easier for free as feature_dim grows
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut m: Vec<f64> = (0..f).map(|_| standard_normal(&mut rng)).collect();
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in &mut m {
                    *x /= norm;
                }
            }
            m
        })
        .collect();

    let mut edges: Vec<(u32, u32)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] {
                spec.p_intra
            } else {
                spec.q_inter
            };
            if p > 0.0 && rng.random::<f64>() < p {
                edges.push((i as u32, j as u32));
                edges.push((j as u32, i as u32));
            }
        }
    }
    let graph = CsrGraph::from_edges(n, &edges);

    let mut features = Matrix::zeros(n, f);
    for i in 0..n {
        let mean = &means[labels[i] as usize];
        let row = features.row_mut(i);
        for (v, &m) in row.iter_mut().zip(mean) {
            *v = (spec.signal * m + spec.noise * standard_normal(&mut rng)) as f32;
        }
    }

    // shuffled 60/20/20 split
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let train_end = n * 6 / 10;
    let val_end = n * 8 / 10;
    let mut splits = vec![SPLIT_TEST; n];
    for &node in &order[..train_end] {
        splits[node] = SPLIT_TRAIN;
    }
    for &node in &order[train_end..val_end] {
        splits[node] = SPLIT_VAL;
    }

    Ok(SynthDataset {
        graph,
        features,
        labels,
        splits,
        num_classes: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            num_nodes: 200,
            num_classes: 4,
            feature_dim: 8,
            p_intra: 0.05,
            q_inter: 0.005,
            signal: 1.0,
            noise: 1.0,
            seed: 42,
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = gen_synth(&spec()).unwrap();
        let b = gen_synth(&spec()).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn different_seed_changes_output() {
        let a = gen_synth(&spec()).unwrap();
        let mut s = spec();
        s.seed = 43;
        let b = gen_synth(&s).unwrap();
        assert_ne!(a.features.data(), b.features.data());
    }

    #[test]
    fn split_fractions_are_60_20_20() {
        let d = gen_synth(&spec()).unwrap();
        let count = |s: u8| d.splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(SPLIT_TRAIN), 120);
        assert_eq!(count(SPLIT_VAL), 40);
        assert_eq!(count(SPLIT_TEST), 40);
    }

    #[test]
    fn homophily_shows_in_edge_counts() {
        let d = gen_synth(&spec()).unwrap();
        let mut intra = 0usize;
        let mut inter = 0usize;
        for i in 0..d.graph.num_nodes() {
            for &j in d.graph.neighbors(i as u32) {
                if d.labels[i] == d.labels[j as usize] {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
        }
        assert!(intra > inter, "intra {intra} vs inter {inter}");
    }

    #[test]
    fn noiseless_features_collapse_to_class_means() {
        let mut s = spec();
        s.noise = 0.0;
        s.q_inter = 0.0;
        let d = gen_synth(&s).unwrap();
        for i in 0..s.num_nodes {
            for j in 0..s.num_nodes {
                if d.labels[i] == d.labels[j] {
                    assert_eq!(d.features.row(i), d.features.row(j));
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_probabilities() {
        let mut s = spec();
        s.p_intra = 1.5;
        assert!(gen_synth(&s).is_err());
    }
}
