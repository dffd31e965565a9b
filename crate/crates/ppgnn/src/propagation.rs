//! Degree-normalized diffusion operators and hop-feature propagation.
//!
//! The operator is the graph's normalized adjacency (optionally with self
//! loops), stored in CSR with per-edge float64 values. Propagation multiplies
//! it repeatedly against a dense feature matrix, producing one matrix per hop.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{CsrGraph, NodeId};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// `value(i,j) = 1 / sqrt(deg(i) * deg(j))`; symmetric on undirected input.
    Symmetric,
    /// `value(i,j) = 1 / deg(i)`; each non-empty row sums to 1.
    Row,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(NormKind::Symmetric),
            "row" => Ok(NormKind::Row),
            other => Err(Error::Config(format!(
                "unknown normalization {other:?} (expected symmetric|row)"
            ))),
        }
    }
}

/// Normalized adjacency in CSR with f64 edge values.
#[derive(Debug, Clone)]
pub struct PropagationOperator {
    num_nodes: usize,
    row_offsets: Vec<u64>,
    col_indices: Vec<NodeId>,
    values: Vec<f64>,
    norm_kind: NormKind,
    self_loops: bool,
    operator_id: u16,
}

impl PropagationOperator {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm_kind
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn operator_id(&self) -> u16 {
        self.operator_id
    }

    pub fn row_entries(&self, i: usize) -> (&[NodeId], &[f64]) {
        let start = self.row_offsets[i] as usize;
        let end = self.row_offsets[i + 1] as usize;
        (&self.col_indices[start..end], &self.values[start..end])
    }

    /// Entry (i, j), or 0 if absent.
    pub fn value(&self, i: usize, j: NodeId) -> f64 {
        let (cols, vals) = self.row_entries(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }
}

/// Build the normalized operator from a graph.
///
/// With `self_loops`, a diagonal entry is added to every row and degrees count
/// it. Symmetric normalization assumes an undirected input (not enforced).
/// Zero-degree rows, only possible without self loops, stay empty so
/// propagation writes zero rows instead of NaN.
pub fn build_operator(g: &CsrGraph, norm_kind: NormKind, self_loops: bool) -> PropagationOperator {
    let n = g.num_nodes();
    let deg = crate::graph::degree_vector(g, self_loops);

    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0u64);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();

    for i in 0..n {
        let nbrs = g.neighbors(i as NodeId);
        let has_loop_edge = nbrs.binary_search(&(i as NodeId)).is_ok();
        let mut cols: Vec<NodeId> = Vec::with_capacity(nbrs.len() + 1);
        cols.extend_from_slice(nbrs);
        if self_loops && !has_loop_edge {
            let pos = cols.partition_point(|&c| c < i as NodeId);
            cols.insert(pos, i as NodeId);
        }
        for &j in &cols {
            let v = match norm_kind {
                NormKind::Symmetric => 1.0 / (deg[i] * deg[j as usize]).sqrt(),
                NormKind::Row => 1.0 / deg[i],
            };
            col_indices.push(j);
            values.push(v);
        }
        row_offsets.push(col_indices.len() as u64);
    }

    PropagationOperator {
        num_nodes: n,
        row_offsets,
        col_indices,
        values,
        norm_kind,
        self_loops,
        operator_id: 0,
    }
}

/// Sparse-dense product `B * x`, accumulated in f64 and rounded to f32.
///
/// Parallelizes over output rows; each row accumulates its entries in CSR
/// order, so results are deterministic.
pub fn spmm(op: &PropagationOperator, x: &Matrix<f32>) -> Result<Matrix<f32>> {
    if x.rows() != op.num_nodes() {
        return Err(Error::Shape(format!(
            "operator has {} nodes but feature matrix has {} rows",
            op.num_nodes(),
            x.rows()
        )));
    }
    let f = x.cols();
    let mut out = Matrix::zeros(op.num_nodes(), f);

    out.data_mut()
        .par_chunks_mut(f.max(1))
        .enumerate()
        .for_each(|(i, out_row)| {
            let (cols, vals) = op.row_entries(i);
            let mut acc = vec![0.0f64; f];
            for (&j, &v) in cols.iter().zip(vals) {
                let x_row = x.row(j as usize);
                for (a, &xv) in acc.iter_mut().zip(x_row) {
                    *a += v * xv as f64;
                }
            }
            for (o, a) in out_row.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        });
    Ok(out)
}

/// All hop features for one operator: `hops[0]` is the input, `hops[r]` is
/// the operator applied r times.
#[derive(Debug, Clone)]
pub struct HopFeatureSet {
    pub hops: Vec<Matrix<f32>>,
    pub num_hops: usize,
    pub feature_dim: usize,
    pub operator_id: u16,
}

pub fn propagate(op: &PropagationOperator, x: &Matrix<f32>, num_hops: usize) -> Result<HopFeatureSet> {
    let mut hops = Vec::with_capacity(num_hops + 1);
    hops.push(x.clone());
    for _ in 0..num_hops {
        let next = spmm(op, hops.last().expect("at least one hop"))?;
        hops.push(next);
    }
    Ok(HopFeatureSet {
        num_hops,
        feature_dim: x.cols(),
        operator_id: op.operator_id(),
        hops,
    })
}
