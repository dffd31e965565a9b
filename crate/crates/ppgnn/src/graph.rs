//! Sparse directed graphs in compressed-sparse-row form.
//!
//! Node ids are `u32`; row offsets are 64-bit. Column indices are sorted and
//! deduplicated within each row, so adjacency is binary-searchable and
//! iteration order is deterministic.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type NodeId = u32;

const PPGC_MAGIC: &[u8; 4] = b"PPGC";
const PPGC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrGraph {
    num_nodes: usize,
    row_offsets: Vec<u64>,
    col_indices: Vec<NodeId>,
}

impl CsrGraph {
    /// Build from an edge list; sorts and deduplicates neighbors per row.
    pub fn from_edges(num_nodes: usize, edges: &[(NodeId, NodeId)]) -> Self {
        let mut adjacency: Vec<Vec<NodeId>> = vec![Vec::new(); num_nodes];
        for &(src, dst) in edges {
            adjacency[src as usize].push(dst);
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        row_offsets.push(0u64);
        let mut col_indices = Vec::with_capacity(edges.len());
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
            nbrs.dedup();
            col_indices.extend_from_slice(nbrs);
            row_offsets.push(col_indices.len() as u64);
        }
        Self {
            num_nodes,
            row_offsets,
            col_indices,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[u64] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[NodeId] {
        &self.col_indices
    }

    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        let start = self.row_offsets[node as usize] as usize;
        let end = self.row_offsets[node as usize + 1] as usize;
        &self.col_indices[start..end]
    }

    pub fn out_degree(&self, node: NodeId) -> usize {
        self.neighbors(node).len()
    }

    /// Serialize: magic, version u32, n u64, m u64, row offsets (u64 each),
    /// column indices (u32 each); all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            w.write_all(PPGC_MAGIC)?;
            w.write_all(&PPGC_VERSION.to_le_bytes())?;
            w.write_all(&(self.num_nodes as u64).to_le_bytes())?;
            w.write_all(&(self.num_edges() as u64).to_le_bytes())?;
            for &o in &self.row_offsets {
                w.write_all(&o.to_le_bytes())?;
            }
            for &c in &self.col_indices {
                w.write_all(&c.to_le_bytes())?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != PPGC_MAGIC {
            return Err(Error::data(path, "bad magic (expected PPGC)"));
        }
        let version = read_u32(&mut r, path)?;
        if version != PPGC_VERSION {
            return Err(Error::data(path, format!("unsupported version {version}")));
        }
        let n = read_u64(&mut r, path)? as usize;
        let m = read_u64(&mut r, path)? as usize;

        let mut row_offsets = vec![0u64; n + 1];
        let mut buf8 = [0u8; 8];
        for o in row_offsets.iter_mut() {
            r.read_exact(&mut buf8).map_err(|e| Error::io(path, e))?;
            *o = u64::from_le_bytes(buf8);
        }
        let mut col_indices = vec![0u32; m];
        let mut buf4 = [0u8; 4];
        for c in col_indices.iter_mut() {
            r.read_exact(&mut buf4).map_err(|e| Error::io(path, e))?;
            *c = u32::from_le_bytes(buf4);
        }

        if row_offsets[0] != 0 || row_offsets[n] != m as u64 {
            return Err(Error::data(path, "inconsistent row offsets"));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::data(path, "row offsets not non-decreasing"));
        }
        if col_indices.iter().any(|&c| c as usize >= n) {
            return Err(Error::data(path, "column index out of range"));
        }

        Ok(Self {
            num_nodes: n,
            row_offsets,
            col_indices,
        })
    }
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

/// Parse a whitespace-separated "src dst" edge-list file.
///
/// Node count is `max id + 1`. With `undirected`, both directions are stored.
/// Duplicate edges collapse to one entry per direction.
pub fn ingest_edge_list(path: &Path, undirected: bool) -> Result<CsrGraph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    let mut max_id: Option<NodeId> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let src = parse_node(parts.next(), path, line_no)?;
        let dst = parse_node(parts.next(), path, line_no)?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: "expected exactly two fields per line".into(),
            });
        }
        max_id = Some(max_id.map_or(src.max(dst), |m| m.max(src).max(dst)));
        edges.push((src, dst));
        if undirected && src != dst {
            edges.push((dst, src));
        }
    }

    let num_nodes = max_id.map_or(0, |m| m as usize + 1);
    Ok(CsrGraph::from_edges(num_nodes, &edges))
}

fn parse_node(field: Option<&str>, path: &Path, line: usize) -> Result<NodeId> {
    let field = field.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: "missing field".into(),
    })?;
    field.parse::<NodeId>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid node id {field:?} (must fit in u32)"),
    })
}

/// Out-degrees as f64, optionally counting one self loop per node.
pub fn degree_vector(g: &CsrGraph, with_self_loops: bool) -> Vec<f64> {
    let bump = if with_self_loops { 1.0 } else { 0.0 };
    (0..g.num_nodes())
        .map(|i| g.out_degree(i as NodeId) as f64 + bump)
        .collect()
}
