//! Graph representation and the normalized Laplacian.
//!
//! Graphs are undirected, unweighted, loop-free, with every node of degree
//! at least one. The Laplacian is the symmetric normalized variant
//! `L = I - D^{-1/2} A D^{-1/2}`, whose spectrum lies in [0, 2]; its
//! eigenvectors are the Fourier basis every filter in this crate modulates.

use crate::dense::Mat;
use crate::error::{Error, Result};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::path::Path;

/// Compressed sparse row matrix, symmetric by construction here.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets. Triplets must be unique;
    /// they are sorted into row-major order internally.
    pub fn from_triplets(n: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for &(r, c, v) in &triplets {
            row_ptr[r as usize + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// y = A x for a single vector.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for (j, v) in self.row_entries(i) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    /// Sparse × dense product A·X, X given row-major n×d.
    pub fn matmat(&self, x: &Mat) -> Mat {
        assert_eq!(x.rows(), self.n);
        let d = x.cols();
        let mut out = Mat::zeros(self.n, d);
        for i in 0..self.n {
            let lo = self.row_ptr[i];
            let hi = self.row_ptr[i + 1];
            let out_row = out.row_mut(i);
            for idx in lo..hi {
                let j = self.col_idx[idx] as usize;
                let v = self.values[idx];
                let x_row = x.row(j);
                for c in 0..d {
                    out_row[c] += v * x_row[c];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row_entries(i) {
                m.set(i, j, v);
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    EdgeList,
    Json,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge-list" | "edgelist" | "txt" => Ok(GraphFormat::EdgeList),
            "json" => Ok(GraphFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown graph format {other:?} (expected edge-list or json)"
            ))),
        }
    }
}

/// Undirected unweighted graph with optional dense node features.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(u32, u32)>,
    adjacency: CsrMatrix,
    features: Option<Mat>,
}

impl Graph {
    /// Build from an undirected edge list. Node ids must already be compact
    /// in [0, n). Duplicate edges collapse; self-loops are dropped (with a
    /// warning) or rejected under `strict_loops`.
    pub fn from_edges(
        n: usize,
        raw_edges: &[(u32, u32)],
        features: Option<Mat>,
        strict_loops: bool,
    ) -> Result<LoadedGraph> {
        let mut warnings = Vec::new();
        let mut edges: Vec<(u32, u32)> = Vec::with_capacity(raw_edges.len());
        for &(u, v) in raw_edges {
            if u as usize >= n || v as usize >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u}, {v}) references a node outside [0, {n})"
                )));
            }
            if u == v {
                if strict_loops {
                    return Err(Error::SelfLoop { node: u as usize });
                }
                warnings.push(format!("dropped self-loop on node {u}"));
                continue;
            }
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        edges.dedup();

        let mut degrees = vec![0usize; n];
        for &(u, v) in &edges {
            degrees[u as usize] += 1;
            degrees[v as usize] += 1;
        }
        if let Some(node) = degrees.iter().position(|&d| d == 0) {
            return Err(Error::IsolatedNode { node });
        }

        if let Some(f) = &features {
            if f.rows() != n {
                return Err(Error::DimensionMismatch {
                    context: "graph features".into(),
                    expected: format!("{n} rows"),
                    got: format!("{} rows", f.rows()),
                });
            }
            if !f.is_finite() {
                return Err(Error::NonFinite {
                    context: "graph features".into(),
                });
            }
        }

        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in &edges {
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        let adjacency = CsrMatrix::from_triplets(n, triplets);

        Ok(LoadedGraph {
            graph: Graph {
                n,
                edges,
                adjacency,
                features,
            },
            warnings,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> Option<&Mat> {
        self.features.as_ref()
    }

    pub fn set_features(&mut self, features: Option<Mat>) -> Result<()> {
        if let Some(f) = &features {
            if f.rows() != self.n {
                return Err(Error::DimensionMismatch {
                    context: "graph features".into(),
                    expected: format!("{} rows", self.n),
                    got: format!("{} rows", f.rows()),
                });
            }
        }
        self.features = features;
        Ok(())
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row_entries(node).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.degree(i)).collect()
    }

    /// SHA-256 over node count, sorted edge list, and feature bits.
    /// Used to key the eigendecomposition cache.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        for &(u, v) in &self.edges {
            h.update(u.to_le_bytes());
            h.update(v.to_le_bytes());
        }
        if let Some(f) = &self.features {
            h.update((f.rows() as u64).to_le_bytes());
            h.update((f.cols() as u64).to_le_bytes());
            for v in f.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A parsed graph plus any non-fatal warnings from the loader.
#[derive(Debug)]
pub struct LoadedGraph {
    pub graph: Graph,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<(u32, u32)>,
    #[serde(default)]
    features: Option<Vec<Vec<f64>>>,
}

/// Load a graph from disk in the declared format.
///
/// Edge-list files hold one `u v` pair per line (0-based, whitespace
/// separated, `#` comments); node ids are compacted to [0, n). JSON files
/// carry an explicit node count.
pub fn load_graph(path: &Path, format: GraphFormat, strict_loops: bool) -> Result<LoadedGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    match format {
        GraphFormat::EdgeList => parse_edge_list(&text, strict_loops),
        GraphFormat::Json => parse_graph_json(&text, strict_loops),
    }
}

pub fn parse_edge_list(text: &str, strict_loops: bool) -> Result<LoadedGraph> {
    let mut raw: Vec<(u64, u64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, lineno: usize| -> Result<u64> {
            let tok = tok.ok_or(Error::Parse {
                line: lineno + 1,
                msg: "expected two node ids".into(),
            })?;
            tok.parse::<u64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("invalid node id {tok:?}"),
            })
        };
        let u = parse(it.next(), lineno)?;
        let v = parse(it.next(), lineno)?;
        if it.next().is_some() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "trailing tokens after edge pair".into(),
            });
        }
        raw.push((u, v));
    }

    // Compact ids to [0, n) in sorted order of the original labels.
    let mut ids: Vec<u64> = raw.iter().flat_map(|&(u, v)| [u, v]).collect();
    ids.sort_unstable();
    ids.dedup();
    let index_of = |id: u64| ids.binary_search(&id).unwrap() as u32;
    let edges: Vec<(u32, u32)> = raw
        .iter()
        .map(|&(u, v)| (index_of(u), index_of(v)))
        .collect();
    Graph::from_edges(ids.len(), &edges, None, strict_loops)
}

pub fn parse_graph_json(text: &str, strict_loops: bool) -> Result<LoadedGraph> {
    let parsed: GraphJson = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let features = match parsed.features {
        Some(rows) => {
            if rows.len() != parsed.n {
                return Err(Error::DimensionMismatch {
                    context: "json features".into(),
                    expected: format!("{} rows", parsed.n),
                    got: format!("{} rows", rows.len()),
                });
            }
            Some(Mat::from_rows(&rows))
        }
        None => None,
    };
    Graph::from_edges(parsed.n, &parsed.edges, features, strict_loops)
}

/// Load a dense feature matrix from CSV (one row per node).
pub fn load_features_csv(path: &Path, has_header: bool) -> Result<Mat> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && has_header {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("invalid number {tok:?}"),
                })
            })
            .collect();
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty feature file".into(),
        });
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Parse {
            line: 1,
            msg: "ragged feature rows".into(),
        });
    }
    Ok(Mat::from_rows(&rows))
}

/// Symmetric normalized Laplacian I − D^{-1/2} A D^{-1/2}.
///
/// Off-diagonal entries are −1/√(deg(u)·deg(v)); the value for (u, v) and
/// (v, u) is computed once, so the stored matrix is bit-identically
/// symmetric. Diagonal entries are exactly 1.
#[derive(Debug, Clone)]
pub struct NormalizedLaplacian {
    n: usize,
    matrix: CsrMatrix,
    degrees: Vec<f64>,
    lambda_max_bound: f64,
}

pub fn build_normalized_laplacian(g: &Graph) -> NormalizedLaplacian {
    let n = g.node_count();
    let degrees: Vec<f64> = g.degrees().iter().map(|&d| d as f64).collect();
    let mut triplets = Vec::with_capacity(g.edge_count() * 2 + n);
    for i in 0..n {
        triplets.push((i as u32, i as u32, 1.0));
    }
    for &(u, v) in g.edges() {
        let w = -1.0 / (degrees[u as usize] * degrees[v as usize]).sqrt();
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    NormalizedLaplacian {
        n,
        matrix: CsrMatrix::from_triplets(n, triplets),
        degrees,
        lambda_max_bound: 2.0,
    }
}

impl NormalizedLaplacian {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn lambda_max_bound(&self) -> f64 {
        self.lambda_max_bound
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Normalized kernel direction D^{1/2}·1. For a connected graph this
    /// spans the λ = 0 eigenspace.
    pub fn kernel_direction(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.degrees.iter().map(|d| d.sqrt()).collect();
        let norm = crate::dense::norm2(&v);
        for x in &mut v {
            *x /= norm;
        }
        v
    }

    pub fn to_dense(&self) -> Mat {
        self.matrix.to_dense()
    }
}

/// Exact sparse product L·X.
pub fn laplacian_matmat(lap: &NormalizedLaplacian, x: &Mat) -> Result<Mat> {
    if x.rows() != lap.n {
        return Err(Error::DimensionMismatch {
            context: "laplacian_matmat".into(),
            expected: format!("{} rows", lap.n),
            got: format!("{} rows", x.rows()),
        });
    }
    Ok(lap.matrix.matmat(x))
}

/// Breadth-first hop distances from `seed`; `None` marks unreachable nodes.
pub fn hop_distances(g: &Graph, seed: usize) -> Result<Vec<Option<u32>>> {
    if seed >= g.node_count() {
        return Err(Error::InvalidArgument(format!(
            "seed {seed} out of range for {} nodes",
            g.node_count()
        )));
    }
    let mut dist = vec![None; g.node_count()];
    let mut queue = VecDeque::new();
    dist[seed] = Some(0);
    queue.push_back(seed);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        for (v, _) in g.adjacency().row_entries(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}
