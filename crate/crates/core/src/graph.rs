//! Graph representation and the spatial convolution used by the denoiser.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Activation applied after the graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

/// Fixed graph with a cached symmetric-normalized adjacency.
///
/// Immutable after construction; safe for concurrent reads.
#[derive(Debug, Clone)]
pub struct Graph<S> {
    node_count: usize,
    adjacency: Tensor<S>,
    normalized: Tensor<S>,
}

impl<S: Scalar> Graph<S> {
    pub fn new(adjacency: Tensor<S>) -> Result<Self> {
        let normalized = normalize_adjacency(&adjacency)?;
        let node_count = adjacency.shape()[0];
        Ok(Self { node_count, adjacency, normalized })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn adjacency(&self) -> &Tensor<S> {
        &self.adjacency
    }

    /// D^{-1/2} (A + I) D^{-1/2}, cached at construction.
    pub fn normalized(&self) -> &Tensor<S> {
        &self.normalized
    }

    /// Graph with the given adjacency rows/columns permuted by `perm`
    /// (new index i holds old index perm[i]).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let v = self.node_count;
        if perm.len() != v {
            return Err(Error::Invalid(format!("permutation of length {} for {} nodes", perm.len(), v)));
        }
        let a = self.adjacency.data();
        let permuted = Tensor::from_fn(vec![v, v], |idx| {
            let (i, j) = (idx / v, idx % v);
            a[perm[i] * v + perm[j]]
        });
        Graph::new(permuted)
    }
}

/// Symmetric normalization D^{-1/2} (A + I) D^{-1/2} with self-loops added,
/// so every degree is at least one and no division by zero can occur.
pub fn normalize_adjacency<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = a.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::shape("normalize_adjacency", format!("adjacency must be square, got {:?}", sh)));
    }
    let v = sh[0];
    let d = a.data();
    if let Some(idx) = d.iter().position(|&x| x < S::zero()) {
        return Err(Error::Invalid(format!(
            "normalize_adjacency: negative weight {} at ({}, {})",
            d[idx],
            idx / v,
            idx % v
        )));
    }
    // Degrees of A + I.
    let mut deg = vec![S::zero(); v];
    for i in 0..v {
        let mut s = S::one();
        for j in 0..v {
            s += d[i * v + j];
        }
        deg[i] = s;
    }
    let inv_sqrt: Vec<S> = deg.iter().map(|&x| S::one() / x.sqrt()).collect();
    let out = Tensor::from_fn(vec![v, v], |idx| {
        let (i, j) = (idx / v, idx % v);
        let aij = if i == j { d[idx] + S::one() } else { d[idx] };
        inv_sqrt[i] * aij * inv_sqrt[j]
    });
    Ok(out)
}

/// Graph convolution on node features: activation(A_gcn Â· H Â· W).
///
/// `h` is a [V, C] node-feature var, `w` a square [C, C] weight var; the
/// aggregation contracts over nodes with canonical-order summation so node
/// relabeling permutes the output exactly.
pub fn graph_conv<S: Scalar>(
    tape: &mut Tape<S>,
    graph: &Graph<S>,
    h: Var,
    w: Var,
    activation: Activation,
) -> Result<Var> {
    let hs = tape.value(h).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    if hs.len() != 2 || hs[0] != graph.node_count() {
        return Err(Error::shape(
            "graph_conv",
            format!("features {:?} do not match node count {}", hs, graph.node_count()),
        ));
    }
    if ws.len() != 2 || ws[0] != ws[1] || ws[0] != hs[1] {
        return Err(Error::shape(
            "graph_conv",
            format!("weights {:?} must be square with side {}", ws, hs[1]),
        ));
    }
    let a = tape.constant(graph.normalized().clone());
    let agg = tape.spatial_aggregate(a, h)?;
    let hw = tape.matmul(agg, w)?;
    match activation {
        Activation::Identity => Ok(hw),
        Activation::Relu => tape.relu(hw),
    }
}

/// Load an adjacency matrix from CSV.
///
/// First line is a header: `dense` introduces V rows of V comma-separated
/// weights; `edges` introduces `src,dst,weight` rows over node ids 0..V-1
/// (V inferred from the largest id).
pub fn load_adjacency_csv<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    parse_adjacency_csv(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

pub fn parse_adjacency_csv<S: Scalar>(text: &str) -> Result<Tensor<S>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Data("empty adjacency file".to_string()))?;
    match header.trim() {
        "dense" => {
            let mut rows: Vec<Vec<S>> = Vec::new();
            for (lineno, line) in lines {
                let row: Vec<S> = line
                    .split(',')
                    .map(|cell| {
                        cell.trim()
                            .parse::<f64>()
                            .map(S::of_f64)
                            .map_err(|_| Error::Data(format!("line {}: bad weight '{}'", lineno + 1, cell)))
                    })
                    .collect::<Result<_>>()?;
                rows.push(row);
            }
            let v = rows.len();
            if rows.iter().any(|r| r.len() != v) {
                return Err(Error::Data(format!("dense adjacency is not square ({} rows)", v)));
            }
            Tensor::from_vec(vec![v, v], rows.into_iter().flatten().collect())
        }
        "edges" => {
            let mut edges: Vec<(usize, usize, S)> = Vec::new();
            let mut max_id = 0usize;
            for (lineno, line) in lines {
                let parts: Vec<&str> = line.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Data(format!("line {}: expected 'src,dst,weight'", lineno + 1)));
                }
                let src: usize = parts[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad src '{}'", lineno + 1, parts[0])))?;
                let dst: usize = parts[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad dst '{}'", lineno + 1, parts[1])))?;
                let w: f64 = parts[2]
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad weight '{}'", lineno + 1, parts[2])))?;
                max_id = max_id.max(src).max(dst);
                edges.push((src, dst, S::of_f64(w)));
            }
            if edges.is_empty() {
                return Err(Error::Data("edge list is empty".to_string()));
            }
            let v = max_id + 1;
            let mut data = vec![S::zero(); v * v];
            for (src, dst, w) in edges {
                data[src * v + dst] = w;
            }
            Tensor::from_vec(vec![v, v], data)
        }
        other => Err(Error::Data(format!("unknown adjacency header '{}', expected 'dense' or 'edges'", other))),
    }
}

/// Ring adjacency over `v` nodes with unit weights, used by the synthetic
/// generator.
pub fn ring_adjacency<S: Scalar>(v: usize) -> Result<Tensor<S>> {
    if v < 2 {
        return Err(Error::Invalid(format!("ring needs at least 2 nodes, got {}", v)));
    }
    let mut data = vec![S::zero(); v * v];
    for i in 0..v {
        data[i * v + (i + 1) % v] = S::one();
        data[i * v + (i + v - 1) % v] = S::one();
    }
    Tensor::from_vec(vec![v, v], data)
}
