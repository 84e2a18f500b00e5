//! Symmetric KNN graph over all instances and its unnormalized Laplacian.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Result, ZslError};

const ROW_BLOCK: usize = 256;

/// Binary, symmetric, zero-diagonal adjacency stored as sorted neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    /// Builds a graph from an explicit undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(ZslError::Param(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(ZslError::Param(format!("self loop on node {i}")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(KnnGraph { k: 0, neighbors })
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbour count used at construction (0 for hand-built graphs).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.neighbors[i].len() as f64
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Undirected edges with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn adjacency(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut w = Array2::zeros((n, n));
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                w[[i, j]] = 1.0;
            }
        }
        w
    }

    /// Dense `L = D - W`.
    pub fn laplacian(&self) -> Array2<f64> {
        let mut l = -self.adjacency();
        for i in 0..self.num_nodes() {
            l[[i, i]] = self.degree(i);
        }
        l
    }

    /// `L · X` for a row-per-node matrix `X` (n x m), without forming `L`.
    pub fn laplacian_apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.num_nodes();
        if x.nrows() != n {
            return Err(ZslError::Dimension(format!("laplacian_apply: {} rows for {n} nodes", x.nrows())));
        }
        let mut out = Array2::zeros(x.raw_dim());
        out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut row)| {
            row.assign(&x.row(i));
            row *= self.degree(i);
            for &j in &self.neighbors[i] {
                row -= &x.row(j);
            }
        });
        Ok(out)
    }

    /// Writes `i j` per undirected edge.
    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| ZslError::io(path, e))?);
        for (i, j) in self.edges() {
            writeln!(w, "{i} {j}").map_err(|e| ZslError::io(path, e))?;
        }
        w.flush().map_err(|e| ZslError::io(path, e))
    }
}

/// Connects every row to its `k` most similar rows under the linear kernel
/// (self excluded, ties to the lower index), then symmetrizes by union.
pub fn build_knn_graph(features: ArrayView2<f64>, k: usize) -> Result<KnnGraph> {
    let n = features.nrows();
    if k == 0 || k >= n {
        return Err(ZslError::Param(format!("graph neighbour count {k} must be in 1..{n} for {n} instances")));
    }
    let starts: Vec<usize> = (0..n).step_by(ROW_BLOCK).collect();
    let directed: Vec<Vec<usize>> = starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + ROW_BLOCK).min(n);
            let sims = features.slice(s![start..end, ..]).dot(&features.t());
            (start..end)
                .map(|i| top_k(sims.row(i - start).as_slice().expect("row-major block"), i, k))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut neighbors = vec![Vec::with_capacity(2 * k); n];
    for (i, list) in directed.iter().enumerate() {
        for &j in list {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    Ok(KnnGraph { k, neighbors })
}

fn top_k(sims: &[f64], own: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).filter(|&j| j != own).collect();
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// `Tr(Fᵀ F L)` for projections `F` (d_z x n, column per node), computed as
/// `Σ_i d_i ‖f_i‖² − Σ_{i,j} w_ij f_iᵀ f_j`.
pub fn laplacian_quadratic(projections: ArrayView2<f64>, graph: &KnnGraph) -> Result<f64> {
    let n = graph.num_nodes();
    if projections.ncols() != n {
        return Err(ZslError::Dimension(format!(
            "laplacian_quadratic: {} projection columns for {n} nodes",
            projections.ncols()
        )));
    }
    let total = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = projections.column(i);
            let mut acc = graph.degree(i) * fi.dot(&fi);
            for &j in graph.neighbors(i) {
                acc -= fi.dot(&projections.column(j));
            }
            acc
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    Ok(total)
}

/// `Tr(Fᵀ F L)` against an explicit dense Laplacian.
pub fn laplacian_quadratic_dense(projections: ArrayView2<f64>, laplacian: ArrayView2<f64>) -> Result<f64> {
    let n = laplacian.nrows();
    if laplacian.ncols() != n || projections.ncols() != n {
        return Err(ZslError::Dimension(format!(
            "laplacian_quadratic: projections {:?} vs laplacian {:?}",
            projections.dim(),
            laplacian.dim()
        )));
    }
    let gram = projections.t().dot(&projections);
    Ok((&gram * &laplacian).sum())
}
