//! Normalized user-item graph and embedding propagation.
//!
//! The bipartite interaction graph is stored once per training run as
//! a CSR matrix holding `D^-1/2 A D^-1/2`, where `A` is the symmetric
//! adjacency over `|U| + |I|` nodes (users first) and `D` its degree
//! matrix. There are no self-loops: a propagation step is exactly one
//! sparse product `H' = A_norm * H`, and nodes that lost all their
//! edges to the split produce all-zero rows.

use crate::error::{Error, Result};
use crate::mat::{axpy, norm2, Mat};
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Stored nonzeros (twice the edge count).
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.row_ptr[node + 1] - self.row_ptr[node]
    }

    /// One propagation step `A_norm * h`.
    pub fn propagate(&self, h: &Mat) -> Result<Mat> {
        let n = self.num_nodes();
        if h.rows() != n {
            return Err(Error::DimensionMismatch {
                op: "propagate",
                detail: format!("{} embedding rows for {} nodes", h.rows(), n),
            });
        }
        let d = h.cols();
        let mut out = Mat::zeros(n, d);
        let body = |(r, out_row): (usize, &mut [f64])| {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                axpy(self.values[k], h.row(self.col_idx[k] as usize), out_row);
            }
        };
        if n * d >= 1 << 14 {
            out.data_mut().par_chunks_mut(d).enumerate().for_each(body);
        } else {
            out.data_mut().chunks_mut(d).enumerate().for_each(body);
        }
        Ok(out)
    }

    /// Dense copy, for small-graph inspection and tests.
    pub fn to_dense(&self) -> Mat {
        let n = self.num_nodes();
        let mut m = Mat::zeros(n, n);
        for r in 0..n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m.set(r, self.col_idx[k] as usize, self.values[k]);
            }
        }
        m
    }

    /// Spectral-radius estimate by power iteration on the norm ratio
    /// `|A x_k| / |x_k|`, which converges to `max |lambda|` even when
    /// the bipartite spectrum is symmetric around zero.
    pub fn spectral_radius_estimate(&self, iters: usize, seed: u64) -> f64 {
        use rand::Rng;
        let n = self.num_nodes();
        let mut rng = crate::rng::stream(seed, "power-iteration", &[]);
        let mut x = Mat::zeros(n, 1);
        for r in 0..n {
            x.set(r, 0, rng.random_range(-1.0..1.0));
        }
        let mut ratio = 0.0;
        for _ in 0..iters {
            let nx = norm2(x.data());
            if nx == 0.0 {
                return 0.0;
            }
            let y = self.propagate(&x).expect("shape fixed");
            ratio = norm2(y.data()) / nx;
            x = y;
            let ny = norm2(x.data());
            if ny > 0.0 {
                x.scale(1.0 / ny);
            }
        }
        ratio
    }
}

/// Builds the symmetrically normalized adjacency from a (user, item)
/// edge list. Duplicate edges are collapsed; indices must fit the
/// given counts. Degree-zero nodes simply get empty rows.
pub fn build_adjacency(
    num_users: usize,
    num_items: usize,
    edges: &[(u32, u32)],
) -> Result<NormalizedAdjacency> {
    let n = num_users + num_items;
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for &(u, i) in edges {
        if (u as usize) >= num_users || (i as usize) >= num_items {
            return Err(Error::EdgeOutOfRange { user: u, item: i, num_users, num_items });
        }
        let item_node = num_users as u32 + i;
        neighbors[u as usize].push(item_node);
        neighbors[item_node as usize].push(u);
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    let degrees: Vec<usize> = neighbors.iter().map(Vec::len).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (node, list) in neighbors.iter().enumerate() {
        let d_r = degrees[node] as f64;
        for &c in list {
            let d_c = degrees[c as usize] as f64;
            col_idx.push(c);
            values.push(1.0 / (d_r * d_c).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    Ok(NormalizedAdjacency { num_users, num_items, row_ptr, col_idx, values })
}
