//! Normalized sparse graphs and LightGCN-style propagation.
//!
//! Two graphs share one kernel: the bipartite user-item graph built from the
//! train split (users first, then items) and the user-user relation graph
//! built from the top-k cosine neighbours of each user's semantic embedding.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, Splits};
use crate::error::{Error, Result};
use crate::tensor::{read_header, Mat};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationSymmetrize {
    /// Edge union, then `D^-1/2 R D^-1/2`.
    #[default]
    Union,
    /// Directed picks, weight `1/sqrt(out_deg(i) * in_deg(j))`.
    None,
}

/// Row-compressed adjacency with per-edge normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGraph {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Out-degree (equal to in-degree for symmetric graphs).
    pub degree: Vec<usize>,
    pub symmetric: bool,
}

impl NormalizedGraph {
    /// Builds a graph from directed `(i, j)` pairs. With `symmetric` every pair
    /// is mirrored; duplicates and self-pairs collapse to one entry.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>, symmetric: bool) -> Result<Self> {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::IndexOutOfRange {
                    index: i.max(j),
                    len: n,
                });
            }
            adj[i].insert(j);
            if symmetric {
                adj[j].insert(i);
            }
        }
        let degree: Vec<usize> = adj.iter().map(BTreeSet::len).collect();
        let mut in_degree = vec![0usize; n];
        for row in &adj {
            for &j in row {
                in_degree[j] += 1;
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for (i, row) in adj.iter().enumerate() {
            for &j in row {
                indices.push(j);
                weights.push(1.0 / ((degree[i] * in_degree[j]) as f64).sqrt());
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            n,
            indptr,
            indices,
            weights,
            degree,
            symmetric,
        })
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn edge_weights(&self, i: usize) -> &[f64] {
        &self.weights[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let nb = self.neighbors(i);
        nb.binary_search(&j).map_or(0.0, |p| self.edge_weights(i)[p])
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros((self.n, self.n));
        for i in 0..self.n {
            for (&j, &w) in self.neighbors(i).iter().zip(self.edge_weights(i)) {
                m[[i, j]] = w;
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        if self.symmetric {
            return self.clone();
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (&j, &w) in self.neighbors(i).iter().zip(self.edge_weights(i)) {
                rows[j].push((i, w));
            }
        }
        let mut indptr = vec![0];
        let mut indices = Vec::with_capacity(self.nnz());
        let mut weights = Vec::with_capacity(self.nnz());
        for row in &rows {
            for &(j, w) in row {
                indices.push(j);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        Self {
            n: self.n,
            indptr,
            indices,
            weights,
            degree: rows.iter().map(Vec::len).collect(),
            symmetric: false,
        }
    }

    /// `A_hat * x`, rows computed in parallel, each row summed in CSR order.
    pub fn spmm(&self, x: &Mat) -> Result<Mat> {
        if x.nrows() != self.n {
            return Err(Error::shape(format!(
                "graph has {} nodes, matrix has {} rows",
                self.n,
                x.nrows()
            )));
        }
        let d = x.ncols();
        let mut out = Array2::zeros((self.n, d));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                for (&j, &w) in self.neighbors(i).iter().zip(self.edge_weights(i)) {
                    row.scaled_add(w, &x.row(j));
                }
            });
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// JSON header, then `indptr` (u64 x n+1), `indices` (u32 x nnz) and
    /// `weights` (f64 x nnz), all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = GraphHeader {
            n: self.n,
            nnz: self.nnz(),
            symmetrized: self.symmetric,
            indptr_dtype: "u64".into(),
            index_dtype: "u32".into(),
            weight_dtype: "f64".into(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for &p in &self.indptr {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &j in &self.indices {
            let j = u32::try_from(j).map_err(|_| Error::Format("node index exceeds u32".into()))?;
            w.write_all(&j.to_le_bytes())?;
        }
        for &x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let header: GraphHeader = read_header(r)?;
        let mut read_vec = |count: usize, width: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; count * width];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("truncated graph payload: {e}")))?;
            Ok(buf)
        };
        let indptr: Vec<usize> = read_vec(header.n + 1, 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let indices: Vec<usize> = read_vec(header.nnz, 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let weights: Vec<f64> = read_vec(header.nnz, 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if indptr.last() != Some(&header.nnz) || indices.iter().any(|&j| j >= header.n) {
            return Err(Error::Format("inconsistent graph structure".into()));
        }
        let degree = indptr.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self {
            n: header.n,
            indptr,
            indices,
            weights,
            degree,
            symmetric: header.symmetrized,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphHeader {
    n: usize,
    nnz: usize,
    symmetrized: bool,
    indptr_dtype: String,
    index_dtype: String,
    weight_dtype: String,
}

/// Bipartite graph over `n_users + n_items` nodes from the train split; one
/// undirected edge per distinct user-item pair.
pub fn build_interaction_graph(ds: &InteractionDataset, splits: &Splits) -> Result<NormalizedGraph> {
    let n_users = ds.n_users();
    let edges = splits
        .users
        .iter()
        .flat_map(|s| s.train.iter().map(move |&v| (s.user, n_users + v)));
    NormalizedGraph::from_edges(n_users + ds.n_items(), edges, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationResult {
    /// `E^0 .. E^L`.
    pub layers: Vec<Mat>,
    /// Mean of the layers.
    pub averaged: Mat,
}

/// `E^{l+1} = A_hat E^l`, averaged over `l = 0..=L`.
pub fn lightgcn_propagate(g: &NormalizedGraph, e0: &Mat, layers: usize) -> Result<PropagationResult> {
    if e0.nrows() != g.n {
        return Err(Error::shape(format!(
            "graph has {} nodes, embeddings have {} rows",
            g.n,
            e0.nrows()
        )));
    }
    let mut out = Vec::with_capacity(layers + 1);
    out.push(e0.clone());
    for l in 0..layers {
        let next = g.spmm(&out[l])?;
        out.push(next);
    }
    let mut avg = Mat::zeros(e0.raw_dim());
    for e in &out {
        avg += e;
    }
    avg /= (layers + 1) as f64;
    Ok(PropagationResult {
        layers: out,
        averaged: avg,
    })
}

/// Same kernel on the user relation graph.
pub fn propagate_user_graph(g: &NormalizedGraph, h0: &Mat, layers: usize) -> Result<PropagationResult> {
    lightgcn_propagate(g, h0, layers)
}

/// Gradient of the averaged output with respect to `E^0`:
/// `(1/(L+1)) sum_l (A_hat^T)^l G`.
pub fn propagate_backward(g: &NormalizedGraph, upstream: &Mat, layers: usize) -> Result<Mat> {
    let gt;
    let kernel = if g.symmetric {
        g
    } else {
        gt = g.transpose();
        &gt
    };
    Ok(lightgcn_propagate(kernel, upstream, layers)?.averaged)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelationReport {
    /// Directed top-k picks per user, most similar first.
    pub picks: Vec<Vec<usize>>,
    /// Users whose embedding had zero norm (similarity 0 to everyone).
    pub zero_norm_rows: Vec<usize>,
}

/// Unit-normalized rows; zero rows stay zero.
pub(crate) fn normalize_rows(m: &Mat) -> (Mat, Vec<usize>) {
    let mut out = m.clone();
    let mut zero = Vec::new();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            zero.push(i);
        } else {
            row /= norm;
        }
    }
    (out, zero)
}

fn by_similarity(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

fn top_k_for(unit: &Mat, i: usize, k: usize) -> Vec<usize> {
    let query: ArrayView1<f64> = unit.row(i);
    let mut sims: Vec<(usize, f64)> = (0..unit.nrows())
        .filter(|&j| j != i)
        .map(|j| (j, query.dot(&unit.row(j))))
        .collect();
    if k < sims.len() && k > 0 {
        sims.select_nth_unstable_by(k - 1, by_similarity);
        sims.truncate(k);
    }
    sims.sort_by(by_similarity);
    sims.truncate(k);
    sims.into_iter().map(|(j, _)| j).collect()
}

/// Exact top-k cosine neighbours per user (self excluded, ties to the
/// smaller index), turned into a normalized graph.
pub fn build_user_relation(s_u: &Mat, k: usize, mode: RelationSymmetrize) -> Result<(NormalizedGraph, RelationReport)> {
    let n = s_u.nrows();
    if n > 0 && k >= n {
        return Err(Error::invalid(format!("k = {k} must be smaller than the {n} users")));
    }
    let (unit, zero_norm_rows) = normalize_rows(s_u);
    let picks: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| top_k_for(&unit, i, k)).collect();
    let edges = picks
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.iter().map(move |&j| (i, j)));
    let graph = NormalizedGraph::from_edges(n, edges, mode == RelationSymmetrize::Union)?;
    Ok((graph, RelationReport { picks, zero_norm_rows }))
}
