//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use isrf_core::data::InteractionDataset;
use isrf_core::tensor::Mat;
use isrf_core::train::{SemanticViews, TrainData};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- graphs

/// Dense 0/1 adjacency from directed pairs, mirrored when `symmetric`.
pub fn dense_adjacency(n: usize, edges: &[(usize, usize)], symmetric: bool) -> Mat {
    let mut a = Mat::zeros((n, n));
    for &(i, j) in edges {
        a[[i, j]] = 1.0;
        if symmetric {
            a[[j, i]] = 1.0;
        }
    }
    a
}

/// `D_out^{-1/2} A D_in^{-1/2}`; for a symmetric `A` this is the usual
/// symmetric normalization. Zero-degree rows and columns stay zero.
pub fn dense_normalized(a: &Mat) -> Mat {
    let n = a.nrows();
    let out: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let inn: Vec<f64> = (0..n).map(|j| a.column(j).sum()).collect();
    Mat::from_shape_fn((n, n), |(i, j)| {
        if a[[i, j]] == 0.0 {
            0.0
        } else {
            a[[i, j]] / (out[i] * inn[j]).sqrt()
        }
    })
}

/// `(1/(L+1)) sum_l A^l E0` with explicit matrix powers.
pub fn dense_propagate(a_hat: &Mat, e0: &Mat, layers: usize) -> Mat {
    let n = a_hat.nrows();
    let mut power = Mat::eye(n);
    let mut acc = Mat::zeros(e0.raw_dim());
    for _ in 0..=layers {
        acc += &power.dot(e0);
        power = power.dot(a_hat);
    }
    acc / (layers + 1) as f64
}

pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    edges
}

// ---------------------------------------------------------------- top-k

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Full sort of every other user by (similarity desc, index asc), first `k`.
pub fn brute_force_top_k(s: &Mat, k: usize) -> Vec<Vec<usize>> {
    let n = s.nrows();
    (0..n)
        .map(|i| {
            let mut all: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, cosine(s.row(i), s.row(j))))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.into_iter().take(k).map(|(j, _)| j).collect()
        })
        .collect()
}

// ---------------------------------------------------------------- eigen

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns), unsorted.
pub fn jacobi_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Mat::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[[i, i]]).collect(), v)
}

/// Top `d_m` principal directions (rows) with the largest-magnitude entry
/// made positive, plus the sample-covariance eigenvalues.
pub fn pca_oracle(x: &Mat, d_m: usize) -> (Array1<f64>, Mat, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let c = x - &mean;
    let cov = c.t().dot(&c) / (n - 1.0);
    let (vals, vecs) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    let mut comps = Mat::zeros((d_m, x.ncols()));
    for (r, &i) in order.iter().take(d_m).enumerate() {
        let mut col = vecs.column(i).to_owned();
        let mut best = 0;
        for (j, val) in col.iter().enumerate() {
            if val.abs() > col[best].abs() {
                best = j;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|t| -t);
        }
        comps.row_mut(r).assign(&col);
    }
    (mean, comps, order.iter().take(d_m).map(|&i| vals[i]).collect())
}

// ---------------------------------------------------------------- finite differences

pub const FD_EPS: f64 = 1e-4;
/// Entries whose analytic and numeric values are both below this are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error over `n` coordinates. `eval(i, delta)` returns the
/// loss with coordinate `i` shifted by `delta`.
pub fn fd_worst(analytic: &[f64], mut eval: impl FnMut(usize, f64) -> f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, &a) in analytic.iter().enumerate() {
        let num = (eval(i, FD_EPS) - eval(i, -FD_EPS)) / (2.0 * FD_EPS);
        let e = rel_err(a, num);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    worst
}

// ---------------------------------------------------------------- fixtures

/// Two taste groups over `n_items` items; user `u` prefers items with the
/// parity of `u`. Semantic rows are noisy one-hot group vectors.
pub fn toy_data(n_users: usize, n_items: usize, seq_len: usize, seed: u64) -> TrainData {
    let mut r = rng(seed);
    let sequences: Vec<Vec<usize>> = (0..n_users)
        .map(|u| {
            (0..seq_len)
                .map(|_| {
                    let mut v = r.gen_range(0..n_items);
                    if v % 2 != u % 2 {
                        v = (v + 1) % n_items;
                    }
                    v
                })
                .collect()
        })
        .collect();
    let dataset = InteractionDataset::from_sequences(sequences, n_items).unwrap();
    let splits = isrf_core::data::split_leave_one_out(&dataset).unwrap();
    let sem = |rows: usize, group: &dyn Fn(usize) -> usize, r: &mut ChaCha8Rng| {
        Mat::from_shape_fn((rows, 8), |(i, j)| {
            let base = if j == group(i) { 1.0 } else { 0.0 };
            base + 0.3 * r.gen_range(-1.0..1.0)
        })
    };
    let users = sem(n_users, &|u| u % 2, &mut r);
    let items = sem(n_items, &|v| v % 2, &mut r);
    TrainData {
        dataset,
        splits,
        users: SemanticViews {
            positive: Some(users.mapv(|x| x * 1.1)),
            negative: Some(users.mapv(|x| -x)),
            fused: users,
        },
        items: SemanticViews {
            positive: Some(items.mapv(|x| x + 0.05)),
            negative: Some(items.mapv(|x| 0.5 - x)),
            fused: items,
        },
    }
}

/// Small model settings for fast tests.
pub fn toy_config(task: isrf_core::genrec::Task) -> isrf_core::train::TrainConfig {
    isrf_core::train::TrainConfig {
        task,
        d: 8,
        d_m: 4,
        n_prompts: 2,
        k: 3,
        batch_size: 8,
        learning_rate: 0.01,
        max_epochs: 3,
        eval_beam: 10,
        n_neg: 5,
        max_history: 4,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- statistics

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Spearman correlation and its one-sided p-value for a negative trend
/// (t approximation with n - 2 degrees of freedom).
pub fn spearman_decreasing(x: &[f64], y: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let rho = pearson(&ranks(x), &ranks(y));
    let n = x.len() as f64;
    if rho <= -1.0 {
        return (rho, 0.0);
    }
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).unwrap();
    (rho, dist.cdf(t))
}
