mod common;

use common::gradcheck::{adapter_fd, random_adapter};
use common::*;
use isrf_core::embed::{adapter_forward, pca_fit, AdapterActivation, AdapterParams};
use isrf_core::tensor::{EmbeddingMatrix, Mat, Space};
use proptest::prelude::*;
use rand::Rng;

fn raw(m: &Mat) -> EmbeddingMatrix {
    EmbeddingMatrix::new(m.clone(), Space::Raw)
}

#[test]
fn thirty_by_sixteen_matches_jacobi_oracle() {
    let x = random_mat(&mut rng(3016), 30, 16);
    let model = pca_fit(&raw(&x), 6).unwrap();
    let (mean, comps, vals) = pca_oracle(&x, 6);
    assert!(model.mean.iter().zip(&mean).all(|(a, b)| (a - b).abs() <= 1e-12));
    assert!(max_abs(&model.components, &comps) <= 1e-8);
    for (a, b) in model.explained_variance.iter().zip(&vals) {
        assert!((a - b).abs() <= 1e-8);
    }
    let proj = model.transform(&raw(&x)).unwrap().values;
    let oracle_proj = (&x - &mean).dot(&comps.t());
    assert!(max_abs(&proj, &oracle_proj) <= 1e-8);
    assert!(max_abs(&proj.t().dot(&proj), &oracle_proj.t().dot(&oracle_proj)) <= 1e-8);
}

#[test]
fn twenty_random_matrices_match_oracle() {
    let mut r = rng(20);
    for case in 0..20 {
        let n = r.gen_range(4..40);
        let dim = r.gen_range(2..12);
        let d_m = r.gen_range(1..=dim.min(n));
        let x = random_mat(&mut r, n, dim);
        let model = pca_fit(&raw(&x), d_m).unwrap();
        let (mean, comps, _) = pca_oracle(&x, d_m);
        // the trailing eigenvalue of a rank-deficient case is not unique
        let well_posed = n > dim || d_m < n - 1;
        if well_posed {
            assert!(max_abs(&model.components, &comps) <= 1e-8, "case {case}");
            let proj = model.transform(&raw(&x)).unwrap().values;
            assert!(max_abs(&proj, &(&x - &mean).dot(&comps.t())) <= 1e-8, "case {case}");
        }
    }
}

#[test]
fn in_subspace_data_roundtrips() {
    let mut r = rng(7);
    let basis = random_mat(&mut r, 3, 10);
    let coeffs = random_mat(&mut r, 25, 3);
    let x = coeffs.dot(&basis) + 0.5;
    let model = pca_fit(&raw(&x), 3).unwrap();
    let back = model
        .inverse_transform(&model.transform(&raw(&x)).unwrap().values)
        .unwrap();
    assert!(max_abs(&back, &x) <= 1e-8);
}

#[test]
fn adapter_gradients_match_finite_differences() {
    for seed in 0..5 {
        assert!(adapter_fd(AdapterActivation::None, seed) < 1e-4);
        assert!(adapter_fd(AdapterActivation::Relu, 100 + seed) < 1e-4);
    }
}

#[test]
fn hand_set_two_by_two() {
    let p = AdapterParams {
        w1: ndarray::array![[1.0, 1.0], [1.0, 0.0]],
        b1: ndarray::array![0.0, 1.0],
        w2: ndarray::array![[1.0, 2.0], [0.0, 1.0]],
        b2: ndarray::array![1.0, 0.0],
        activation: AdapterActivation::None,
    };
    // hidden = (2, 2); output = (2 + 4 + 1, 2)
    let out = adapter_forward(&ndarray::array![[1.0, 1.0]], &p).unwrap();
    assert_eq!(out, ndarray::array![[7.0, 2.0]]);
}

proptest! {
    #[test]
    fn components_are_orthonormal(seed in any::<u64>(), n in 3usize..20, dim in 2usize..8) {
        let x = random_mat(&mut rng(seed), n, dim);
        let d_m = dim.min(n - 1);
        let model = pca_fit(&raw(&x), d_m).unwrap();
        let gram = model.components.dot(&model.components.t());
        prop_assert!(max_abs(&gram, &Mat::eye(d_m)) <= 1e-10);
        for w in model.explained_variance.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
        let proj = model.transform(&raw(&x)).unwrap().values;
        let col_means = proj.mean_axis(ndarray::Axis(0)).unwrap();
        prop_assert!(col_means.iter().all(|m| m.abs() <= 1e-10));
    }

    #[test]
    fn adapter_is_affine_without_activation(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let p = random_adapter(&mut r, 4, 6, AdapterActivation::None);
        let x = random_mat(&mut r, 3, 4);
        let y = random_mat(&mut r, 3, 4);
        let f = |m: &Mat| adapter_forward(m, &p).unwrap();
        let lhs = f(&(&x * a + &y * (1.0 - a)));
        let rhs = f(&x) * a + f(&y) * (1.0 - a);
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-12);
    }
}
