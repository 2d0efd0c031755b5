//! PCA reduction of raw item semantics and the adapter into recommendation space.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, EmbeddingMatrix, Mat, Sections, Space};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `d_m x d_llm`, orthonormal rows.
    pub components: Mat,
    /// Nonincreasing.
    pub explained_variance: Array1<f64>,
}

/// Fits PCA through the eigendecomposition of the sample covariance.
///
/// Each component is sign-flipped so its largest-magnitude entry is positive
/// (first such entry on exact ties).
pub fn pca_fit(s: &EmbeddingMatrix, d_m: usize) -> Result<PcaModel> {
    let (n, dim) = s.values.dim();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d_m == 0 || d_m > n.min(dim) {
        return Err(Error::invalid(format!(
            "d_m = {d_m} must be in 1..={} for a {n}x{dim} matrix",
            n.min(dim)
        )));
    }
    let mean = s.values.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &s.values - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);

    let cov = DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite covariance")
            .then(a.cmp(&b))
    });

    let mut components = Array2::zeros((d_m, dim));
    let mut variance = Array1::zeros(d_m);
    for (row, &k) in order.iter().take(d_m).enumerate() {
        let v = eig.eigenvectors.column(k);
        let sign = sign_of_largest(v.iter().copied());
        for j in 0..dim {
            components[[row, j]] = sign * v[j];
        }
        variance[row] = eig.eigenvalues[k];
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: variance,
    })
}

pub(crate) fn sign_of_largest(v: impl Iterator<Item = f64>) -> f64 {
    let mut best = 0.0f64;
    for x in v {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl PcaModel {
    pub fn d_llm(&self) -> usize {
        self.components.ncols()
    }

    pub fn d_m(&self) -> usize {
        self.components.nrows()
    }

    /// Projects rows onto the components; the result is frozen.
    pub fn transform(&self, s: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if s.cols() != self.d_llm() {
            return Err(Error::shape(format!(
                "PCA expects {} columns, got {}",
                self.d_llm(),
                s.cols()
            )));
        }
        let centered = &s.values - &self.mean;
        Ok(EmbeddingMatrix {
            values: centered.dot(&self.components.t()),
            space: Space::Reduced,
            trainable: false,
        })
    }

    pub fn inverse_transform(&self, reduced: &Mat) -> Result<Mat> {
        if reduced.ncols() != self.d_m() {
            return Err(Error::shape(format!(
                "expected {} reduced columns, got {}",
                self.d_m(),
                reduced.ncols()
            )));
        }
        Ok(reduced.dot(&self.components) + &self.mean)
    }

    pub fn to_sections(&self) -> Sections {
        Sections {
            meta: serde_json::json!({ "kind": "pca" }),
            tensors: vec![
                ("mean".into(), self.mean.clone().insert_axis(Axis(0))),
                ("components".into(), self.components.clone()),
                (
                    "explained_variance".into(),
                    self.explained_variance.clone().insert_axis(Axis(0)),
                ),
            ],
        }
    }

    pub fn from_sections(s: &Sections) -> Result<Self> {
        let row = |name: &str| -> Result<Array1<f64>> {
            let m = s.get(name)?;
            if m.nrows() != 1 {
                return Err(Error::Format(format!("section `{name}` must be one row")));
            }
            Ok(m.row(0).to_owned())
        };
        Ok(Self {
            mean: row("mean")?,
            components: s.get("components")?.clone(),
            explained_variance: row("explained_variance")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_sections().save(path, Dtype::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_sections(&Sections::load(path)?)
    }
}

pub fn pca_transform(model: &PcaModel, s: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    model.transform(s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterActivation {
    #[default]
    None,
    Relu,
}

/// Two affine maps `d_m -> (d + d_m)/2 -> d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w1: Mat,
    pub b1: Array1<f64>,
    pub w2: Mat,
    pub b2: Array1<f64>,
    pub activation: AdapterActivation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub w1: Mat,
    pub b1: Array1<f64>,
    pub w2: Mat,
    pub b2: Array1<f64>,
}

pub fn adapter_hidden_width(d_m: usize, d: usize) -> Result<usize> {
    if (d + d_m) % 2 != 0 {
        return Err(Error::invalid(format!("d + d_m must be even (d={d}, d_m={d_m})")));
    }
    Ok((d + d_m) / 2)
}

impl AdapterParams {
    pub fn zeros(d_m: usize, d: usize) -> Result<Self> {
        let h = adapter_hidden_width(d_m, d)?;
        Ok(Self {
            w1: Mat::zeros((h, d_m)),
            b1: Array1::zeros(h),
            w2: Mat::zeros((d, h)),
            b2: Array1::zeros(d),
            activation: AdapterActivation::None,
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(d_m: usize, d: usize, seed: u64) -> Result<Self> {
        let h = adapter_hidden_width(d_m, d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
        };
        let w1 = uniform(h, d_m, d_m);
        let b1 = uniform(1, h, d_m).row(0).to_owned();
        let w2 = uniform(d, h, h);
        let b2 = uniform(1, d, h).row(0).to_owned();
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation: AdapterActivation::None,
        })
    }

    pub fn d_m(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d(&self) -> usize {
        self.w2.nrows()
    }

    fn hidden(&self, s: &Mat) -> Mat {
        let mut hid = s.dot(&self.w1.t()) + &self.b1;
        if self.activation == AdapterActivation::Relu {
            hid.mapv_inplace(|x| x.max(0.0));
        }
        hid
    }

    fn check_input(&self, s: &Mat) -> Result<()> {
        if s.ncols() != self.d_m() {
            return Err(Error::shape(format!(
                "adapter expects {} input columns, got {}",
                self.d_m(),
                s.ncols()
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> AdapterGrads {
        AdapterGrads {
            w1: Mat::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Mat::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }
}

/// `E_v = W2 (W1 s + b1) + b2` applied to every row of `s`.
pub fn adapter_forward(s: &Mat, params: &AdapterParams) -> Result<Mat> {
    params.check_input(s)?;
    Ok(params.hidden(s).dot(&params.w2.t()) + &params.b2)
}

/// Parameter gradients given `upstream = dL/dE_v`. The input `s` is frozen
/// and receives nothing.
pub fn adapter_gradient(s: &Mat, params: &AdapterParams, upstream: &Mat) -> Result<AdapterGrads> {
    params.check_input(s)?;
    if upstream.dim() != (s.nrows(), params.d()) {
        return Err(Error::shape(format!(
            "upstream {:?} does not match output ({}, {})",
            upstream.dim(),
            s.nrows(),
            params.d()
        )));
    }
    let hid = params.hidden(s);
    let w2 = upstream.t().dot(&hid);
    let b2 = upstream.sum_axis(Axis(0));
    let mut d_hid = upstream.dot(&params.w2);
    if params.activation == AdapterActivation::Relu {
        d_hid.zip_mut_with(&hid, |g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
    }
    let w1 = d_hid.t().dot(s);
    let b1 = d_hid.sum_axis(Axis(0));
    Ok(AdapterGrads { w1, b1, w2, b2 })
}
