//! Temperature-scaled cosine kernel and the two contrastive alignment losses.

use ndarray::{Array1, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Norm floor applied by the batch losses before dividing.
pub const NORM_FLOOR: f64 = 1e-12;

pub const DEFAULT_TAU: f64 = 0.2;

/// `exp(cos(a, b) / tau)`.
pub fn f_c(a: ArrayView1<f64>, b: ArrayView1<f64>, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((a.dot(&b) / (na * nb) / tau).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillDenominator {
    /// Sum of the B matched pair scores.
    #[default]
    Diagonal,
    /// InfoNCE: student `u` against every teacher in the batch.
    Cross,
}

#[derive(Clone, Debug)]
pub struct AlignBatch<'a> {
    /// `h_u` rows.
    pub teacher: &'a Mat,
    /// `e~_u` (distillation) or `e_u` (sequential) rows.
    pub student: &'a Mat,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_teacher: Mat,
    pub grad_student: Mat,
    /// Rows that hit the norm floor.
    pub floored_rows: usize,
}

struct RowNorms {
    norms: Vec<f64>,
    floored: Vec<bool>,
}

impl RowNorms {
    fn of(m: &Mat) -> Self {
        let mut norms = Vec::with_capacity(m.nrows());
        let mut floored = Vec::with_capacity(m.nrows());
        for row in m.rows() {
            let n = row.dot(&row).sqrt();
            floored.push(n < NORM_FLOOR);
            norms.push(n.max(NORM_FLOOR));
        }
        Self { norms, floored }
    }

    fn count_floored(&self) -> usize {
        self.floored.iter().filter(|&&f| f).count()
    }
}

impl AlignBatch<'_> {
    fn validate(&self) -> Result<()> {
        if self.teacher.nrows() == 0 {
            return Err(Error::Empty("alignment batch"));
        }
        if self.teacher.dim() != self.student.dim() {
            return Err(Error::shape(format!(
                "teacher {:?} vs student {:?}",
                self.teacher.dim(),
                self.student.dim()
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Cosine matrix `C[i][j] = cos(teacher_i, student_j)` with floored norms.
fn cosine_matrix(t: &Mat, s: &Mat, tn: &RowNorms, sn: &RowNorms) -> Mat {
    let mut c = t.dot(&s.t());
    for ((i, j), x) in c.indexed_iter_mut() {
        *x /= tn.norms[i] * sn.norms[j];
    }
    c
}

/// Adds `coef * d cos(x, y) / dx` into `out`, where `cos` was computed with
/// the floored norms. A floored norm is treated as a constant.
fn add_cos_grad(
    out: &mut ndarray::ArrayViewMut1<f64>,
    coef: f64,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    nx: f64,
    ny: f64,
    x_floored: bool,
    cos: f64,
) {
    if coef == 0.0 {
        return;
    }
    out.scaled_add(coef / (nx * ny), &y);
    if !x_floored {
        out.scaled_add(-coef * cos / (nx * nx), &x);
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs.iter().copied());
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Distillation loss. The teacher side is under stop-gradient, so
/// `grad_teacher` is always all zeros.
pub fn loss_distill(batch: &AlignBatch<'_>, denominator: DistillDenominator) -> Result<LossOutput> {
    batch.validate()?;
    let b = batch.teacher.nrows();
    let tn = RowNorms::of(batch.teacher);
    let sn = RowNorms::of(batch.student);
    let cos = cosine_matrix(batch.teacher, batch.student, &tn, &sn);
    let tau = batch.tau;
    let inv_b = 1.0 / b as f64;
    let mut grad_s = Mat::zeros(batch.student.raw_dim());

    // dscore[t][s] = dL / d(cos[t][s] / tau)
    let mut dscore = Mat::zeros((b, b));
    let loss = match denominator {
        DistillDenominator::Diagonal => {
            let diag: Vec<f64> = (0..b).map(|u| cos[[u, u]] / tau).collect();
            let p = softmax(&diag);
            for u in 0..b {
                dscore[[u, u]] = p[u] - inv_b;
            }
            -inv_b * diag.iter().sum::<f64>() + log_sum_exp(diag.iter().copied())
        }
        DistillDenominator::Cross => {
            let mut total = 0.0;
            for u in 0..b {
                let col: Vec<f64> = (0..b).map(|t| cos[[t, u]] / tau).collect();
                total += log_sum_exp(col.iter().copied()) - col[u];
                for (t, p) in softmax(&col).into_iter().enumerate() {
                    dscore[[t, u]] = inv_b * (p - if t == u { 1.0 } else { 0.0 });
                }
            }
            inv_b * total
        }
    };

    for ((t, s), &g) in dscore.indexed_iter() {
        let mut row = grad_s.row_mut(s);
        add_cos_grad(
            &mut row,
            g / tau,
            batch.student.row(s),
            batch.teacher.row(t),
            sn.norms[s],
            tn.norms[t],
            sn.floored[s],
            cos[[t, s]],
        );
    }

    Ok(LossOutput {
        loss,
        grad_teacher: Mat::zeros(batch.teacher.raw_dim()),
        grad_student: grad_s,
        floored_rows: tn.count_floored() + sn.count_floored(),
    })
}

/// Sequential alignment loss with in-batch negatives; both sides get gradients.
pub fn loss_seq(batch: &AlignBatch<'_>) -> Result<LossOutput> {
    batch.validate()?;
    let b = batch.teacher.nrows();
    let tn = RowNorms::of(batch.teacher);
    let sn = RowNorms::of(batch.student);
    let cos = cosine_matrix(batch.teacher, batch.student, &tn, &sn);
    let tau = batch.tau;
    let inv_b = 1.0 / b as f64;
    let mut grad_t = Mat::zeros(batch.teacher.raw_dim());
    let mut grad_s = Mat::zeros(batch.student.raw_dim());

    let mut total = 0.0;
    for u in 0..b {
        let row: Vec<f64> = cos.row(u).iter().map(|c| c / tau).collect();
        total += log_sum_exp(row.iter().copied()) - row[u];
        for (v, p) in softmax(&row).into_iter().enumerate() {
            let g = inv_b * (p - if v == u { 1.0 } else { 0.0 }) / tau;
            let c = cos[[u, v]];
            let mut tr = grad_t.row_mut(u);
            add_cos_grad(
                &mut tr,
                g,
                batch.teacher.row(u),
                batch.student.row(v),
                tn.norms[u],
                sn.norms[v],
                tn.floored[u],
                c,
            );
            let mut sr = grad_s.row_mut(v);
            add_cos_grad(
                &mut sr,
                g,
                batch.student.row(v),
                batch.teacher.row(u),
                sn.norms[v],
                tn.norms[u],
                sn.floored[v],
                c,
            );
        }
    }

    Ok(LossOutput {
        loss: inv_b * total,
        grad_teacher: grad_t,
        grad_student: grad_s,
        floored_rows: tn.count_floored() + sn.count_floored(),
    })
}

/// Mean of the whole-word rows of the user's items.
pub fn user_interest_from_sequence(omega_items: &Mat, items: &[usize]) -> Result<Array1<f64>> {
    if items.is_empty() {
        return Err(Error::Empty("user interaction sequence"));
    }
    let mut acc = Array1::zeros(omega_items.ncols());
    for &v in items {
        if v >= omega_items.nrows() {
            return Err(Error::IndexOutOfRange {
                index: v,
                len: omega_items.nrows(),
            });
        }
        acc += &omega_items.row(v);
    }
    Ok(acc / items.len() as f64)
}

/// Stacks `user_interest_from_sequence` for several users.
pub fn user_interests(omega_items: &Mat, sequences: &[&[usize]]) -> Result<Mat> {
    let mut out = Mat::zeros((sequences.len(), omega_items.ncols()));
    for (mut row, seq) in out.axis_iter_mut(Axis(0)).zip(sequences) {
        row.assign(&user_interest_from_sequence(omega_items, seq)?);
    }
    Ok(out)
}
