//! Generative head: token/slot construction, soft prompts, whole-word
//! embedding injection, the backbone and decoding.

pub mod beam;
pub mod model;
pub mod vocab;

use ndarray::{s, ArrayView1};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use model::{Backbone, Encoded};
use vocab::TokenId;

pub use beam::{beam_search, greedy_decode, BeamConfig, Hypothesis, StepScorer, TokenTrie};
pub use model::{generation_loss, sequence_nll, BackboneConfig};
pub use vocab::{detokenize, tokenize, SlotMap, Task, TokenizedInput, Vocab};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_PROMPTS: usize = 8;

/// `X~ = [X; P] + beta * lookup(Z ++ 0...)`.
///
/// Slot 0 selects `omega_0`; slot `z >= 1` selects row `z - 1` of `table`.
/// Soft-prompt positions always take slot 0.
pub fn inject_inputs(
    x_emb: &Mat,
    prompts: &Mat,
    slots: &[usize],
    omega_0: ArrayView1<f64>,
    table: &Mat,
    beta: f64,
) -> Result<Mat> {
    let d = x_emb.ncols();
    if prompts.ncols() != d || omega_0.len() != d || table.ncols() != d {
        return Err(Error::shape(format!(
            "widths: tokens {d}, prompts {}, omega_0 {}, table {}",
            prompts.ncols(),
            omega_0.len(),
            table.ncols()
        )));
    }
    if slots.len() != x_emb.nrows() {
        return Err(Error::shape(format!(
            "{} slots for {} tokens",
            slots.len(),
            x_emb.nrows()
        )));
    }
    let n = x_emb.nrows();
    let mut out = Mat::zeros((n + prompts.nrows(), d));
    out.slice_mut(s![..n, ..]).assign(x_emb);
    out.slice_mut(s![n.., ..]).assign(prompts);
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let z = slots.get(i).copied().unwrap_or(0);
        if z == 0 {
            row.scaled_add(beta, &omega_0);
        } else {
            if z > table.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: z,
                    len: table.nrows() + 1,
                });
            }
            row.scaled_add(beta, &table.row(z - 1));
        }
    }
    Ok(out)
}

/// Gradient buffers touched by the injection step.
pub struct InjectionGrads<'a> {
    pub prompts: &'a mut Mat,
    /// `1 x d`.
    pub omega_0: &'a mut Mat,
    pub table: &'a mut Mat,
}

/// Splits `d X~` back onto prompts, `omega_0` and table rows; returns the
/// gradient for the token embedding rows.
pub fn inject_backward(d_xt: &Mat, slots: &[usize], beta: f64, g: InjectionGrads<'_>) -> Mat {
    let n = slots.len();
    *g.prompts += &d_xt.slice(s![n.., ..]);
    for (i, row) in d_xt.rows().into_iter().enumerate() {
        let z = slots.get(i).copied().unwrap_or(0);
        if z == 0 {
            g.omega_0.row_mut(0).scaled_add(beta, &row);
        } else {
            g.table.row_mut(z - 1).scaled_add(beta, &row);
        }
    }
    d_xt.slice(s![..n, ..]).to_owned()
}

/// Trainable soft prompts and the injection scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub prompts: Mat,
    pub beta: f64,
}

/// An encoded prompt ready for step-wise decoding.
pub struct EncodedPrompt<'a> {
    pub backbone: &'a Backbone,
    pub encoded: Encoded,
}

impl StepScorer for EncodedPrompt<'_> {
    fn vocab_size(&self) -> usize {
        self.backbone.config.vocab_size
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.backbone.next_log_probs(&self.encoded, prefix)
    }
}
