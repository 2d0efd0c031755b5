//! Minimal encoder-decoder backbone: one single-head self-attention encoder
//! layer, one decoder layer with causal self-attention and cross-attention,
//! and a linear vocabulary head. Every block is residual; there are no
//! normalization layers so the backward pass stays exact and short.

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub vocab_size: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

impl AttnParams {
    fn zeros(d: usize) -> Self {
        Self {
            wq: Mat::zeros((d, d)),
            wk: Mat::zeros((d, d)),
            wv: Mat::zeros((d, d)),
        }
    }
}

#[derive(Clone, Debug)]
struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    a: Mat,
}

/// Row-wise softmax; entries with `-inf` become exactly 0.
pub fn softmax_rows(s: &Mat) -> Mat {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

pub fn log_softmax(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// `xq + softmax(xq Wq (xkv Wk)^T / sqrt(d)) xkv Wv`.
fn attention(p: &AttnParams, xq: &Mat, xkv: &Mat, causal: bool) -> (Mat, AttnCache) {
    let scale = 1.0 / (p.wq.ncols() as f64).sqrt();
    let q = xq.dot(&p.wq);
    let k = xkv.dot(&p.wk);
    let v = xkv.dot(&p.wv);
    let mut sc = q.dot(&k.t()) * scale;
    if causal {
        for ((i, j), x) in sc.indexed_iter_mut() {
            if j > i {
                *x = f64::NEG_INFINITY;
            }
        }
    }
    let a = softmax_rows(&sc);
    let out = xq + &a.dot(&v);
    (out, AttnCache { q, k, v, a })
}

/// Returns `(d xq, d xkv)` and accumulates parameter gradients into `g`.
fn attention_backward(
    p: &AttnParams,
    xq: &Mat,
    xkv: &Mat,
    c: &AttnCache,
    dout: &Mat,
    g: &mut AttnParams,
) -> (Mat, Mat) {
    let scale = 1.0 / (p.wq.ncols() as f64).sqrt();
    let da = dout.dot(&c.v.t());
    let dv = c.a.t().dot(dout);
    let mut ds = &c.a * &da;
    for (mut row, arow) in ds.rows_mut().into_iter().zip(c.a.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&arow, |x, &a| *x -= a * dot);
    }
    // ds = A * (dA - rowsum(A * dA))
    ds *= scale;
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);

    g.wq += &xq.t().dot(&dq);
    g.wk += &xkv.t().dot(&dk);
    g.wv += &xkv.t().dot(&dv);

    let dxq = dout + &dq.dot(&p.wq.t());
    let dxkv = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (dxq, dxkv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tok_emb: Mat,
    pub enc_pos: Mat,
    pub dec_pos: Mat,
    pub enc: AttnParams,
    pub dec_self: AttnParams,
    pub dec_cross: AttnParams,
    pub out_w: Mat,
    pub out_b: Mat,
}

/// Encoder activations kept for the backward pass and for decoding.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub output: Mat,
    input: Mat,
    cache: AttnCache,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub logits: Mat,
    d_in: Mat,
    self_out: Mat,
    cross_out: Mat,
    self_cache: AttnCache,
    cross_cache: AttnCache,
}

impl Backbone {
    pub fn zeros(config: BackboneConfig) -> Self {
        let d = config.d;
        Self {
            config,
            tok_emb: Mat::zeros((config.vocab_size, d)),
            enc_pos: Mat::zeros((config.max_enc_len, d)),
            dec_pos: Mat::zeros((config.max_dec_len, d)),
            enc: AttnParams::zeros(d),
            dec_self: AttnParams::zeros(d),
            dec_cross: AttnParams::zeros(d),
            out_w: Mat::zeros((d, config.vocab_size)),
            out_b: Mat::zeros((1, config.vocab_size)),
        }
    }

    /// Weights uniform in `+-1/sqrt(d)`, embeddings and positions in `+-0.1`,
    /// output bias zero.
    pub fn init(config: BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let wb = 1.0 / (d as f64).sqrt();
        let mut u =
            |rows: usize, cols: usize, bound: f64| Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound));
        let attn = |u: &mut dyn FnMut(usize, usize, f64) -> Mat| AttnParams {
            wq: u(d, d, wb),
            wk: u(d, d, wb),
            wv: u(d, d, wb),
        };
        let tok_emb = u(config.vocab_size, d, 0.1);
        let enc_pos = u(config.max_enc_len, d, 0.1);
        let dec_pos = u(config.max_dec_len, d, 0.1);
        let enc = attn(&mut u);
        let dec_self = attn(&mut u);
        let dec_cross = attn(&mut u);
        let out_w = u(d, config.vocab_size, wb);
        Self {
            config,
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            dec_self,
            dec_cross,
            out_w,
            out_b: Mat::zeros((1, config.vocab_size)),
        }
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Token embedding rows `X` for the given ids.
    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Mat> {
        let mut x = Mat::zeros((tokens.len(), self.d()));
        for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
            if t >= self.config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    len: self.config.vocab_size,
                });
            }
            row.assign(&self.tok_emb.row(t));
        }
        Ok(x)
    }

    pub fn encode(&self, x_tilde: &Mat) -> Result<Encoded> {
        let (n, d) = x_tilde.dim();
        if d != self.d() {
            return Err(Error::shape(format!("input width {d}, model width {}", self.d())));
        }
        if n == 0 || n > self.config.max_enc_len {
            return Err(Error::invalid(format!(
                "encoder length {n} outside 1..={}",
                self.config.max_enc_len
            )));
        }
        let input = x_tilde + &self.enc_pos.slice(s![..n, ..]);
        let (output, cache) = attention(&self.enc, &input, &input, false);
        Ok(Encoded { output, input, cache })
    }

    /// Teacher-forced decoder over `dec_in` (starting with `<bos>`).
    pub fn decode(&self, enc: &Encoded, dec_in: &[TokenId]) -> Result<Decoded> {
        let t = dec_in.len();
        if t == 0 || t > self.config.max_dec_len {
            return Err(Error::invalid(format!(
                "decoder length {t} outside 1..={}",
                self.config.max_dec_len
            )));
        }
        let d_in = self.embed_tokens(dec_in)? + &self.dec_pos.slice(s![..t, ..]);
        let (self_out, self_cache) = attention(&self.dec_self, &d_in, &d_in, true);
        let (cross_out, cross_cache) = attention(&self.dec_cross, &self_out, &enc.output, false);
        let logits = cross_out.dot(&self.out_w) + &self.out_b;
        Ok(Decoded {
            logits,
            d_in,
            self_out,
            cross_out,
            self_cache,
            cross_cache,
        })
    }

    /// Log-probabilities of the token following `prefix` (which excludes `<bos>`).
    pub fn next_log_probs(&self, enc: &Encoded, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(prefix);
        let out = self.decode(enc, &dec_in)?;
        Ok(log_softmax(out.logits.row(dec_in.len() - 1)))
    }

    /// Backpropagates `dlogits` through decoder and encoder. Parameter
    /// gradients are added into `g`; the gradient with respect to the
    /// encoder input `X~` is returned.
    pub fn backward(&self, enc: &Encoded, dec: &Decoded, dec_in: &[TokenId], dlogits: &Mat, g: &mut Backbone) -> Mat {
        g.out_w += &dec.cross_out.t().dot(dlogits);
        g.out_b += &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_cross = dlogits.dot(&self.out_w.t());

        let (d_self_out, d_enc_out) = attention_backward(
            &self.dec_cross,
            &dec.self_out,
            &enc.output,
            &dec.cross_cache,
            &d_cross,
            &mut g.dec_cross,
        );
        let (dq, dkv) = attention_backward(
            &self.dec_self,
            &dec.d_in,
            &dec.d_in,
            &dec.self_cache,
            &d_self_out,
            &mut g.dec_self,
        );
        let d_din = dq + dkv;
        for (i, &tok) in dec_in.iter().enumerate() {
            let row = d_din.row(i);
            g.tok_emb.row_mut(tok).scaled_add(1.0, &row);
            g.dec_pos.row_mut(i).scaled_add(1.0, &row);
        }

        let (dq, dkv) = attention_backward(&self.enc, &enc.input, &enc.input, &enc.cache, &d_enc_out, &mut g.enc);
        let d_input = dq + dkv;
        let n = d_input.nrows();
        let mut pos = g.enc_pos.slice_mut(s![..n, ..]);
        pos += &d_input;
        d_input
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("tok_emb", &self.tok_emb),
            ("enc_pos", &self.enc_pos),
            ("dec_pos", &self.dec_pos),
            ("enc.wq", &self.enc.wq),
            ("enc.wk", &self.enc.wk),
            ("enc.wv", &self.enc.wv),
            ("dec_self.wq", &self.dec_self.wq),
            ("dec_self.wk", &self.dec_self.wk),
            ("dec_self.wv", &self.dec_self.wv),
            ("dec_cross.wq", &self.dec_cross.wq),
            ("dec_cross.wk", &self.dec_cross.wk),
            ("dec_cross.wv", &self.dec_cross.wv),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("tok_emb", &mut self.tok_emb),
            ("enc_pos", &mut self.enc_pos),
            ("dec_pos", &mut self.dec_pos),
            ("enc.wq", &mut self.enc.wq),
            ("enc.wk", &mut self.enc.wk),
            ("enc.wv", &mut self.enc.wv),
            ("dec_self.wq", &mut self.dec_self.wq),
            ("dec_self.wk", &mut self.dec_self.wk),
            ("dec_self.wv", &mut self.dec_self.wv),
            ("dec_cross.wq", &mut self.dec_cross.wq),
            ("dec_cross.wk", &mut self.dec_cross.wk),
            ("dec_cross.wv", &mut self.dec_cross.wv),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ]
    }

    /// Attention weights of the encoder layer (for inspection and tests).
    pub fn encoder_attention<'a>(&self, enc: &'a Encoded) -> &'a Mat {
        &enc.cache.a
    }

    pub fn decoder_attention<'a>(&self, dec: &'a Decoded) -> (&'a Mat, &'a Mat) {
        (&dec.self_cache.a, &dec.cross_cache.a)
    }
}

/// Mean token negative log-likelihood of one sequence and its gradient
/// with respect to the logits.
pub fn sequence_nll(logits: &Mat, target: &[TokenId]) -> Result<(f64, Mat)> {
    if target.is_empty() {
        return Err(Error::Empty("generation target"));
    }
    if logits.nrows() != target.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} target tokens",
            logits.nrows(),
            target.len()
        )));
    }
    let inv_t = 1.0 / target.len() as f64;
    let mut grad = Mat::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (t, &y) in target.iter().enumerate() {
        if y >= logits.ncols() {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: logits.ncols(),
            });
        }
        let lp = log_softmax(logits.row(t));
        loss -= lp[y];
        for (j, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = inv_t * (lp[j].exp() - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * inv_t, grad))
}

/// Average over sequences of the per-sequence mean token NLL.
pub fn generation_loss(logits: &[Mat], targets: &[Vec<TokenId>]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit blocks for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("generation batch"));
    }
    let mut total = 0.0;
    for (l, y) in logits.iter().zip(targets) {
        total += sequence_nll(l, y)?.0;
    }
    Ok(total / logits.len() as f64)
}

/// `<bos>` followed by all target tokens but the last.
pub fn teacher_forcing_input(target: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(target.len());
    v.push(BOS);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}
