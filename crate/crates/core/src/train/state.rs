//! Trainable parameters, frozen inputs, optimizer moments and checkpoints.

use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::embed::AdapterParams;
use crate::error::{Error, Result};
use crate::genrec::model::{Backbone, BackboneConfig};
use crate::tensor::{Dtype, Mat, Sections};

pub const CHECKPOINT_FORMAT: &str = "isrf-checkpoint/1";

/// Every trainable tensor. Gradients and optimizer moments reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub backbone: Backbone,
    /// Soft prompts `P`.
    pub prompts: Mat,
    /// Shared non-id whole-word embedding, `1 x d`.
    pub omega_0: Mat,
    /// SR whole-word table: item rows then one shared user row.
    pub omega_s: Mat,
    /// `E_u`.
    pub user_emb: Mat,
    /// `H^(0)`.
    pub h0: Mat,
    pub adapter: AdapterParams,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.raw_dim());
        let mut backbone = Backbone::zeros(self.backbone.config);
        backbone.config = self.backbone.config;
        Self {
            backbone,
            prompts: z(&self.prompts),
            omega_0: z(&self.omega_0),
            omega_s: z(&self.omega_s),
            user_emb: z(&self.user_emb),
            h0: z(&self.h0),
            adapter: AdapterParams {
                w1: z(&self.adapter.w1),
                b1: Array1::zeros(self.adapter.b1.len()),
                w2: z(&self.adapter.w2),
                b2: Array1::zeros(self.adapter.b2.len()),
                activation: self.adapter.activation,
            },
        }
    }

    /// `(name, (rows, cols), data)` in a fixed order.
    pub fn entries(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out: Vec<(String, (usize, usize), &[f64])> = self
            .backbone
            .tensors()
            .into_iter()
            .map(|(n, m)| (format!("backbone.{n}"), m.dim(), m.as_slice().expect("standard layout")))
            .collect();
        for (n, m) in [
            ("prompts", &self.prompts),
            ("omega_0", &self.omega_0),
            ("omega_s", &self.omega_s),
            ("user_emb", &self.user_emb),
            ("h0", &self.h0),
            ("adapter.w1", &self.adapter.w1),
            ("adapter.w2", &self.adapter.w2),
        ] {
            out.push((n.to_owned(), m.dim(), m.as_slice().expect("standard layout")));
        }
        for (n, v) in [("adapter.b1", &self.adapter.b1), ("adapter.b2", &self.adapter.b2)] {
            out.push((n.to_owned(), (1, v.len()), v.as_slice().expect("contiguous")));
        }
        out
    }

    /// Mutable views in the same order as [`Params::entries`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .backbone
            .tensors_mut()
            .into_iter()
            .map(|(_, m)| m.as_slice_mut().expect("standard layout"))
            .collect();
        for m in [
            &mut self.prompts,
            &mut self.omega_0,
            &mut self.omega_s,
            &mut self.user_emb,
            &mut self.h0,
            &mut self.adapter.w1,
            &mut self.adapter.w2,
        ] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        out.push(self.adapter.b1.as_slice_mut().expect("contiguous"));
        out.push(self.adapter.b2.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn add_assign(&mut self, other: &Params) {
        let src: Vec<Vec<f64>> = other.entries().into_iter().map(|(_, _, d)| d.to_vec()).collect();
        for (dst, src) in self.slices_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.entries()
            .iter()
            .zip(other.entries().iter())
            .flat_map(|((_, _, a), (_, _, b))| a.iter().zip(b.iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Tensors that never change during training.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenInputs {
    /// Reduced item semantics `S~_v` (or their random stand-in).
    pub items: Mat,
    /// Fixed `d_m x d` projection used when the adapter is ablated.
    pub projection: Option<Mat>,
}

impl FrozenInputs {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.items.iter() {
            h.update(x.to_le_bytes());
        }
        if let Some(p) = &self.projection {
            for x in p.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Adaptive moment estimation with bias correction, no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let g_entries = grads.entries();
        let p = params.slices_mut();
        let m = self.m.slices_mut();
        let v = self.v.slices_mut();
        for (((p, m), v), (_, _, g)) in p.into_iter().zip(m).zip(v).zip(g_entries) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub params: Params,
    pub frozen: FrozenInputs,
    pub adam: Adam,
    pub epoch: usize,
}

/// Decimal digits needed for `n - 1` (at least one).
pub(crate) fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

pub(crate) fn uniform(seed: u64, stream: u64, rows: usize, cols: usize, bound: f64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// Streams for seeded initialization; one per tensor family.
pub(crate) mod streams {
    pub const PROMPTS: u64 = 101;
    pub const OMEGA_0: u64 = 102;
    pub const OMEGA_S: u64 = 103;
    pub const USER_EMB: u64 = 104;
    pub const H0: u64 = 105;
    pub const RANDOM_ITEMS: u64 = 106;
    pub const PROJECTION: u64 = 107;
    pub const SHUFFLE: u64 = 1 << 32;
}

impl ModelState {
    pub fn backbone_config(config: &TrainConfig, n_users: usize, n_items: usize, vocab_size: usize) -> BackboneConfig {
        let user_len = 2 + digits(n_users);
        let item_len = 2 + digits(n_items);
        // seven template words in each prompt
        let sr = user_len + config.max_history * item_len + 7;
        let dr = user_len + 7;
        BackboneConfig {
            d: config.d,
            vocab_size,
            max_enc_len: sr.max(dr) + config.n_prompts,
            max_dec_len: digits(n_items) + 1,
        }
    }

    pub fn init(
        config: &TrainConfig,
        n_users: usize,
        n_items: usize,
        vocab_size: usize,
        frozen: FrozenInputs,
    ) -> Result<Self> {
        config.validate()?;
        if frozen.items.dim() != (n_items, config.d_m) {
            return Err(Error::shape(format!(
                "frozen item inputs {:?}, expected ({n_items}, {})",
                frozen.items.dim(),
                config.d_m
            )));
        }
        let d = config.d;
        let seed = config.seed;
        let backbone = Backbone::init(Self::backbone_config(config, n_users, n_items, vocab_size), seed);
        let mut adapter = AdapterParams::init(config.d_m, d, seed)?;
        adapter.activation = config.adapter_activation;
        let params = Params {
            backbone,
            prompts: uniform(seed, streams::PROMPTS, config.n_prompts, d, 0.1),
            omega_0: uniform(seed, streams::OMEGA_0, 1, d, 0.1),
            omega_s: uniform(seed, streams::OMEGA_S, n_items + 1, d, 0.1),
            user_emb: uniform(seed, streams::USER_EMB, n_users, d, 0.1),
            h0: uniform(seed, streams::H0, n_users, d, 0.1),
            adapter,
        };
        Ok(Self {
            config: config.clone(),
            n_users,
            n_items,
            adam: Adam::new(&params),
            params,
            frozen,
            epoch: 0,
        })
    }

    pub fn to_sections(&self) -> Result<Sections> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            backbone: self.params.backbone.config,
            n_users: self.n_users,
            n_items: self.n_items,
            epoch: self.epoch,
            adam_step: self.adam.step,
        };
        let mut tensors = Vec::new();
        for (prefix, p) in [
            ("param", &self.params),
            ("adam_m", &self.adam.m),
            ("adam_v", &self.adam.v),
        ] {
            for (name, (r, c), data) in p.entries() {
                let m = Mat::from_shape_vec((r, c), data.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
                tensors.push((format!("{prefix}.{name}"), m));
            }
        }
        tensors.push(("frozen.items".into(), self.frozen.items.clone()));
        if let Some(p) = &self.frozen.projection {
            tensors.push(("frozen.projection".into(), p.clone()));
        }
        Ok(Sections {
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_sections()?.to_bytes(Dtype::F64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_sections(&Sections::load(path)?)
    }

    pub fn from_sections(s: &Sections) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(s.meta.clone())?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format `{}`",
                meta.format
            )));
        }
        let frozen = FrozenInputs {
            items: s.get("frozen.items")?.clone(),
            projection: s.get("frozen.projection").ok().cloned(),
        };
        let mut state = Self::init(
            &meta.config,
            meta.n_users,
            meta.n_items,
            meta.backbone.vocab_size,
            frozen,
        )?;
        if state.params.backbone.config != meta.backbone {
            return Err(Error::Format("backbone shape does not match its config".into()));
        }
        let fill = |prefix: &str, p: &mut Params| -> Result<()> {
            let names: Vec<(String, (usize, usize))> = p.entries().into_iter().map(|(n, dim, _)| (n, dim)).collect();
            for ((name, dim), dst) in names.into_iter().zip(p.slices_mut()) {
                let src = s.get(&format!("{prefix}.{name}"))?;
                if src.dim() != dim {
                    return Err(Error::Format(format!(
                        "section {prefix}.{name} has shape {:?}, expected {dim:?}",
                        src.dim()
                    )));
                }
                dst.copy_from_slice(src.as_slice().expect("standard layout"));
            }
            Ok(())
        };
        fill("param", &mut state.params)?;
        fill("adam_m", &mut state.adam.m)?;
        fill("adam_v", &mut state.adam.v)?;
        state.adam.step = meta.adam_step;
        state.epoch = meta.epoch;
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: TrainConfig,
    backbone: BackboneConfig,
    n_users: usize,
    n_items: usize,
    epoch: usize,
    adam_step: u64,
}
