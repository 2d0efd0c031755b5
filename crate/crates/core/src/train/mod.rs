//! Joint optimization: data preparation, per-epoch refresh of graph
//! representations, batch losses with exact gradients, Adam updates and
//! early stopping.

mod config;
mod state;

use std::io::Write;

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::align::{loss_distill, loss_seq, user_interests, AlignBatch};
use crate::data::{CandidateSet, InteractionDataset, Splits};
use crate::embed::{adapter_forward, adapter_gradient, pca_fit, PcaModel};
use crate::error::{Error, Result};
use crate::genrec::model::{sequence_nll, teacher_forcing_input, Backbone};
use crate::genrec::vocab::{render_dr_prompt, render_sr_prompt, TokenizedInput};
use crate::genrec::{inject_backward, inject_inputs, tokenize, InjectionGrads, SlotMap, Task, Vocab};
use crate::graphs::{
    build_interaction_graph, build_user_relation, lightgcn_propagate, propagate_backward, propagate_user_graph,
    NormalizedGraph, RelationReport,
};
use crate::tensor::{EmbeddingMatrix, Mat, Space};

pub use config::{Ablations, TrainConfig, Variant};
use state::{streams, uniform};
pub use state::{Adam, FrozenInputs, ModelState, Params, CHECKPOINT_FORMAT};

/// Samples per gradient accumulation chunk. Fixed so the reduction order
/// does not depend on the number of worker threads.
const CHUNK: usize = 8;

/// One embedding matrix per reasoning view of an entity type.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticViews {
    pub fused: Mat,
    pub positive: Option<Mat>,
    pub negative: Option<Mat>,
}

impl SemanticViews {
    pub fn fused_only(fused: Mat) -> Self {
        Self {
            fused,
            positive: None,
            negative: None,
        }
    }

    fn pick(&self, positive: bool, negative: bool) -> Result<&Mat> {
        match (positive, negative) {
            (true, _) => self.positive.as_ref().ok_or(Error::MissingContext {
                stage: "variant",
                what: "positive-only semantic embeddings",
            }),
            (_, true) => self.negative.as_ref().ok_or(Error::MissingContext {
                stage: "variant",
                what: "negative-only semantic embeddings",
            }),
            _ => Ok(&self.fused),
        }
    }
}

/// Everything `fit` consumes besides the config.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub dataset: InteractionDataset,
    pub splits: Splits,
    /// `S_u`, one row per user.
    pub users: SemanticViews,
    /// `S_v`, one row per item.
    pub items: SemanticViews,
}

/// A tokenized training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub user: usize,
    pub input: TokenizedInput,
}

/// Static artifacts derived once from config and data.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: Task,
    pub vocab: Vocab,
    pub slots: SlotMap,
    pub interaction: NormalizedGraph,
    pub relation: NormalizedGraph,
    pub relation_report: RelationReport,
    pub pca: Option<PcaModel>,
    pub frozen: FrozenInputs,
    pub train_sequences: Vec<Vec<usize>>,
    pub samples: Vec<Sample>,
    /// Indices into `samples` for each user.
    pub user_samples: Vec<Vec<usize>>,
}

/// Most recent `max` entries of `seq`.
pub fn truncate_history(seq: &[usize], max: usize) -> &[usize] {
    &seq[seq.len().saturating_sub(max)..]
}

/// Encoder input for a user on the configured task.
pub fn prompt_input(
    task: Task,
    vocab: &Vocab,
    slots: &SlotMap,
    user: usize,
    history: &[usize],
    max_history: usize,
) -> Result<TokenizedInput> {
    let text = match task {
        Task::Sr => render_sr_prompt(user, truncate_history(history, max_history)),
        Task::Dr => render_dr_prompt(user),
    };
    tokenize(&text, vocab, slots)
}

pub fn prepare(config: &TrainConfig, data: &TrainData) -> Result<Prepared> {
    config.validate()?;
    let ds = &data.dataset;
    let (n_users, n_items) = (ds.n_users(), ds.n_items());
    if data.splits.users.len() != n_users {
        return Err(Error::shape(format!(
            "{} splits for {n_users} users",
            data.splits.users.len()
        )));
    }
    let (up, un, vp, vn) = match config.variant {
        Variant::Full => (false, false, false, false),
        Variant::UserPositive => (true, false, false, false),
        Variant::UserNegative => (false, true, false, false),
        Variant::ItemPositive => (false, false, true, false),
        Variant::ItemNegative => (false, false, false, true),
    };
    let s_u = data.users.pick(up, un)?;
    let s_v = data.items.pick(vp, vn)?;
    if s_u.nrows() != n_users || s_v.nrows() != n_items {
        return Err(Error::shape(format!(
            "semantic rows users {} items {}, dataset has {n_users} users {n_items} items",
            s_u.nrows(),
            s_v.nrows()
        )));
    }

    let interaction = build_interaction_graph(ds, &data.splits)?;
    let (relation, relation_report) = build_user_relation(s_u, config.k, config.relation_symmetrize)?;

    let (pca, items) = if config.ablation.no_item_semantics {
        (
            None,
            uniform(config.seed, streams::RANDOM_ITEMS, n_items, config.d_m, 1.0),
        )
    } else {
        let model = pca_fit(&EmbeddingMatrix::new(s_v.clone(), Space::Raw), config.d_m)?;
        let reduced = model.transform(&EmbeddingMatrix::new(s_v.clone(), Space::Raw))?.values;
        (Some(model), reduced)
    };
    let projection = config.ablation.no_adapter.then(|| {
        uniform(
            config.seed,
            streams::PROJECTION,
            config.d_m,
            config.d,
            1.0 / (config.d_m as f64).sqrt(),
        )
    });

    let vocab = Vocab::for_templates();
    let slots = SlotMap {
        task: config.task,
        n_users,
        n_items,
    };
    let train_sequences: Vec<Vec<usize>> = data.splits.users.iter().map(|s| s.train.clone()).collect();
    let mut samples = Vec::new();
    let mut user_samples = vec![Vec::new(); n_users];
    for (u, seq) in train_sequences.iter().enumerate() {
        let start = match config.task {
            Task::Sr => 1,
            Task::Dr => 0,
        };
        for t in start..seq.len() {
            let mut input = prompt_input(config.task, &vocab, &slots, u, &seq[..t], config.max_history)?;
            input.target = vocab.id_target(seq[t]);
            user_samples[u].push(samples.len());
            samples.push(Sample { user: u, input });
        }
    }
    Ok(Prepared {
        task: config.task,
        vocab,
        slots,
        interaction,
        relation,
        relation_report,
        pca,
        frozen: FrozenInputs { items, projection },
        train_sequences,
        samples,
        user_samples,
    })
}

/// Fresh model state for prepared data.
pub fn init_state(config: &TrainConfig, prep: &Prepared) -> Result<ModelState> {
    ModelState::init(
        config,
        prep.slots.n_users,
        prep.slots.n_items,
        prep.vocab.len(),
        prep.frozen.clone(),
    )
}

/// Graph-propagated representations, recomputed from parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Derived {
    /// Group-interest users `H`.
    pub h: Mat,
    /// DR only: `E~ = [E~_u; E~_v]`, also the whole-word table of the DR prompt.
    pub e_tilde: Option<Mat>,
}

/// Item rows in the recommendation space, `E_v`.
pub fn item_embeddings(state: &ModelState) -> Result<Mat> {
    match &state.frozen.projection {
        Some(p) => Ok(state.frozen.items.dot(p)),
        None => adapter_forward(&state.frozen.items, &state.params.adapter),
    }
}

pub fn derive(state: &ModelState, prep: &Prepared) -> Result<Derived> {
    let cfg = &state.config;
    let h = propagate_user_graph(&prep.relation, &state.params.h0, cfg.relation_layers)?.averaged;
    let e_tilde = match prep.task {
        Task::Sr => None,
        Task::Dr => {
            let e_v = item_embeddings(state)?;
            let e0 = ndarray::concatenate(Axis(0), &[state.params.user_emb.view(), e_v.view()])
                .map_err(|e| Error::shape(e.to_string()))?;
            Some(lightgcn_propagate(&prep.interaction, &e0, cfg.layers)?.averaged)
        }
    };
    Ok(Derived { h, e_tilde })
}

/// Which loss terms to include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub gen: bool,
    pub align: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { gen: true, align: true };

    pub fn from_config(cfg: &TrainConfig) -> Self {
        let align = match cfg.task {
            Task::Sr => !cfg.ablation.no_seq_loss,
            Task::Dr => !cfg.ablation.no_distill,
        };
        Terms { gen: true, align }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub gen: f64,
    pub align: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub losses: LossParts,
    pub grads: Params,
}

struct GenAccum {
    loss: f64,
    backbone: Backbone,
    prompts: Mat,
    omega_0: Mat,
    table: Mat,
}

impl GenAccum {
    fn zeros(p: &Params, table: &Mat) -> Self {
        Self {
            loss: 0.0,
            backbone: Backbone::zeros(p.backbone.config),
            prompts: Mat::zeros(p.prompts.raw_dim()),
            omega_0: Mat::zeros(p.omega_0.raw_dim()),
            table: Mat::zeros(table.raw_dim()),
        }
    }

    fn add(&mut self, other: &GenAccum) {
        self.loss += other.loss;
        add_backbone(&mut self.backbone, &other.backbone);
        self.prompts += &other.prompts;
        self.omega_0 += &other.omega_0;
        self.table += &other.table;
    }
}

fn add_backbone(dst: &mut Backbone, src: &Backbone) {
    for ((_, d), (_, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        *d += s;
    }
}

/// Forward and backward of one sample's sequence NLL, accumulated into `acc`.
fn sample_gradient(params: &Params, table: &Mat, beta: f64, input: &TokenizedInput, acc: &mut GenAccum) -> Result<()> {
    let bb = &params.backbone;
    let x = bb.embed_tokens(&input.tokens)?;
    let xt = inject_inputs(&x, &params.prompts, &input.slots, params.omega_0.row(0), table, beta)?;
    let enc = bb.encode(&xt)?;
    let dec_in = teacher_forcing_input(&input.target);
    let dec = bb.decode(&enc, &dec_in)?;
    let (loss, dlogits) = sequence_nll(&dec.logits, &input.target)?;
    let d_xt = bb.backward(&enc, &dec, &dec_in, &dlogits, &mut acc.backbone);
    let dx = inject_backward(
        &d_xt,
        &input.slots,
        beta,
        InjectionGrads {
            prompts: &mut acc.prompts,
            omega_0: &mut acc.omega_0,
            table: &mut acc.table,
        },
    );
    for (row, &t) in dx.rows().into_iter().zip(&input.tokens) {
        acc.backbone.tok_emb.row_mut(t).scaled_add(1.0, &row);
    }
    acc.loss += loss;
    Ok(())
}

/// Generation loss over `samples` (mean of per-sample token means) with
/// gradients; chunks are reduced in a fixed order.
fn generation_gradient(params: &Params, table: &Mat, beta: f64, samples: &[&TokenizedInput]) -> Result<GenAccum> {
    let chunks: Vec<GenAccum> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = GenAccum::zeros(params, table);
            for s in chunk {
                sample_gradient(params, table, beta, s, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = GenAccum::zeros(params, table);
    for c in &chunks {
        total.add(c);
    }
    if !samples.is_empty() {
        let inv = 1.0 / samples.len() as f64;
        total.loss *= inv;
        for (_, m) in total.backbone.tensors_mut() {
            *m *= inv;
        }
        total.prompts *= inv;
        total.omega_0 *= inv;
        total.table *= inv;
    }
    Ok(total)
}

/// Losses and exact parameter gradients for one batch of users, given the
/// graph representations `derived` (treated as functions of the current
/// parameters through linear propagation).
pub fn batch_loss(
    state: &ModelState,
    prep: &Prepared,
    derived: &Derived,
    users: &[usize],
    terms: Terms,
) -> Result<BatchOutput> {
    let cfg = &state.config;
    let p = &state.params;
    let mut grads = p.zeros_like();
    let mut losses = LossParts::default();
    let n_users = prep.slots.n_users;
    if let Some(&u) = users.iter().find(|&&u| u >= n_users) {
        return Err(Error::IndexOutOfRange { index: u, len: n_users });
    }

    let table = match prep.task {
        Task::Sr => &p.omega_s,
        Task::Dr => derived.e_tilde.as_ref().ok_or(Error::MissingContext {
            stage: "train",
            what: "propagated interaction embeddings",
        })?,
    };
    // gradient with respect to E~ (DR only)
    let mut d_e_tilde = Mat::zeros(table.raw_dim());

    if terms.gen {
        let inputs: Vec<&TokenizedInput> = users
            .iter()
            .flat_map(|&u| prep.user_samples[u].iter().map(|&i| &prep.samples[i].input))
            .collect();
        let g = generation_gradient(p, table, cfg.beta, &inputs)?;
        let w = cfg.gen_weight;
        losses.gen = g.loss;
        for ((_, dst), (_, src)) in grads.backbone.tensors_mut().into_iter().zip(g.backbone.tensors()) {
            dst.scaled_add(w, src);
        }
        grads.prompts.scaled_add(w, &g.prompts);
        grads.omega_0.scaled_add(w, &g.omega_0);
        match prep.task {
            Task::Sr => grads.omega_s.scaled_add(w, &g.table),
            Task::Dr => d_e_tilde.scaled_add(w, &g.table),
        }
    }

    if terms.align && users.len() > 0 {
        let w = cfg.align_weight;
        let h_rows = derived.h.select(Axis(0), users);
        match prep.task {
            Task::Sr => {
                let seqs: Vec<&[usize]> = users.iter().map(|&u| prep.train_sequences[u].as_slice()).collect();
                let item_rows = p.omega_s.slice(s![..prep.slots.n_items, ..]).to_owned();
                let e_u = user_interests(&item_rows, &seqs)?;
                let out = loss_seq(&AlignBatch {
                    teacher: &h_rows,
                    student: &e_u,
                    tau: cfg.tau,
                })?;
                losses.align = out.loss;
                let mut d_h = Mat::zeros(derived.h.raw_dim());
                for (i, &u) in users.iter().enumerate() {
                    d_h.row_mut(u).scaled_add(w, &out.grad_teacher.row(i));
                    let inv = w / seqs[i].len() as f64;
                    for &v in seqs[i] {
                        grads.omega_s.row_mut(v).scaled_add(inv, &out.grad_student.row(i));
                    }
                }
                grads.h0 += &propagate_backward(&prep.relation, &d_h, cfg.relation_layers)?;
            }
            Task::Dr => {
                let e_u = table.select(Axis(0), users);
                let out = loss_distill(
                    &AlignBatch {
                        teacher: &h_rows,
                        student: &e_u,
                        tau: cfg.tau,
                    },
                    cfg.distill_denominator,
                )?;
                losses.align = out.loss;
                for (i, &u) in users.iter().enumerate() {
                    d_e_tilde.row_mut(u).scaled_add(w, &out.grad_student.row(i));
                }
            }
        }
    }

    if prep.task == Task::Dr {
        let d_e0 = propagate_backward(&prep.interaction, &d_e_tilde, cfg.layers)?;
        grads.user_emb += &d_e0.slice(s![..n_users, ..]);
        if state.frozen.projection.is_none() {
            let d_ev = d_e0.slice(s![n_users.., ..]).to_owned();
            let ag = adapter_gradient(&state.frozen.items, &p.adapter, &d_ev)?;
            grads.adapter.w1 += &ag.w1;
            grads.adapter.b1 += &ag.b1;
            grads.adapter.w2 += &ag.w2;
            grads.adapter.b2 += &ag.b2;
        }
    }

    losses.total = cfg.gen_weight * losses.gen + cfg.align_weight * losses.align;
    Ok(BatchOutput { losses, grads })
}

/// `batch_loss` with representations recomputed from the current parameters.
pub fn total_loss(state: &ModelState, prep: &Prepared, users: &[usize], terms: Terms) -> Result<BatchOutput> {
    let derived = derive(state, prep)?;
    batch_loss(state, prep, &derived, users, terms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub gen_loss: f64,
    pub align_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub batches: usize,
}

/// Seeded user order for an epoch.
pub fn epoch_order(seed: u64, epoch: usize, n_users: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::SHUFFLE + epoch as u64);
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over all users. Graph representations are refreshed once at
/// the start of the epoch.
pub fn train_epoch(state: &mut ModelState, prep: &Prepared) -> Result<EpochMetrics> {
    let cfg = state.config.clone();
    let terms = Terms::from_config(&cfg);
    let derived = derive(state, prep)?;
    let order = epoch_order(cfg.seed, state.epoch, prep.slots.n_users);
    let mut m = EpochMetrics {
        epoch: state.epoch + 1,
        ..EpochMetrics::default()
    };
    for (b, users) in order.chunks(cfg.batch_size).enumerate() {
        let out = batch_loss(state, prep, &derived, users, terms)?;
        let l = out.losses;
        if !(l.gen.is_finite() && l.align.is_finite() && l.total.is_finite()) {
            return Err(Error::NonFinite(format!(
                "epoch {} batch {b}: gen {} align {} total {}",
                m.epoch, l.gen, l.align, l.total
            )));
        }
        let norm = out.grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {} batch {b}: gradient norm {norm}",
                m.epoch
            )));
        }
        if cfg.learning_rate > 0.0 {
            state.adam.update(&mut state.params, &out.grads, cfg.learning_rate);
        }
        m.gen_loss += l.gen;
        m.align_loss += l.align;
        m.total_loss += l.total;
        m.grad_norm += norm;
        m.batches += 1;
    }
    if m.batches > 0 {
        let inv = 1.0 / m.batches as f64;
        m.gen_loss *= inv;
        m.align_loss *= inv;
        m.total_loss *= inv;
        m.grad_norm *= inv;
    }
    state.epoch += 1;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gen_loss: f64,
    pub align_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub valid_hit10: f64,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in history {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best: ModelState,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains until the validation score has not strictly improved for
/// `patience` consecutive epochs or `max_epochs` is reached, returning the
/// best-scoring state.
pub fn fit_with<F>(config: &TrainConfig, prep: &Prepared, mut validate: F) -> Result<FitResult>
where
    F: FnMut(&ModelState) -> Result<f64>,
{
    let mut state = init_state(config, prep)?;
    let mut best: Option<(f64, ModelState)> = None;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    for _ in 0..config.max_epochs {
        let m = train_epoch(&mut state, prep)?;
        let score = validate(&state)?;
        history.push(EpochRecord {
            epoch: m.epoch,
            gen_loss: m.gen_loss,
            align_loss: m.align_loss,
            total_loss: m.total_loss,
            grad_norm: m.grad_norm,
            valid_hit10: score,
        });
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, state.clone()));
            best_epoch = m.epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, best) = best.ok_or(Error::Empty("training epochs"))?;
    Ok(FitResult {
        best,
        best_epoch,
        history,
        stopped_early,
    })
}

/// [`fit_with`] validated by H@10 on each user's validation item.
pub fn fit(config: &TrainConfig, data: &TrainData) -> Result<(Prepared, FitResult)> {
    let prep = prepare(config, data)?;
    let candidates = validation_candidates(config, data)?;
    let result = fit_with(config, &prep, |state| {
        crate::eval::validation_hit_at_10(state, &prep, &data.splits, candidates.as_deref())
    })?;
    Ok((prep, result))
}

/// DR validation candidate sets (valid item + sampled negatives); `None` for SR.
pub fn validation_candidates(config: &TrainConfig, data: &TrainData) -> Result<Option<Vec<CandidateSet>>> {
    match config.task {
        Task::Sr => Ok(None),
        Task::Dr => {
            crate::data::sample_candidates(&data.dataset, &data.splits.valid_targets(), config.n_neg, config.seed)
                .map(Some)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_leave_one_out;

    fn toy(task: Task) -> (TrainConfig, TrainData) {
        let seqs: Vec<Vec<usize>> = (0..6).map(|u| (0..5).map(|t| (u + 2 * t) % 7).collect()).collect();
        let ds = InteractionDataset::from_sequences(seqs, 7).unwrap();
        let splits = split_leave_one_out(&ds).unwrap();
        let users = SemanticViews::fused_only(uniform(3, 0, 6, 5, 1.0));
        let items = SemanticViews::fused_only(uniform(4, 0, 7, 5, 1.0));
        let cfg = TrainConfig {
            task,
            d: 8,
            d_m: 4,
            n_prompts: 2,
            k: 2,
            batch_size: 4,
            max_history: 3,
            n_neg: 2,
            eval_beam: 10,
            ..TrainConfig::default()
        };
        (
            cfg,
            TrainData {
                dataset: ds,
                splits,
                users,
                items,
            },
        )
    }

    #[test]
    fn zero_learning_rate_leaves_state() {
        for task in [Task::Sr, Task::Dr] {
            let (mut cfg, data) = toy(task);
            cfg.learning_rate = 0.0;
            let prep = prepare(&cfg, &data).unwrap();
            let mut state = init_state(&cfg, &prep).unwrap();
            let before = state.clone();
            let m = train_epoch(&mut state, &prep).unwrap();
            assert!(m.gen_loss > 0.0);
            assert_eq!(state.params, before.params);
            assert_eq!(state.adam, before.adam);
        }
    }

    #[test]
    fn no_distill_total_is_generation_loss() {
        let (mut cfg, data) = toy(Task::Dr);
        cfg.ablation.no_distill = true;
        let prep = prepare(&cfg, &data).unwrap();
        let state = init_state(&cfg, &prep).unwrap();
        let out = total_loss(&state, &prep, &[0, 1, 2], Terms::from_config(&cfg)).unwrap();
        assert_eq!(out.losses.total, out.losses.gen);
        assert_eq!(out.losses.align, 0.0);
    }

    #[test]
    fn epochs_are_deterministic() {
        let (cfg, data) = toy(Task::Sr);
        let prep = prepare(&cfg, &data).unwrap();
        let run = || {
            let mut s = init_state(&cfg, &prep).unwrap();
            let a = train_epoch(&mut s, &prep).unwrap();
            let b = train_epoch(&mut s, &prep).unwrap();
            (a, b, s.to_bytes().unwrap())
        };
        let (a1, b1, s1) = run();
        let (a2, b2, s2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn patience_stops_after_plateau() {
        let (mut cfg, data) = toy(Task::Sr);
        cfg.max_epochs = 30;
        cfg.learning_rate = 0.0;
        let prep = prepare(&cfg, &data).unwrap();
        let scores = [0.1, 0.2, 0.3];
        let mut calls = 0;
        let r = fit_with(&cfg, &prep, |_| {
            calls += 1;
            Ok(*scores.get(calls - 1).unwrap_or(&0.3))
        })
        .unwrap();
        assert_eq!(r.history.len(), 8);
        assert_eq!(r.best_epoch, 3);
        assert!(r.stopped_early);

        cfg.max_epochs = 4;
        let mut calls = 0;
        let r = fit_with(&cfg, &prep, |_| {
            calls += 1;
            Ok(calls as f64)
        })
        .unwrap();
        assert_eq!(r.history.len(), 4);
        assert_eq!(r.best_epoch, 4);
        assert!(!r.stopped_early);
    }

    #[test]
    fn frozen_inputs_survive_training() {
        let (cfg, data) = toy(Task::Dr);
        let prep = prepare(&cfg, &data).unwrap();
        let mut state = init_state(&cfg, &prep).unwrap();
        let digest = state.frozen.digest();
        train_epoch(&mut state, &prep).unwrap();
        assert_eq!(state.frozen.digest(), digest);
    }

    #[test]
    fn missing_view_is_reported() {
        let (mut cfg, data) = toy(Task::Sr);
        cfg.variant = Variant::UserNegative;
        assert!(matches!(prepare(&cfg, &data), Err(Error::MissingContext { .. })));
    }
}
