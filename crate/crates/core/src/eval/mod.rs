//! Ranking metrics, evaluation drivers and result tables.

mod runs;

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Splits};
use crate::error::{Error, Result};
use crate::genrec::Task;
use crate::infer::Recommender;
use crate::train::{ModelState, Prepared};

pub use runs::{
    ablation_config, case_study, run_ablations, run_experiment, run_variants, sweep, CaseStudy, ExperimentData,
    NeighborReport, SweepParam, ABLATION_LABELS,
};

/// Items an SR test query is ranked against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrRanking {
    /// The whole catalogue.
    #[default]
    Full,
    /// The test item plus sampled negatives, drawn as for DR.
    Sampled,
}

/// Cutoffs reported in every table.
pub const KS: [usize; 2] = [5, 10];

/// 1 if `target` is among the first `k` entries.
pub fn hit_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&v| v == target) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank within the top `k`, else 0.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&v| v == target) {
        Some(i) => 1.0 / ((i + 2) as f64).log2(),
        None => 0.0,
    }
}

/// Anything that orders items for a user.
pub trait Ranker: Sync {
    /// Ranked item ids, best first, without duplicates. `candidates`
    /// restricts the output when present.
    fn rank(&self, user: usize, history: &[usize], candidates: Option<&[usize]>, beam: usize) -> Result<Vec<usize>>;
}

/// One user to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub user: usize,
    pub history: Vec<usize>,
    pub candidates: Option<Vec<usize>>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: Task,
    pub label: String,
    #[serde(rename = "H@5")]
    pub h5: f64,
    #[serde(rename = "N@5")]
    pub n5: f64,
    #[serde(rename = "H@10")]
    pub h10: f64,
    #[serde(rename = "N@10")]
    pub n10: f64,
}

/// Per-user metric values in `KS` order: `[(hit, ndcg); 2]`.
pub type UserMetrics = [(f64, f64); 2];

fn user_metrics(ranked: &[usize], target: usize) -> UserMetrics {
    KS.map(|k| (hit_at_k(ranked, target, k), ndcg_at_k(ranked, target, k)))
}

/// Mean metrics over queries; users are ranked in parallel and summed in
/// query order.
pub fn evaluate(ranker: &dyn Ranker, queries: &[Query], beam: usize, task: Task, label: &str) -> Result<MetricRow> {
    let max_k = *KS.iter().max().expect("non-empty");
    if beam < max_k {
        return Err(Error::invalid(format!("beam {beam} is smaller than K = {max_k}")));
    }
    if queries.is_empty() {
        return Err(Error::Empty("evaluation users"));
    }
    let per_user: Vec<UserMetrics> = queries
        .par_iter()
        .map(|q| {
            let ranked = ranker.rank(q.user, &q.history, q.candidates.as_deref(), beam)?;
            Ok(user_metrics(&ranked, q.target))
        })
        .collect::<Result<_>>()?;
    Ok(mean_row(&per_user, task, label))
}

pub fn mean_row(per_user: &[UserMetrics], task: Task, label: &str) -> MetricRow {
    let mut acc = [0.0; 4];
    for m in per_user {
        acc[0] += m[0].0;
        acc[1] += m[0].1;
        acc[2] += m[1].0;
        acc[3] += m[1].1;
    }
    let n = per_user.len().max(1) as f64;
    MetricRow {
        task,
        label: label.to_owned(),
        h5: acc[0] / n,
        n5: acc[1] / n,
        h10: acc[2] / n,
        n10: acc[3] / n,
    }
}

/// SR queries: history is train plus validation, target is the test item.
pub fn sr_test_queries(splits: &Splits) -> Vec<Query> {
    splits
        .users
        .iter()
        .map(|s| Query {
            user: s.user,
            history: s.history_for_test(),
            candidates: None,
            target: s.test,
        })
        .collect()
}

/// SR test queries restricted to `sets` (one per user, positive = test item).
pub fn sr_sampled_queries(splits: &Splits, sets: &[CandidateSet]) -> Vec<Query> {
    splits
        .users
        .iter()
        .zip(sets)
        .map(|(s, c)| Query {
            user: s.user,
            history: s.history_for_test(),
            candidates: Some(c.all_items()),
            target: c.positive,
        })
        .collect()
}

/// DR queries from candidate sets; the history is unused by the DR prompt.
pub fn dr_queries(sets: &[CandidateSet]) -> Vec<Query> {
    sets.iter()
        .map(|c| Query {
            user: c.user,
            history: Vec::new(),
            candidates: Some(c.all_items()),
            target: c.positive,
        })
        .collect()
}

pub fn evaluate_sr(ranker: &dyn Ranker, splits: &Splits, beam: usize, label: &str) -> Result<MetricRow> {
    evaluate(ranker, &sr_test_queries(splits), beam, Task::Sr, label)
}

pub fn evaluate_dr(ranker: &dyn Ranker, sets: &[CandidateSet], beam: usize, label: &str) -> Result<MetricRow> {
    evaluate(ranker, &dr_queries(sets), beam, Task::Dr, label)
}

/// Test-split metrics for a trained state. SR ranks the full catalogue
/// unless `test_candidates` is given.
pub fn evaluate_state(
    state: &ModelState,
    prep: &Prepared,
    splits: &Splits,
    test_candidates: Option<&[CandidateSet]>,
    beam: usize,
    label: &str,
) -> Result<MetricRow> {
    let rec = Recommender::new(state, prep)?;
    match prep.task {
        Task::Sr => match test_candidates {
            None => evaluate_sr(&rec, splits, beam, label),
            Some(sets) => evaluate(&rec, &sr_sampled_queries(splits, sets), beam, Task::Sr, label),
        },
        Task::Dr => {
            let sets = test_candidates.ok_or(Error::MissingContext {
                stage: "eval",
                what: "DR candidate sets",
            })?;
            evaluate_dr(&rec, sets, beam, label)
        }
    }
}

/// H@10 against each user's validation item (history = train split).
pub fn validation_hit_at_10(
    state: &ModelState,
    prep: &Prepared,
    splits: &Splits,
    candidates: Option<&[CandidateSet]>,
) -> Result<f64> {
    let rec = Recommender::new(state, prep)?;
    let queries: Vec<Query> = match prep.task {
        Task::Sr => splits
            .users
            .iter()
            .map(|s| Query {
                user: s.user,
                history: s.train.clone(),
                candidates: None,
                target: s.valid,
            })
            .collect(),
        Task::Dr => dr_queries(candidates.ok_or(Error::MissingContext {
            stage: "validation",
            what: "DR candidate sets",
        })?),
    };
    Ok(evaluate(&rec, &queries, state.config.eval_beam, prep.task, "valid")?.h10)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn get(&self, task: Task, label: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.task == task && r.label == label)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            rows.push(rec?);
        }
        Ok(Self { rows })
    }

    /// Fixed-width text table with columns H@5, N@5, H@10, N@10.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<4} {:<width$} {:>8} {:>8} {:>8} {:>8}",
            "task", "config", "H@5", "N@5", "H@10", "N@10"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<4} {:<width$} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.task.to_string(),
                r.label,
                r.h5,
                r.n5,
                r.h10,
                r.n10
            );
        }
        s
    }
}
