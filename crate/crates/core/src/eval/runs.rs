//! Experiment drivers: single runs, ablations, semantic variants, sweeps
//! and the neighbour case study.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_state, MetricRow, MetricTable, SrRanking};
use crate::data::{sample_dr_candidates, CandidateSet};
use crate::error::{Error, Result};
use crate::genrec::Task;
use crate::infer::Recommender;
use crate::train::{fit, FitResult, ModelState, Prepared, TrainConfig, TrainData, Variant};

/// Training data plus the fixed DR test candidate sets.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: TrainData,
    pub test_candidates: Option<Vec<CandidateSet>>,
}

impl ExperimentData {
    /// Samples DR test candidates with `seed` when `task` is DR; SR ranks the
    /// full catalogue.
    pub fn for_task(train: TrainData, task: Task, n_neg: usize, seed: u64) -> Result<Self> {
        Self::with_ranking(train, task, SrRanking::Full, n_neg, seed)
    }

    /// Like [`ExperimentData::for_task`], with SR candidate sets sampled too
    /// when `sr` is [`SrRanking::Sampled`].
    pub fn with_ranking(train: TrainData, task: Task, sr: SrRanking, n_neg: usize, seed: u64) -> Result<Self> {
        let sampled = task == Task::Dr || sr == SrRanking::Sampled;
        let test_candidates = if sampled {
            Some(sample_dr_candidates(&train.dataset, &train.splits, n_neg, seed)?)
        } else {
            None
        };
        Ok(Self { train, test_candidates })
    }
}

/// Fits and evaluates on the test split.
pub fn run_experiment(
    config: &TrainConfig,
    data: &ExperimentData,
    label: &str,
) -> Result<(MetricRow, Prepared, FitResult)> {
    let (prep, fitted) = fit(config, &data.train)?;
    let row = evaluate_state(
        &fitted.best,
        &prep,
        &data.train.splits,
        data.test_candidates.as_deref(),
        config.eval_beam,
        label,
    )?;
    Ok((row, prep, fitted))
}

pub const ABLATION_LABELS: [&str; 5] = ["full", "w/o L_D->S", "w/o L_S", "w/o I_se", "w/o Adapter"];

/// The base config with one ablation flag set.
pub fn ablation_config(base: &TrainConfig, label: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match label {
        "full" => {}
        "w/o L_D->S" => c.ablation.no_distill = true,
        "w/o L_S" => c.ablation.no_seq_loss = true,
        "w/o I_se" => c.ablation.no_item_semantics = true,
        "w/o Adapter" => c.ablation.no_adapter = true,
        other => return Err(Error::invalid(format!("unknown ablation `{other}`"))),
    }
    Ok(c)
}

pub fn run_ablations(base: &TrainConfig, data: &ExperimentData) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    for label in ABLATION_LABELS {
        let cfg = ablation_config(base, label)?;
        table.push(run_experiment(&cfg, data, label)?.0);
    }
    Ok(table)
}

pub fn run_variants(base: &TrainConfig, data: &ExperimentData) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    for v in Variant::ALL {
        let cfg = TrainConfig {
            variant: v,
            ..base.clone()
        };
        table.push(run_experiment(&cfg, data, v.label())?.0);
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Relation-graph layers `L'`.
    #[serde(rename = "Lprime")]
    RelationLayers,
    /// Neighbours per user `k`.
    #[serde(rename = "k")]
    K,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Lprime" | "L'" => Ok(Self::RelationLayers),
            "k" => Ok(Self::K),
            _ => Err(Error::invalid(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

/// One run per value, everything else (including the seed) fixed.
pub fn sweep(param: SweepParam, values: &[usize], base: &TrainConfig, data: &ExperimentData) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    for &v in values {
        let mut cfg = base.clone();
        let label = match param {
            SweepParam::RelationLayers => {
                cfg.relation_layers = v;
                format!("L'={v}")
            }
            SweepParam::K => {
                cfg.k = v;
                format!("k={v}")
            }
        };
        table.push(run_experiment(&cfg, data, &label)?.0);
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub user: usize,
    /// Interacted-item (train split) counts per category.
    pub categories: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub item: usize,
    pub log_prob: f64,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub user: usize,
    pub categories: BTreeMap<String, usize>,
    pub neighbors: Vec<NeighborReport>,
    pub recommendations: Vec<RecommendedItem>,
}

fn histogram(items: &[usize], categories: &[String]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for &v in items {
        *h.entry(categories[v].clone()).or_insert(0) += 1;
    }
    h
}

/// The user's relation-graph neighbours with their category histograms and
/// the model's top `top_m` items. `candidates` restricts DR decoding.
pub fn case_study(
    state: &ModelState,
    prep: &Prepared,
    user: usize,
    top_m: usize,
    categories: &[String],
    candidates: Option<&[usize]>,
) -> Result<CaseStudy> {
    let n_users = prep.slots.n_users;
    if user >= n_users {
        return Err(Error::IndexOutOfRange {
            index: user,
            len: n_users,
        });
    }
    if categories.len() != prep.slots.n_items {
        return Err(Error::shape(format!(
            "{} item categories for {} items",
            categories.len(),
            prep.slots.n_items
        )));
    }
    let neighbors = prep.relation_report.picks[user]
        .iter()
        .map(|&j| NeighborReport {
            user: j,
            categories: histogram(&prep.train_sequences[j], categories),
        })
        .collect();
    let rec = Recommender::new(state, prep)?;
    let history = &prep.train_sequences[user];
    let beam = top_m.max(state.config.eval_beam).max(1);
    let recommendations = rec
        .recommend(user, history, candidates, beam)?
        .into_iter()
        .take(top_m)
        .map(|(item, log_prob)| RecommendedItem {
            item,
            log_prob,
            category: categories[item].clone(),
        })
        .collect();
    Ok(CaseStudy {
        user,
        categories: histogram(history, categories),
        neighbors,
        recommendations,
    })
}
