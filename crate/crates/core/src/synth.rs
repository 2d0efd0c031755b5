//! Planted-group synthetic data.
//!
//! Users and items belong to latent groups with orthogonal centroids;
//! semantic vectors are noisy copies of their centroid and interactions are
//! drawn from a softmax over user-item affinity.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::graphs::NormalizedGraph;
use crate::tensor::{Dtype, EmbeddingMatrix, Mat, Space};
use crate::train::SemanticViews;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_groups: usize,
    pub items_per_user: usize,
    /// Mixing weight of the random direction, in `[0, 1]`.
    pub noise: f64,
    pub embed_dim: usize,
    pub seed: u64,
    /// Softmax temperature over cosine affinity when drawing interactions.
    pub temperature: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            n_groups: 4,
            items_per_user: 8,
            noise: 0.2,
            embed_dim: 32,
            seed: 0,
            temperature: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_groups > self.n_users.min(self.n_items) {
            return Err(Error::invalid(format!(
                "n_groups = {} must be in 1..={}",
                self.n_groups,
                self.n_users.min(self.n_items)
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        if self.embed_dim < self.n_groups {
            return Err(Error::invalid(
                "embed_dim must be at least n_groups for orthogonal centroids",
            ));
        }
        if self.items_per_user < crate::data::MIN_INTERACTIONS || self.items_per_user > self.n_items {
            return Err(Error::invalid(format!(
                "items_per_user must be in {}..={}",
                crate::data::MIN_INTERACTIONS,
                self.n_items
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Generated data plus ground truth. Items are numbered in order of first
/// appearance and never-drawn items are dropped, so a dataset written with
/// [`PlantedData::write`] reloads with identical indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedData {
    pub dataset: InteractionDataset,
    pub users: SemanticViews,
    pub items: SemanticViews,
    pub user_groups: Vec<usize>,
    pub item_groups: Vec<usize>,
}

impl PlantedData {
    pub fn item_categories(&self) -> Vec<String> {
        self.item_groups.iter().map(|g| format!("group{g}")).collect()
    }

    /// Writes `interactions.txt`, `{users,items}{,_pos,_neg}.emb`,
    /// `categories.txt` and `groups.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.dataset.save(dir.join("interactions.txt"))?;
        for (name, views) in [("users", &self.users), ("items", &self.items)] {
            let save = |suffix: &str, m: &Mat| {
                EmbeddingMatrix::new(m.clone(), Space::Raw).save(dir.join(format!("{name}{suffix}.emb")), Dtype::F64)
            };
            save("", &views.fused)?;
            if let Some(m) = &views.positive {
                save("_pos", m)?;
            }
            if let Some(m) = &views.negative {
                save("_neg", m)?;
            }
        }
        fs::write(dir.join("categories.txt"), self.item_categories().join("\n") + "\n")?;
        let truth = serde_json::json!({
            "user_groups": self.user_groups,
            "item_groups": self.item_groups,
        });
        fs::write(dir.join("groups.json"), serde_json::to_string_pretty(&truth)?)?;
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            return v / n;
        }
    }
}

/// `normalize((1 - noise) * e_group + noise * r)` per row, `r` a random unit
/// vector; the group centroids are standard basis vectors.
fn noisy_rows(groups: &[usize], dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> Mat {
    let mut out = Mat::zeros((groups.len(), dim));
    for (mut row, &g) in out.rows_mut().into_iter().zip(groups) {
        let r = unit_gaussian(rng, dim);
        let mut v = r * noise;
        v[g] += 1.0 - noise;
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            v /= n;
        }
        row.assign(&v);
    }
    out
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// one at a time.
fn draw_without_replacement(weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = w.iter().rposition(|&p| p > 0.0).expect("enough positive weights");
        for (i, &p) in w.iter().enumerate() {
            if p > 0.0 && x < p {
                pick = i;
                break;
            }
            x -= p;
        }
        out.push(pick);
        w[pick] = 0.0;
    }
    out
}

pub fn generate_planted(cfg: &SynthConfig) -> Result<PlantedData> {
    cfg.validate()?;
    let user_groups: Vec<usize> = (0..cfg.n_users).map(|u| u % cfg.n_groups).collect();
    let item_groups: Vec<usize> = (0..cfg.n_items).map(|v| v % cfg.n_groups).collect();
    let neg_noise = (2.0 * cfg.noise).min(1.0);

    let s_u = noisy_rows(&user_groups, cfg.embed_dim, cfg.noise, &mut stream(cfg.seed, 1));
    let s_v = noisy_rows(&item_groups, cfg.embed_dim, cfg.noise, &mut stream(cfg.seed, 2));
    let u_pos = noisy_rows(&user_groups, cfg.embed_dim, cfg.noise, &mut stream(cfg.seed, 3));
    let u_neg = noisy_rows(&user_groups, cfg.embed_dim, neg_noise, &mut stream(cfg.seed, 4));
    let v_pos = noisy_rows(&item_groups, cfg.embed_dim, cfg.noise, &mut stream(cfg.seed, 5));
    let v_neg = noisy_rows(&item_groups, cfg.embed_dim, neg_noise, &mut stream(cfg.seed, 6));

    let mut rng = stream(cfg.seed, 7);
    let raw: Vec<Vec<usize>> = (0..cfg.n_users)
        .map(|u| {
            let aff = s_v.dot(&s_u.row(u));
            let max = aff.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = aff.iter().map(|a| ((a - max) / cfg.temperature).exp()).collect();
            draw_without_replacement(&w, cfg.items_per_user, &mut rng)
        })
        .collect();

    // renumber items by first appearance, dropping unused ones
    let mut new_index = vec![usize::MAX; cfg.n_items];
    let mut order = Vec::new();
    for &v in raw.iter().flatten() {
        if new_index[v] == usize::MAX {
            new_index[v] = order.len();
            order.push(v);
        }
    }
    let sequences: Vec<Vec<usize>> = raw.iter().map(|s| s.iter().map(|&v| new_index[v]).collect()).collect();
    let pick = |m: &Mat| m.select(ndarray::Axis(0), &order);

    Ok(PlantedData {
        dataset: InteractionDataset::from_sequences(sequences, order.len())?,
        users: SemanticViews {
            fused: s_u,
            positive: Some(u_pos),
            negative: Some(u_neg),
        },
        items: SemanticViews {
            fused: pick(&s_v),
            positive: Some(pick(&v_pos)),
            negative: Some(pick(&v_neg)),
        },
        user_groups,
        item_groups: order.iter().map(|&v| item_groups[v]).collect(),
    })
}

/// Fraction of relation-graph edges (self loops excluded) joining users of
/// the same ground-truth group; 1.0 for an edgeless graph.
pub fn group_recovery_score(graph: &NormalizedGraph, truth: &[usize]) -> Result<f64> {
    if truth.len() != graph.n {
        return Err(Error::shape(format!("{} labels for {} nodes", truth.len(), graph.n)));
    }
    let (mut same, mut total) = (0usize, 0usize);
    for i in 0..graph.n {
        for &j in graph.neighbors(i) {
            if i != j {
                total += 1;
                same += usize::from(truth[i] == truth[j]);
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { same as f64 / total as f64 })
}
