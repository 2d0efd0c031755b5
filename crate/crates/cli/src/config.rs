//! Pipeline config: one JSON file with a section per stage. Relative paths
//! are resolved against the config file's directory. Command-line flags
//! override config values, which override built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use isrf_core::data::{load_interactions, split_leave_one_out, InteractionDataset, LoadReport};
use isrf_core::eval::{ExperimentData, SrRanking};
use isrf_core::genrec::Task;
use isrf_core::synth::SynthConfig;
use isrf_core::tensor::EmbeddingMatrix;
use isrf_core::train::{SemanticViews, TrainConfig, TrainData};
use isrf_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub interactions: Option<PathBuf>,
    /// Negatives per DR candidate set.
    pub n_neg: Option<usize>,
    /// Seed for candidate sampling.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticsSection {
    pub users: Option<PathBuf>,
    pub users_pos: Option<PathBuf>,
    pub users_neg: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub items_pos: Option<PathBuf>,
    pub items_neg: Option<PathBuf>,
    /// One category label per item, one per line.
    pub categories: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonSection {
    pub model: String,
    pub max_in_flight: usize,
    /// Items sampled from each history for user prompts.
    pub sample: usize,
    pub seed: u64,
}

impl Default for ReasonSection {
    fn default() -> Self {
        Self {
            model: "default".into(),
            max_in_flight: 4,
            sample: isrf_core::reason::DEFAULT_USER_SAMPLE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub beam: Option<usize>,
    pub sr_ranking: SrRanking,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub semantics: SemanticsSection,
    pub reason: ReasonSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub synth: SynthConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub raw_hash: Option<String>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                base_dir: PathBuf::from("."),
                ..Self::default()
            });
        };
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.raw_hash = Some(isrf_core::manifest::sha256_bytes(text.as_bytes()));
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn required(&self, p: &Option<PathBuf>, what: &'static str) -> Result<PathBuf> {
        p.as_deref()
            .map(|p| self.resolve(p))
            .ok_or(Error::MissingContext { stage: "config", what })
    }

    pub fn interactions_path(&self) -> Result<PathBuf> {
        self.required(&self.data.interactions, "data.interactions")
    }

    pub fn n_neg(&self) -> usize {
        self.data.n_neg.unwrap_or(self.train.n_neg)
    }

    pub fn experiment_data(&self, task: Task) -> Result<ExperimentData> {
        ExperimentData::with_ranking(
            self.train_data()?,
            task,
            self.eval.sr_ranking,
            self.n_neg(),
            self.data_seed(),
        )
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.train.seed)
    }

    pub fn beam(&self) -> usize {
        self.eval.beam.unwrap_or(self.train.eval_beam)
    }

    pub fn load_dataset(&self) -> Result<(InteractionDataset, LoadReport)> {
        load_interactions(self.interactions_path()?)
    }

    fn load_optional(&self, p: &Option<PathBuf>) -> Result<Option<isrf_core::tensor::Mat>> {
        p.as_deref()
            .map(|p| EmbeddingMatrix::load(self.resolve(p)).map(|m| m.values))
            .transpose()
    }

    pub fn semantic_inputs(&self) -> Result<Vec<PathBuf>> {
        let s = &self.semantics;
        Ok([
            &s.users,
            &s.users_pos,
            &s.users_neg,
            &s.items,
            &s.items_pos,
            &s.items_neg,
        ]
        .into_iter()
        .flatten()
        .map(|p| self.resolve(p))
        .collect())
    }

    pub fn train_data(&self) -> Result<TrainData> {
        let (dataset, _) = self.load_dataset()?;
        let splits = split_leave_one_out(&dataset)?;
        let s = &self.semantics;
        let users = SemanticViews {
            fused: EmbeddingMatrix::load(self.required(&s.users, "semantics.users")?)?.values,
            positive: self.load_optional(&s.users_pos)?,
            negative: self.load_optional(&s.users_neg)?,
        };
        let items = SemanticViews {
            fused: EmbeddingMatrix::load(self.required(&s.items, "semantics.items")?)?.values,
            positive: self.load_optional(&s.items_pos)?,
            negative: self.load_optional(&s.items_neg)?,
        };
        Ok(TrainData {
            dataset,
            splits,
            users,
            items,
        })
    }

    pub fn categories(&self, n_items: usize) -> Result<Vec<String>> {
        match &self.semantics.categories {
            Some(p) => {
                let text = fs::read_to_string(self.resolve(p))?;
                let cats: Vec<String> = text.lines().map(str::to_owned).collect();
                if cats.len() != n_items {
                    return Err(Error::Shape(format!("{} categories for {n_items} items", cats.len())));
                }
                Ok(cats)
            }
            None => Ok(vec!["unknown".to_owned(); n_items]),
        }
    }
}
