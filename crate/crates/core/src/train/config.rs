use serde::{Deserialize, Serialize};

use crate::align::{DistillDenominator, DEFAULT_TAU};
use crate::embed::{adapter_hidden_width, AdapterActivation};
use crate::error::{Error, Result};
use crate::genrec::{Task, DEFAULT_BETA, DEFAULT_PROMPTS};
use crate::graphs::RelationSymmetrize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Drop the distillation term (DR).
    pub no_distill: bool,
    /// Drop the sequential alignment term (SR).
    pub no_seq_loss: bool,
    /// Replace the reduced item semantics with seeded random inputs.
    pub no_item_semantics: bool,
    /// Bypass the adapter with a fixed random projection to width d.
    pub no_adapter: bool,
}

/// Which semantic texts feed the user/item embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "uPos")]
    UserPositive,
    #[serde(rename = "uNeg")]
    UserNegative,
    #[serde(rename = "vPos")]
    ItemPositive,
    #[serde(rename = "vNeg")]
    ItemNegative,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::UserPositive,
        Variant::UserNegative,
        Variant::ItemPositive,
        Variant::ItemNegative,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::UserPositive => "uPos",
            Variant::UserNegative => "uNeg",
            Variant::ItemPositive => "vPos",
            Variant::ItemNegative => "vNeg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    /// Interaction-graph layers `L`.
    pub layers: usize,
    /// Relation-graph layers `L'`.
    pub relation_layers: usize,
    /// Neighbours per user in the relation graph.
    pub k: usize,
    pub tau: f64,
    pub beta: f64,
    pub d_m: usize,
    pub d: usize,
    pub n_prompts: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablations,
    pub variant: Variant,
    pub adapter_activation: AdapterActivation,
    pub relation_symmetrize: RelationSymmetrize,
    pub distill_denominator: DistillDenominator,
    pub gen_weight: f64,
    pub align_weight: f64,
    /// Most recent items shown in an SR prompt.
    pub max_history: usize,
    /// Beam width used for validation during `fit`.
    pub eval_beam: usize,
    /// Negatives per validation candidate set (DR).
    pub n_neg: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Sr,
            layers: 2,
            relation_layers: 3,
            k: 10,
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
            d_m: 64,
            d: 512,
            n_prompts: DEFAULT_PROMPTS,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            ablation: Ablations::default(),
            variant: Variant::Full,
            adapter_activation: AdapterActivation::None,
            relation_symmetrize: RelationSymmetrize::Union,
            distill_denominator: DistillDenominator::Diagonal,
            gen_weight: 1.0,
            align_weight: 1.0,
            max_history: 10,
            eval_beam: 20,
            n_neg: crate::data::DEFAULT_NEGATIVES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_m", self.d_m),
            ("n_prompts", self.n_prompts),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("max_history", self.max_history),
            ("eval_beam", self.eval_beam),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(self.beta >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("beta and learning_rate must be non-negative"));
        }
        if !(self.gen_weight >= 0.0) || !(self.align_weight >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        adapter_hidden_width(self.d_m, self.d)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
