//! Hungarian matching and the six pre-training objectives.

mod hungarian;
mod objectives;

pub use hungarian::{hungarian_match, Assignment};
pub use objectives::{
    cross_entropy_values, itm_loss, match_probabilities, mcr_loss, mcr_loss_graph, mcr_targets,
    sample_hard_negatives, sample_uniform_negatives, vsc_distributions, vsc_loss, vsc_loss_graph,
    wpg_hinge, wpg_loss_graph, wpg_similarity, wpg_similarity_graph, Negatives, SimilarityBlock,
    WPG_MARGIN,
};

use serde::{Deserialize, Serialize};

use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid loss input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Nn(NnError),
}

/// Per-objective sample counts of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCounts {
    pub pairs: usize,
    pub mcr_v_slots: usize,
    pub mcr_s_slots: usize,
    pub wpg_pairs: usize,
    /// Pairs left out of the grounding and phrase losses for lack of phrases.
    pub phrase_free: usize,
    pub itm_pairs: usize,
    pub mlm_tokens: usize,
}

/// One metrics-log record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub stage: u8,
    pub mcr_v: Option<f64>,
    pub mcr_s: Option<f64>,
    pub vsc: Option<f64>,
    pub wpg: Option<f64>,
    pub itm: Option<f64>,
    pub mlm: Option<f64>,
    pub total: f64,
    pub counts: LossCounts,
    pub tau: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("mcr_v", self.mcr_v),
            ("mcr_s", self.mcr_s),
            ("vsc", self.vsc),
            ("wpg", self.wpg),
            ("itm", self.itm),
            ("mlm", self.mlm),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite()
            && self
                .components()
                .iter()
                .all(|(_, v)| v.is_none_or(f64::is_finite))
    }
}
