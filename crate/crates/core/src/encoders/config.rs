use serde::{Deserialize, Serialize};

use crate::inputs::{SequenceCaps, Vocabs};

use super::EncoderError;

/// Architecture hyperparameters independent of the vocabularies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub layers_text: usize,
    pub layers_visual: usize,
    pub layers_mm: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    /// 1-based multi-modal layer whose output feeds the grounding features.
    pub wpg_layer: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub seed: u64,
    pub caps: SequenceCaps,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            layers_text: 2,
            layers_visual: 2,
            layers_mm: 2,
            hidden: 64,
            heads: 4,
            ff: 128,
            wpg_layer: 1,
            dropout: 0.0,
            init_std: 0.02,
            tau_init: 0.07,
            tau_min: 0.01,
            seed: 17,
            caps: SequenceCaps::default(),
        }
    }
}

impl ArchConfig {
    /// A very small configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            hidden: 16,
            heads: 2,
            ff: 32,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub arch: ArchConfig,
    pub vocab_tokens: usize,
    pub vocab_phrases: usize,
    pub num_tags: usize,
    /// Region feature width (prototype dims + 6 box dims).
    pub feat_width: usize,
    /// Single-stream variant: `[cls, w, c, t, r]` through text then multi-modal layers.
    pub merged: bool,
}

impl ModelConfig {
    pub fn new(arch: ArchConfig, vocabs: &Vocabs, feat_width: usize) -> Self {
        Self {
            arch,
            vocab_tokens: vocabs.tokens.len(),
            vocab_phrases: vocabs.phrases.len(),
            num_tags: vocabs.tokens.num_tags(),
            feat_width,
            merged: false,
        }
    }

    /// Desk-scale defaults sized to the given vocabularies.
    pub fn desk(vocabs: &Vocabs, feat_width: usize) -> Self {
        Self::new(ArchConfig::default(), vocabs, feat_width)
    }

    pub fn tiny(vocabs: &Vocabs, feat_width: usize) -> Self {
        Self::new(ArchConfig::tiny(), vocabs, feat_width)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let a = &self.arch;
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if a.heads == 0 || !a.hidden.is_multiple_of(a.heads) {
            return bad(format!(
                "hidden {} not divisible by {} heads",
                a.hidden, a.heads
            ));
        }
        if a.wpg_layer < 1 || a.wpg_layer > a.layers_mm {
            return bad(format!(
                "wpg_layer {} outside 1..={}",
                a.wpg_layer, a.layers_mm
            ));
        }
        if a.layers_text == 0 || (!self.merged && a.layers_visual == 0) {
            return bad("every encoder needs at least one layer".into());
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return bad(format!("dropout {} outside [0, 1)", a.dropout));
        }
        if !(a.tau_min > 0.0 && a.tau_init >= a.tau_min) {
            return bad("temperature must satisfy 0 < tau_min <= tau_init".into());
        }
        if !(a.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        if self.feat_width == 0 || self.num_tags == 0 {
            return bad("feature width and tag vocabulary must be non-empty".into());
        }
        Ok(())
    }

    /// Layer index (1-based over the whole stack) of the grounding features.
    pub fn grounding_depth(&self) -> usize {
        if self.merged {
            self.arch.layers_text + self.arch.wpg_layer
        } else {
            self.arch.wpg_layer
        }
    }
}
