use serde::{Deserialize, Serialize};

use crate::encoders::ArchConfig;
use crate::inputs::MaskingConfig;

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Caps the stage length; the schedule is laid out over the capped length.
    pub max_steps: Option<u64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_fraction: 0.2,
            weight_decay: 0.01,
            seed: 1,
            clip_norm: 1.0,
            max_steps: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("peak_lr and clip_norm must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// Which objectives contribute to the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub mcr_v: bool,
    pub mcr_s: bool,
    pub vsc: bool,
    pub wpg: bool,
    pub itm: bool,
    pub mlm: bool,
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles {
        mcr_v: true,
        mcr_s: true,
        vsc: true,
        wpg: true,
        itm: true,
        mlm: true,
    };
    pub const NONE: LossToggles = LossToggles {
        mcr_v: false,
        mcr_s: false,
        vsc: false,
        wpg: false,
        itm: false,
        mlm: false,
    };

    /// Retrieval fine-tuning objective.
    pub const RETRIEVAL: LossToggles = LossToggles {
        vsc: true,
        itm: true,
        ..Self::NONE
    };

    pub fn any(&self) -> bool {
        self.mcr_v || self.mcr_s || self.vsc || self.wpg || self.itm || self.mlm
    }

    /// The subset active in a training stage.
    pub fn for_stage(&self, stage: u8) -> LossToggles {
        if stage == 1 {
            LossToggles {
                wpg: false,
                itm: false,
                mlm: false,
                ..*self
            }
        } else {
            *self
        }
    }
}

/// A named combination of inputs, objectives and architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub tags: bool,
    pub phrases: bool,
    pub losses: LossToggles,
    pub merged: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self::full()
    }
}

impl Variant {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            tags: true,
            phrases: true,
            losses: LossToggles::ALL,
            merged: false,
        }
    }

    /// The six ablation rows: input subsets crossed with objective subsets.
    pub fn ablation_rows() -> Vec<Variant> {
        let v =
            |name: &str, tags: bool, phrases: bool, losses: LossToggles, merged: bool| Variant {
                name: name.into(),
                tags,
                phrases,
                losses,
                merged,
            };
        let no_mcr_v = LossToggles {
            mcr_v: false,
            ..LossToggles::ALL
        };
        let no_phrase_losses = LossToggles {
            mcr_s: false,
            wpg: false,
            ..LossToggles::ALL
        };
        let merged_losses = LossToggles {
            vsc: false,
            ..LossToggles::ALL
        };
        vec![
            v("wcrt/full", true, true, LossToggles::ALL, false),
            v("wcrt/no-mcr_v", true, true, no_mcr_v, false),
            v("wcr/no-mcr_v", false, true, no_mcr_v, false),
            v("wcrt/no-mcr_s-wpg", true, true, no_phrase_losses, false),
            v("wrt/no-mcr_s-wpg", true, false, no_phrase_losses, false),
            v("wcrt/merged", true, true, merged_losses, true),
        ]
    }

    /// Applies the dependency rules: no tags disables tag recovery, no
    /// phrases disables phrase recovery and grounding, and the merged model
    /// has no uni-modal contrastive stage.
    pub fn effective_losses(&self) -> LossToggles {
        let mut l = self.losses;
        if !self.tags {
            l.mcr_v = false;
        }
        if !self.phrases {
            l.mcr_s = false;
            l.wpg = false;
        }
        if self.merged {
            l.vsc = false;
        }
        l
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.effective_losses().any() {
            return Err(TrainError::InvalidConfig(format!(
                "variant `{}` enables no objective",
                self.name
            )));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a pre-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub min_phrase_freq: u64,
    pub mlm_masking: MaskingConfig,
    pub mcr_masking: MaskingConfig,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig {
                epochs: 10,
                peak_lr: 5e-3,
                seed: 2,
                ..StageConfig::default()
            },
            min_phrase_freq: 5,
            mlm_masking: MaskingConfig::mlm(),
            mcr_masking: MaskingConfig::mcr(),
            variant: Variant::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.variant.validate()
    }

    pub fn stage(&self, stage: u8) -> &StageConfig {
        if stage == 1 {
            &self.stage1
        } else {
            &self.stage2
        }
    }
}

/// Number of warmup steps for a schedule of `total` steps.
pub fn warmup_steps(total: u64, warmup_fraction: f64) -> u64 {
    (total as f64 * warmup_fraction + 1e-9).floor() as u64
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, config: &StageConfig) -> f64 {
    if step >= total {
        return 0.0;
    }
    let w = warmup_steps(total, config.warmup_fraction);
    if step < w {
        config.peak_lr * (step as f64 / w as f64)
    } else {
        config.peak_lr * ((total - step) as f64 / (total - w) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_breakpoints() {
        let c = StageConfig {
            peak_lr: 0.5,
            ..StageConfig::default()
        };
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert_eq!(lr_at(20, 100, &c), 0.5);
        assert_eq!(lr_at(10, 100, &c), 0.25);
        assert_eq!(lr_at(100, 100, &c), 0.0);
        assert_eq!(lr_at(60, 100, &c), 0.25);
    }

    #[test]
    fn six_rows_are_valid() {
        let rows = Variant::ablation_rows();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            r.validate().unwrap();
        }
        assert!(!rows[2].effective_losses().mcr_v);
        assert!(!rows[4].effective_losses().wpg);
    }

    #[test]
    fn empty_objective_is_rejected() {
        let v = Variant {
            losses: LossToggles {
                mcr_v: true,
                ..LossToggles::NONE
            },
            tags: false,
            ..Variant::full()
        };
        assert!(v.validate().is_err());
    }
}
