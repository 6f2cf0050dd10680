use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig};
use crate::inputs::Vocabs;
use crate::scalar::Scalar;
use crate::trainer::{TrainConfig, Trainer, Variant};

use super::{eval_pairs, grounding_eval, retrieval_eval, EvalError, GroundingMode, RerankDepths};

/// A variant given by ablation-row name or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    Named(String),
    Custom(Variant),
}

impl VariantSpec {
    pub fn resolve(&self) -> Result<Variant, EvalError> {
        match self {
            VariantSpec::Custom(v) => Ok(v.clone()),
            VariantSpec::Named(name) => Variant::ablation_rows()
                .into_iter()
                .chain([Variant::full()])
                .find(|v| &v.name == name)
                .ok_or_else(|| EvalError::InvalidInput(format!("unknown variant `{name}`"))),
        }
    }
}

/// Input file of the `ablate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationMatrix {
    pub corpus: CorpusConfig,
    pub n_eval: usize,
    pub train: TrainConfig,
    pub variants: Vec<VariantSpec>,
    /// Total optimizer steps per variant (split 1:2 between the stages).
    pub step_budget: Option<u64>,
    pub depths: RerankDepths,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            n_eval: 100,
            train: TrainConfig::default(),
            variants: Variant::ablation_rows()
                .into_iter()
                .map(VariantSpec::Custom)
                .collect(),
            step_budget: Some(200),
            depths: RerankDepths::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub steps: u64,
    pub final_loss: f64,
    pub rsum: f64,
    pub coarse_rsum: Option<f64>,
    /// Absent when the variant has no phrase inputs.
    pub grounding_concept: Option<f64>,
    pub grounding_token: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub grounding_chance: f64,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates every variant on the same corpora and seeds.
pub fn ablation_run<T: Scalar>(
    variants: &[Variant],
    base: &TrainConfig,
    train: &Corpus,
    eval: &Corpus,
    vocabs: &Vocabs,
    step_budget: Option<u64>,
    depths: RerankDepths,
) -> Result<AblationReport, EvalError> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut chance = 0.0;
    for v in variants {
        let mut config = base.clone();
        config.variant = v.clone();
        if let Some(b) = step_budget {
            if v.merged {
                config.stage2.max_steps = Some(b);
            } else {
                config.stage1.max_steps = Some(b / 3);
                config.stage2.max_steps = Some(b - b / 3);
            }
        }
        let trainer = Trainer::new(config, train, vocabs.clone())?;
        let mut final_loss = f64::NAN;
        let state = trainer.run::<T, Vec<u8>>(None).inspect(|s| {
            final_loss = s
                .running
                .get("total")
                .and_then(|m| m.mean())
                .unwrap_or(f64::NAN);
        })?;
        let pairs = eval_pairs(eval, vocabs, &trainer.config.arch.caps, v)?;
        let retrieval = retrieval_eval(&state.model, &pairs, depths)?;
        let (mut concept, mut token) = (None, None);
        if v.phrases {
            let c = grounding_eval(&state.model, eval, &pairs, GroundingMode::Concept)?;
            chance = c.chance_baseline;
            concept = Some(c.accuracy);
            token =
                Some(grounding_eval(&state.model, eval, &pairs, GroundingMode::Token)?.accuracy);
        }
        rows.push(AblationRow {
            variant: v.name.clone(),
            steps: state.global_step,
            final_loss,
            rsum: retrieval.rsum,
            coarse_rsum: retrieval.coarse_rsum,
            grounding_concept: concept,
            grounding_token: token,
        });
    }
    Ok(AblationReport {
        train_pairs: train.len(),
        eval_pairs: eval.len(),
        grounding_chance: chance,
        rows,
    })
}

impl AblationReport {
    /// Fixed-width comparison table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>6} {:>9} {:>8} {:>8} {:>9} {:>9}\n",
            "variant", "steps", "loss", "rsum", "coarse", "g.concept", "g.token"
        );
        for r in &self.rows {
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |c| format!("{c:.p$}"));
            s.push_str(&format!(
                "{:<22} {:>6} {:>9.4} {:>8.1} {:>8} {:>9} {:>9}\n",
                r.variant,
                r.steps,
                r.final_loss,
                r.rsum,
                opt(r.coarse_rsum, 1),
                opt(r.grounding_concept, 3),
                opt(r.grounding_token, 3)
            ));
        }
        s.push_str(&format!(
            "grounding chance 1/K = {:.3}\n",
            self.grounding_chance
        ));
        s
    }
}
