//! Two-stage pre-training: batching, hard-negative mining, schedules,
//! checkpointing and metrics.

mod config;
mod objective;
mod state;

pub use config::{lr_at, warmup_steps, LossToggles, StageConfig, TrainConfig, Variant};
pub use objective::{forward_batch, plan_batch, prepare_pairs, BatchPlan, Forward, PreparedPair};
pub use state::{
    checkpoint_load, checkpoint_save, Checkpoint, CheckpointMeta, RngState, RunningMean, TrainState,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::encoders::{EncoderError, Model, ModelConfig};
use crate::inputs::{InputError, Masker, Vocabs};
use crate::losses::{LossError, LossReport};
use crate::nn::{adamw_step, AdamWConfig, NnError, OptimState};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("batch of {0} pairs is too small for in-batch negatives")]
    BatchTooSmall(usize),
    #[error("no objective produced a loss for this batch")]
    NoObjective,
    #[error("non-finite loss at step {0}")]
    NonFinite(u64),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable inputs of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub vocabs: Vocabs,
    pub pairs: Vec<PreparedPair>,
    pub masker: Masker,
    pub feat_width: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &Corpus, vocabs: Vocabs) -> Result<Self, TrainError> {
        config.validate()?;
        let pairs = prepare_pairs(corpus, &vocabs, &config.arch.caps, &config.variant);
        if pairs.len() < 2 {
            return Err(TrainError::BatchTooSmall(pairs.len()));
        }
        let masker = Masker::new(&vocabs, config.mlm_masking, config.mcr_masking);
        Ok(Self {
            feat_width: corpus.header.config.feat_dim + 6,
            config,
            vocabs,
            pairs,
            masker,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.config.arch.clone(), &self.vocabs, self.feat_width);
        c.merged = self.config.variant.merged;
        c
    }

    /// The merged variant has no uni-modal stage and starts at stage 2.
    pub fn first_stage(&self) -> u8 {
        if self.config.variant.merged {
            2
        } else {
            1
        }
    }

    pub fn batch_size(&self, stage: u8) -> usize {
        self.config.stage(stage).batch_size.min(self.pairs.len())
    }

    pub fn steps_per_epoch(&self, stage: u8) -> usize {
        self.pairs.len() / self.batch_size(stage)
    }

    pub fn total_steps(&self, stage: u8) -> u64 {
        let sc = self.config.stage(stage);
        let n = (sc.epochs * self.steps_per_epoch(stage)) as u64;
        sc.max_steps.map_or(n, |m| n.min(m))
    }

    pub fn losses(&self, stage: u8) -> LossToggles {
        self.config.variant.effective_losses().for_stage(stage)
    }

    /// A fresh model positioned at the start of the first stage.
    pub fn init_state<T: Scalar>(&self) -> Result<TrainState<T>, TrainError> {
        let model = Model::from_vocabs(self.model_config(), &self.vocabs)?;
        let optim = OptimState::new(&model.params, AdamWConfig::default());
        let mut state = TrainState {
            model,
            optim,
            stage: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            global_step: 0,
            stage_step: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            running: Default::default(),
        };
        self.enter_stage(&mut state, self.first_stage());
        Ok(state)
    }

    /// Switches to stage 2: the multi-modal encoder is redrawn from the
    /// stage-2 seed and the optimizer moments are reset.
    pub fn begin_stage2<T: Scalar>(&self, state: &mut TrainState<T>) {
        state.model.reinit_multimodal(self.config.stage2.seed);
        self.enter_stage(state, 2);
    }

    fn enter_stage<T: Scalar>(&self, state: &mut TrainState<T>, stage: u8) {
        let sc = self.config.stage(stage);
        state.model.set_stage(stage);
        state.optim = OptimState::new(
            &state.model.params,
            AdamWConfig {
                lr: 0.0,
                weight_decay: sc.weight_decay,
                ..AdamWConfig::default()
            },
        );
        state.stage = stage;
        state.epoch = 0;
        state.cursor = 0;
        state.stage_step = 0;
        state.order.clear();
        state.rng = ChaCha8Rng::seed_from_u64(sc.seed);
        state.running.clear();
    }

    pub fn stage_done<T: Scalar>(&self, state: &TrainState<T>) -> bool {
        state.stage_step >= self.total_steps(state.stage)
    }

    /// One optimizer step on the next batch of the current stage.
    pub fn train_step<T: Scalar>(
        &self,
        state: &mut TrainState<T>,
    ) -> Result<LossReport, TrainError> {
        let stage = state.stage;
        let sc = self.config.stage(stage);
        let bs = self.batch_size(stage);
        if bs < 2 {
            return Err(TrainError::BatchTooSmall(bs));
        }
        if state.order.is_empty() || state.cursor >= self.steps_per_epoch(stage) {
            if !state.order.is_empty() {
                state.epoch += 1;
            }
            state.order = (0..self.pairs.len()).collect();
            state.order.shuffle(&mut state.rng);
            state.cursor = 0;
        }
        let batch: Vec<&PreparedPair> = state.order[state.cursor * bs..(state.cursor + 1) * bs]
            .iter()
            .map(|&i| &self.pairs[i])
            .collect();
        let losses = self.losses(stage);
        let plan = plan_batch(&batch, &self.masker, &losses, &mut state.rng);
        let training = self.config.arch.dropout > 0.0;
        let fwd = forward_batch(
            &state.model,
            &self.vocabs,
            &batch,
            &plan,
            &losses,
            None,
            &mut state.rng,
            training,
        )?;
        if !fwd.report.total.is_finite() {
            return Err(TrainError::NonFinite(state.global_step));
        }
        let grads = fwd.graph.backward(fwd.total)?;
        state.model.params.zero_grad();
        fwd.graph
            .accumulate_param_grads(&grads, &mut state.model.params);
        state.model.params.clip_grad_norm(T::lit(sc.clip_norm));
        let lr = lr_at(state.stage_step, self.total_steps(stage), sc);
        state.optim.config.lr = lr;
        adamw_step(&mut state.model.params, &mut state.optim)?;
        state.model.clamp_tau();

        let mut report = fwd.report;
        report.step = state.global_step;
        report.stage = stage;
        report.lr = lr;
        state.record(&report);
        state.cursor += 1;
        state.stage_step += 1;
        state.global_step += 1;
        Ok(report)
    }

    /// Runs the current stage to completion, writing one JSON line per step.
    pub fn run_stage<T: Scalar, W: Write>(
        &self,
        state: &mut TrainState<T>,
        mut metrics: Option<&mut W>,
    ) -> Result<Vec<LossReport>, TrainError> {
        let mut out = Vec::new();
        while !self.stage_done(state) {
            let r = self.train_step(state)?;
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &r)?;
                w.write_all(b"\n")?;
            }
            out.push(r);
        }
        Ok(out)
    }

    /// Both stages (or the single merged stage) from a fresh model.
    pub fn run<T: Scalar, W: Write>(
        &self,
        mut metrics: Option<&mut W>,
    ) -> Result<TrainState<T>, TrainError> {
        let mut state = self.init_state::<T>()?;
        if state.stage == 1 {
            self.run_stage(&mut state, metrics.as_deref_mut())?;
            self.begin_stage2(&mut state);
        }
        self.run_stage(&mut state, metrics)?;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;
    use crate::encoders::{is_multimodal_param, ArchConfig};
    use crate::inputs::build_vocabs;

    fn small(n: usize, variant: Variant) -> Trainer {
        let corpus = Corpus::generate(CorpusConfig {
            n_pairs: n,
            ..CorpusConfig::default()
        })
        .unwrap();
        let vocabs = build_vocabs(&corpus, 1).unwrap();
        let config = TrainConfig {
            arch: ArchConfig::tiny(),
            stage1: StageConfig {
                epochs: 1,
                batch_size: 4,
                ..StageConfig::default()
            },
            stage2: StageConfig {
                epochs: 1,
                batch_size: 4,
                seed: 2,
                ..StageConfig::default()
            },
            variant,
            ..TrainConfig::default()
        };
        Trainer::new(config, &corpus, vocabs).unwrap()
    }

    #[test]
    fn stage_one_leaves_multimodal_untouched() {
        let t = small(12, Variant::full());
        let mut s = t.init_state::<f64>().unwrap();
        let before = s.model.params.clone();
        let reports = t.run_stage::<f64, Vec<u8>>(&mut s, None).unwrap();
        assert_eq!(reports.len(), 3);
        for (id, p) in s.model.params.iter() {
            if is_multimodal_param(&p.name) {
                assert_eq!(p.value, before.get(id).value, "{}", p.name);
                assert!(p.grad.as_ref().unwrap().data().iter().all(|&g| g == 0.0));
            }
        }
        assert!(reports.iter().all(|r| r.itm.is_none() && r.vsc.is_some()));
    }

    #[test]
    fn every_row_runs_a_step() {
        for v in Variant::ablation_rows() {
            let t = small(8, v.clone());
            let mut s = t.init_state::<f64>().unwrap();
            if s.stage == 1 {
                t.train_step(&mut s).unwrap();
                t.begin_stage2(&mut s);
            }
            let r = t.train_step(&mut s).unwrap();
            assert!(r.all_finite(), "{}", v.name);
            let l = v.effective_losses();
            assert_eq!(r.itm.is_some(), l.itm, "{}", v.name);
            assert_eq!(r.vsc.is_some(), l.vsc, "{}", v.name);
        }
    }

    #[test]
    fn tiny_corpus_is_rejected() {
        let corpus = Corpus::generate(CorpusConfig {
            n_pairs: 1,
            ..CorpusConfig::default()
        })
        .unwrap();
        let vocabs = build_vocabs(&corpus, 1).unwrap();
        assert!(matches!(
            Trainer::new(TrainConfig::default(), &corpus, vocabs),
            Err(TrainError::BatchTooSmall(1))
        ));
    }
}
