use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Model, ModelConfig};
use crate::inputs::{VocabFiles, Vocabs};
use crate::losses::LossReport;
use crate::nn::{container, OptimState};
use crate::scalar::Scalar;

use super::{TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub sum: f64,
    pub count: u64,
}

impl RunningMean {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optim: OptimState<T>,
    pub stage: u8,
    pub epoch: usize,
    /// Next batch index within the current epoch.
    pub cursor: usize,
    /// Pair order of the current epoch (empty before the first batch).
    pub order: Vec<usize>,
    pub global_step: u64,
    pub stage_step: u64,
    pub rng: ChaCha8Rng,
    /// Per-objective means over the current stage.
    pub running: BTreeMap<String, RunningMean>,
}

impl<T: Scalar> TrainState<T> {
    pub(super) fn record(&mut self, report: &LossReport) {
        let mut add = |k: &str, v: f64| {
            let e = self.running.entry(k.to_string()).or_default();
            e.sum += v;
            e.count += 1;
        };
        add("total", report.total);
        for (k, v) in report.components() {
            if let Some(v) = v {
                add(k, v);
            }
        }
    }
}

/// ChaCha state as strings (JSON numbers cannot carry 128 bits).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let bad = |what: &str| TrainError::Meta(format!("bad rng {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// JSON metadata stored in the checkpoint container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocabs: VocabFiles,
    pub stage: u8,
    pub epoch: usize,
    pub cursor: usize,
    pub order: Vec<usize>,
    pub global_step: u64,
    pub stage_step: u64,
    pub rng: RngState,
    pub running: BTreeMap<String, RunningMean>,
}

const FORMAT: &str = "mlalign-train-state";

/// A loaded checkpoint: the state plus what is needed to rebuild a trainer.
pub struct Checkpoint<T> {
    pub state: TrainState<T>,
    pub train_config: TrainConfig,
    pub vocabs: Vocabs,
}

pub fn checkpoint_save<T: Scalar>(
    state: &TrainState<T>,
    train_config: &TrainConfig,
    vocabs: &Vocabs,
    path: &Path,
) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        model_config: state.model.config.clone(),
        train_config: train_config.clone(),
        vocabs: vocabs.to_files(),
        stage: state.stage,
        epoch: state.epoch,
        cursor: state.cursor,
        order: state.order.clone(),
        global_step: state.global_step,
        stage_step: state.stage_step,
        rng: RngState::capture(&state.rng),
        running: state.running.clone(),
    };
    let json = serde_json::to_string(&meta)?;
    container::write_container(path, &json, &state.model.params, Some(&state.optim))?;
    Ok(())
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, TrainError> {
    let c = container::read_container::<T>(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&c.meta)?;
    if meta.format != FORMAT {
        return Err(TrainError::Meta(format!(
            "unexpected format `{}`",
            meta.format
        )));
    }
    let vocabs = Vocabs::from_files(&meta.vocabs)?;
    let mut model = Model::from_vocabs(meta.model_config, &vocabs)?;
    if model.params.len() != c.params.len() {
        return Err(TrainError::Meta(format!(
            "checkpoint has {} parameters, model expects {}",
            c.params.len(),
            model.params.len()
        )));
    }
    for ((_, a), (_, b)) in model.params.iter().zip(c.params.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(TrainError::Meta(format!(
                "parameter `{}` does not match `{}`",
                b.name, a.name
            )));
        }
    }
    model.params = c.params;
    let optim = c
        .optim
        .ok_or_else(|| TrainError::Meta("checkpoint has no optimizer state".into()))?;
    Ok(Checkpoint {
        state: TrainState {
            model,
            optim,
            stage: meta.stage,
            epoch: meta.epoch,
            cursor: meta.cursor,
            order: meta.order,
            global_step: meta.global_step,
            stage_step: meta.stage_step,
            rng: meta.rng.restore()?,
            running: meta.running,
        },
        train_config: meta.train_config,
        vocabs,
    })
}
