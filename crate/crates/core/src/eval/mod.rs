//! Retrieval with coarse-then-rerank inference, phrase grounding, the
//! ablation runner and embedding export.

mod ablation;
mod grounding;
mod retrieval;

pub use ablation::{ablation_run, AblationMatrix, AblationReport, AblationRow, VariantSpec};
pub use grounding::{grounding_eval, GroundingMode, GroundingPrediction, GroundingReport};
pub use retrieval::{
    coarse_rank, cosine, exhaustive_ranking, recalls_from_ranks, rerank, retrieval_eval, Recalls,
    RerankDepths, RetrievalReport,
};

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::Corpus;
use crate::encoders::Model;
use crate::inputs::{SequenceCaps, TextSequence, VisualSequence, Vocabs};
use crate::losses::match_probabilities;
use crate::nn::{Graph, NnError};
use crate::scalar::Scalar;
use crate::trainer::{prepare_pairs, PreparedPair, TrainError, Variant};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty candidate index")]
    EmptyIndex,
    #[error("duplicate pair id {0} in the evaluation set")]
    DuplicatePairId(u64),
    #[error("no evaluation pair carries a phrase")]
    NoPhrases,
    #[error("invalid evaluation input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Eval sequences for a corpus, rejecting duplicate pair ids.
pub fn eval_pairs(
    corpus: &Corpus,
    vocabs: &Vocabs,
    caps: &SequenceCaps,
    variant: &Variant,
) -> Result<Vec<PreparedPair>, EvalError> {
    let mut seen = HashSet::new();
    for p in &corpus.pairs {
        if !seen.insert(p.pair_id) {
            return Err(EvalError::DuplicatePairId(p.pair_id));
        }
    }
    Ok(prepare_pairs(corpus, vocabs, caps, variant))
}

const CHUNK: usize = 64;

fn rows_f64<T: Scalar>(g: &Graph<T>, v: crate::nn::Var) -> Vec<Vec<f64>> {
    g.value(v)
        .to_rows()
        .iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

/// Text and image rows, one per pair.
pub type Embeddings = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Unit-norm text and image globals of every pair.
pub fn global_embeddings<T: Scalar>(
    model: &Model<T>,
    pairs: &[PreparedPair],
) -> Result<Embeddings, EvalError> {
    if model.config.merged {
        return Err(EvalError::InvalidInput(
            "the merged model has no uni-modal globals".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut texts = Vec::with_capacity(pairs.len());
    let mut images = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let mut g = Graph::new();
        let ts: Vec<&TextSequence> = chunk.iter().map(|p| &p.text).collect();
        let vs: Vec<&VisualSequence> = chunk.iter().map(|p| &p.visual).collect();
        let t = model.encode_text(&mut g, &ts, None, &mut rng)?;
        let v = model.encode_visual(&mut g, &vs, &mut rng)?;
        let tg = model.global_embeddings(&mut g, t.hidden, &t.cls_rows())?;
        let vg = model.global_embeddings(&mut g, v.hidden, &v.cls_rows())?;
        texts.extend(rows_f64(&g, tg));
        images.extend(rows_f64(&g, vg));
    }
    Ok((texts, images))
}

/// `p^itm(match)` for each `(text index, image index)` item.
pub fn match_scores<T: Scalar>(
    model: &Model<T>,
    pairs: &[PreparedPair],
    items: &[(usize, usize)],
) -> Result<Vec<f64>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let mut g = Graph::new();
        let mm = if model.config.merged {
            let refs: Vec<(&TextSequence, &VisualSequence)> = chunk
                .iter()
                .map(|&(t, i)| (&pairs[t].text, &pairs[i].visual))
                .collect();
            model.encode_merged(&mut g, &refs, &mut rng)?
        } else {
            let mut tix: Vec<usize> = chunk.iter().map(|c| c.0).collect();
            let mut vix: Vec<usize> = chunk.iter().map(|c| c.1).collect();
            tix.sort_unstable();
            tix.dedup();
            vix.sort_unstable();
            vix.dedup();
            let ts: Vec<&TextSequence> = tix.iter().map(|&k| &pairs[k].text).collect();
            let vs: Vec<&VisualSequence> = vix.iter().map(|&k| &pairs[k].visual).collect();
            let t = model.encode_text(&mut g, &ts, None, &mut rng)?;
            let v = model.encode_visual(&mut g, &vs, &mut rng)?;
            let local: Vec<(usize, usize)> = chunk
                .iter()
                .map(|(a, b)| {
                    (
                        tix.binary_search(a).expect("collected above"),
                        vix.binary_search(b).expect("collected above"),
                    )
                })
                .collect();
            model.encode_multimodal(&mut g, &t, &v, &local, &mut rng)?
        };
        let cls = g.gather_rows(mm.hidden, &mm.cls_rows())?;
        let logits = model.itm_logits(&mut g, cls)?;
        out.extend(match_probabilities(g.value(logits)));
    }
    Ok(out)
}

/// One line of the embedding export.
#[derive(Clone, Debug, Serialize)]
pub struct EmbeddingRecord {
    pub kind: &'static str,
    pub id: u64,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Text and image globals per pair plus the phrase and tag concept tables.
pub fn export_embeddings<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    vocabs: &Vocabs,
    pairs: &[PreparedPair],
) -> Result<Vec<EmbeddingRecord>, EvalError> {
    let mut out = Vec::new();
    if !model.config.merged {
        let (texts, images) = global_embeddings(model, pairs)?;
        for (p, (t, i)) in pairs.iter().zip(texts.into_iter().zip(images)) {
            let sp = &corpus.pairs[p.index];
            out.push(EmbeddingRecord {
                kind: "text_global",
                id: sp.pair_id,
                label: sp.caption.join(" "),
                vector: t,
            });
            out.push(EmbeddingRecord {
                kind: "image_global",
                id: sp.pair_id,
                label: sp.tags.join(" "),
                vector: i,
            });
        }
    }
    for (class, e) in vocabs.phrases.entries().iter().enumerate() {
        if let Some(v) = model.phrase_embedding(class) {
            out.push(EmbeddingRecord {
                kind: "phrase_concept",
                id: class as u64,
                label: e.words.join(" "),
                vector: v.iter().map(|x| x.as_f64()).collect(),
            });
        }
    }
    for &id in vocabs.tokens.tag_ids() {
        out.push(EmbeddingRecord {
            kind: "tag_concept",
            id: id as u64,
            label: vocabs.tokens.surface(id).to_string(),
            vector: model
                .token_embedding(id)
                .iter()
                .map(|x| x.as_f64())
                .collect(),
        });
    }
    Ok(out)
}
