use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, Corpus, SynthPair};
use crate::encoders::{MmOut, Model};
use crate::inputs::{TextSequence, VisualSequence};
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::trainer::PreparedPair;

use super::{cosine, EvalError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingMode {
    /// Mean-pooled final multi-modal outputs of the phrase's caption tokens.
    Token,
    /// Grounding-layer features of the phrase concept.
    Concept,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub pair_id: u64,
    pub phrase: String,
    pub region: usize,
    pub similarity: f64,
    pub iou: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub mode: GroundingMode,
    pub phrases: usize,
    pub accuracy: f64,
    /// `1 / K̄` with `K̄` the mean region count over evaluated phrases.
    pub chance_baseline: f64,
    /// Exact accuracy of a uniformly random region choice, and its standard deviation.
    pub random_expected: f64,
    pub random_sigma: f64,
    /// Phrases whose tokens were cut off by caption truncation (token mode).
    pub skipped: usize,
    pub predictions: Vec<GroundingPrediction>,
}

fn best_iou(b: &BBox, gt: &[usize], boxes: &[BBox]) -> f64 {
    gt.iter().map(|&r| b.iou(&boxes[r])).fold(0.0, f64::max)
}

/// Caption start of the `occurrence`-th appearance of `words`.
fn find_words(caption: &[String], words: &[String], occurrence: usize) -> Option<usize> {
    (0..caption.len().saturating_sub(words.len()) + 1)
        .filter(|&s| caption[s..].starts_with(words))
        .nth(occurrence)
}

/// Argmax region per phrase with IoU > 0.5 against any ground-truth box.
pub fn grounding_eval<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    pairs: &[PreparedPair],
    mode: GroundingMode,
) -> Result<GroundingReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut predictions = Vec::new();
    let mut skipped = 0;
    let mut regions_sum = 0.0;
    let mut p_sum = 0.0;
    let mut var_sum = 0.0;
    let grounded: Vec<&PreparedPair> = pairs
        .iter()
        .filter(|p| !p.text.phrases.is_empty() && p.visual.num_regions() > 0)
        .collect();
    for chunk in grounded.chunks(32) {
        let mut g = Graph::new();
        let mm: MmOut = if model.config.merged {
            let refs: Vec<(&TextSequence, &VisualSequence)> =
                chunk.iter().map(|p| (&p.text, &p.visual)).collect();
            model.encode_merged(&mut g, &refs, &mut rng)?
        } else {
            let ts: Vec<&TextSequence> = chunk.iter().map(|p| &p.text).collect();
            let vs: Vec<&VisualSequence> = chunk.iter().map(|p| &p.visual).collect();
            let t = model.encode_text(&mut g, &ts, None, &mut rng)?;
            let v = model.encode_visual(&mut g, &vs, &mut rng)?;
            let items: Vec<(usize, usize)> = (0..chunk.len()).map(|k| (k, k)).collect();
            model.encode_multimodal(&mut g, &t, &v, &items, &mut rng)?
        };
        let feats = match mode {
            GroundingMode::Concept => mm.grounding,
            GroundingMode::Token => mm.hidden,
        };
        let x = g.value(feats);
        let row = |r: usize| -> Vec<f64> { x.row(r).iter().map(|v| v.as_f64()).collect() };
        for (p, s) in chunk.iter().zip(&mm.spans) {
            let sp: &SynthPair = &corpus.pairs[p.index];
            let regions: Vec<Vec<f64>> = s.region_rows().map(row).collect();
            let k = regions.len();
            for (slot, &src) in p.text.phrase_sources.iter().enumerate() {
                let phrase = &sp.phrases[src];
                let q = match mode {
                    GroundingMode::Concept => row(s.phrase_rows().start + slot),
                    GroundingMode::Token => {
                        let occ = sp.phrases[..src]
                            .iter()
                            .filter(|o| o.words == phrase.words)
                            .count();
                        let n_words = s.tokens - 1;
                        match find_words(&sp.caption, &phrase.words, occ) {
                            Some(at) if at + phrase.words.len() <= n_words => {
                                let mut acc = vec![0.0; x.row_len()];
                                for w in 0..phrase.words.len() {
                                    for (a, v) in acc.iter_mut().zip(row(s.start + 1 + at + w)) {
                                        *a += v;
                                    }
                                }
                                acc.iter_mut().for_each(|a| *a /= phrase.words.len() as f64);
                                acc
                            }
                            _ => {
                                skipped += 1;
                                continue;
                            }
                        }
                    }
                };
                let (mut best, mut best_sim) = (0, f64::NEG_INFINITY);
                for (j, r) in regions.iter().enumerate() {
                    let c = cosine(&q, r);
                    if c > best_sim {
                        best = j;
                        best_sim = c;
                    }
                }
                let iou = best_iou(&sp.boxes[best], &phrase.regions, &sp.boxes);
                let hits = (0..k)
                    .filter(|&j| best_iou(&sp.boxes[j], &phrase.regions, &sp.boxes) > 0.5)
                    .count();
                let pr = hits as f64 / k as f64;
                regions_sum += k as f64;
                p_sum += pr;
                var_sum += pr * (1.0 - pr);
                predictions.push(GroundingPrediction {
                    pair_id: sp.pair_id,
                    phrase: phrase.words.join(" "),
                    region: best,
                    similarity: best_sim,
                    iou,
                    correct: iou > 0.5,
                });
            }
        }
    }
    if predictions.is_empty() {
        return Err(EvalError::NoPhrases);
    }
    let n = predictions.len() as f64;
    Ok(GroundingReport {
        mode,
        phrases: predictions.len(),
        accuracy: predictions.iter().filter(|p| p.correct).count() as f64 / n,
        chance_baseline: n / regions_sum,
        random_expected: p_sum / n,
        random_sigma: var_sum.sqrt() / n,
        skipped,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn finds_the_requested_occurrence() {
        let c = w("red cat blue dog red cat");
        assert_eq!(find_words(&c, &w("red cat"), 0), Some(0));
        assert_eq!(find_words(&c, &w("red cat"), 1), Some(4));
        assert_eq!(find_words(&c, &w("red cat"), 2), None);
        assert_eq!(find_words(&c, &w("green"), 0), None);
    }

    #[test]
    fn iou_threshold_is_strict() {
        let boxes = [BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(0.0, 0.0, 0.5, 1.0)];
        assert_eq!(best_iou(&boxes[1], &[0], &boxes), 0.5);
        assert!(best_iou(&boxes[1], &[0], &boxes) <= 0.5);
        assert_eq!(best_iou(&boxes[0], &[0], &boxes), 1.0);
    }
}
