use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, SynthPair};

use super::vocab::{Vocabs, CLS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceCaps {
    pub max_tokens: usize,
    pub max_phrases: usize,
    pub max_regions: usize,
    pub max_tags: usize,
}

impl Default for SequenceCaps {
    fn default() -> Self {
        Self {
            max_tokens: 35,
            max_phrases: 5,
            max_regions: 50,
            max_tags: 20,
        }
    }
}

impl SequenceCaps {
    /// Position id shared by every concept slot (phrases, tags, regions).
    pub fn concept_position(&self) -> usize {
        self.max_tokens + 1
    }

    /// Size of the position embedding table.
    pub fn num_positions(&self) -> usize {
        self.max_tokens + 2
    }
}

pub const TEXT_SEGMENT: usize = 0;
pub const VISUAL_SEGMENT: usize = 1;

/// `[CLS] w_1..w_N c_1..c_M` with the phrase slots after the tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSequence {
    /// Token ids including the leading `[CLS]`.
    pub tokens: Vec<usize>,
    /// Phrase concept ids (or `[MASK]` once corrupted).
    pub phrases: Vec<usize>,
    /// Index into `SynthPair::phrases` for each phrase slot.
    pub phrase_sources: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
}

impl TextSequence {
    pub fn len(&self) -> usize {
        self.tokens.len() + self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of caption tokens, excluding `[CLS]`.
    pub fn num_words(&self) -> usize {
        self.tokens.len() - 1
    }

    /// All embedding ids in sequence order.
    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().chain(&self.phrases).copied().collect()
    }

    /// Sequence index of the first phrase slot.
    pub fn phrase_offset(&self) -> usize {
        self.tokens.len()
    }
}

/// `[CLS] t_1..t_Kt r_1..r_K`: tag token ids then region feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualSequence {
    pub tags: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
}

impl VisualSequence {
    pub fn len(&self) -> usize {
        1 + self.tags.len() + self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_regions(&self) -> usize {
        self.features.len()
    }

    /// Sequence index of the first region slot.
    pub fn region_offset(&self) -> usize {
        1 + self.tags.len()
    }

    pub fn feature_width(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// In-vocabulary phrases of a pair as `(concept_id, source_index)`, in caption order.
pub fn extract_phrases(
    pair: &SynthPair,
    vocabs: &Vocabs,
    max_phrases: usize,
) -> Vec<(usize, usize)> {
    pair.phrases
        .iter()
        .enumerate()
        .filter_map(|(i, p)| vocabs.phrases.concept_id(&p.words).map(|c| (c, i)))
        .take(max_phrases)
        .collect()
}

pub fn build_text_sequence(pair: &SynthPair, vocabs: &Vocabs, caps: &SequenceCaps) -> TextSequence {
    let mut tokens = vec![CLS];
    tokens.extend(
        pair.caption
            .iter()
            .take(caps.max_tokens)
            .map(|w| vocabs.tokens.id_or_unk(w)),
    );
    let (phrases, phrase_sources): (Vec<usize>, Vec<usize>) =
        extract_phrases(pair, vocabs, caps.max_phrases)
            .into_iter()
            .unzip();
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    positions.extend(std::iter::repeat_n(caps.concept_position(), phrases.len()));
    let segments = vec![TEXT_SEGMENT; tokens.len() + phrases.len()];
    TextSequence {
        tokens,
        phrases,
        phrase_sources,
        positions,
        segments,
    }
}

/// Tags and regions are truncated independently.
pub fn build_visual_sequence(
    pair: &SynthPair,
    vocabs: &Vocabs,
    caps: &SequenceCaps,
) -> VisualSequence {
    let tags = pair
        .tags
        .iter()
        .take(caps.max_tags)
        .map(|t| vocabs.tokens.id_or_unk(t))
        .collect();
    let k = pair.num_regions().min(caps.max_regions);
    VisualSequence {
        tags,
        features: pair.region_features[..k].to_vec(),
        boxes: pair.boxes[..k].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusConfig};
    use crate::inputs::build_vocabs;

    fn setup() -> (Corpus, Vocabs) {
        let c = Corpus::generate(CorpusConfig {
            n_pairs: 200,
            ..CorpusConfig::default()
        })
        .unwrap();
        let v = build_vocabs(&c, 1).unwrap();
        (c, v)
    }

    #[test]
    fn text_sequence_layout() {
        let (c, v) = setup();
        let caps = SequenceCaps::default();
        for p in &c.pairs {
            let s = build_text_sequence(p, &v, &caps);
            assert_eq!(s.tokens[0], CLS);
            assert_eq!(s.num_words(), p.caption.len().min(caps.max_tokens));
            assert_eq!(s.positions.len(), s.len());
            assert!(s.phrases.len() <= caps.max_phrases);
            assert!(s.phrases.iter().all(|&id| v.phrases.class_of(id).is_some()));
            assert!(s.positions[s.phrase_offset()..]
                .iter()
                .all(|&q| q == caps.concept_position()));
        }
    }

    #[test]
    fn caps_truncate() {
        let (c, v) = setup();
        let caps = SequenceCaps {
            max_tokens: 3,
            max_phrases: 1,
            max_regions: 2,
            max_tags: 1,
        };
        let p = c.pairs.iter().find(|p| p.num_regions() >= 3).unwrap();
        let t = build_text_sequence(p, &v, &caps);
        assert_eq!(t.tokens.len(), 4);
        assert_eq!(t.phrases.len(), 1);
        let s = build_visual_sequence(p, &v, &caps);
        assert_eq!(s.tags.len(), 1);
        assert_eq!(s.num_regions(), 2);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn no_phrases_when_vocab_filters_everything() {
        let (c, _) = setup();
        let v = build_vocabs(&c, u64::MAX).unwrap();
        let s = build_text_sequence(&c.pairs[0], &v, &SequenceCaps::default());
        assert!(s.phrases.is_empty());
        assert_eq!(s.len(), s.tokens.len());
    }
}
