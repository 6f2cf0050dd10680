//! Textual, visual and multi-modal transformer encoders.
//!
//! The uni-modal encoders see only their own modality: text gets
//! `[CLS] w c`, vision gets `[CLS] t r`. The multi-modal encoder consumes the
//! uni-modal outputs `w̃ ∥ c̃ ∥ r̃` (tags are left out) and exposes its
//! `wpg_layer` hidden states, L2-normalized, as grounding features.

mod config;
mod model;

pub use config::{ArchConfig, ModelConfig};
pub use model::{
    is_multimodal_param, EncodedPair, MmOut, MmSpan, Model, TextOut, TextSpan, VisualOut,
    VisualSpan,
};

use crate::inputs::Vocabs;
use crate::nn::NnError;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl<T: Scalar> Model<T> {
    /// A model whose phrase table is seeded from `vocabs`.
    pub fn from_vocabs(config: ModelConfig, vocabs: &Vocabs) -> Result<Self, EncoderError> {
        let lists: Vec<Vec<usize>> = vocabs
            .phrases
            .entries()
            .iter()
            .map(|e| e.token_ids.clone())
            .collect();
        Self::new(config, &lists)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusConfig};
    use crate::inputs::{build_text_sequence, build_visual_sequence, build_vocabs, SequenceCaps};
    use crate::nn::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Corpus, Vocabs, Model<f64>) {
        let c = Corpus::generate(CorpusConfig {
            n_pairs: 40,
            ..CorpusConfig::default()
        })
        .unwrap();
        let v = build_vocabs(&c, 1).unwrap();
        let cfg = ModelConfig::tiny(&v, c.header.config.feat_dim + 6);
        let m = Model::from_vocabs(cfg, &v).unwrap();
        (c, v, m)
    }

    #[test]
    fn phrase_embedding_starts_at_token_mean() {
        let (_, v, m) = setup();
        let words = vec!["red".to_string(), "cat".to_string()];
        let class = v
            .phrases
            .class_of(v.phrases.concept_id(&words).unwrap())
            .unwrap();
        let a = m.token_embedding(v.tokens.id("red").unwrap());
        let b = m.token_embedding(v.tokens.id("cat").unwrap());
        let p = m.phrase_embedding(class).unwrap();
        for i in 0..a.len() {
            assert!((p[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn multimodal_length_excludes_tags() {
        let (c, v, m) = setup();
        let caps = SequenceCaps::default();
        let p = &c.pairs[0];
        let t = build_text_sequence(p, &v, &caps);
        let s = build_visual_sequence(p, &v, &caps);
        let e = m.encode_pair(&t, &s).unwrap();
        assert_eq!(
            e.multimodal.rows(),
            t.tokens.len() + t.phrases.len() + s.num_regions()
        );
        assert_eq!(e.tags.rows(), 1 + s.tags.len());
    }

    #[test]
    fn grounding_layer_differs_from_final_layer() {
        let (c, v, m) = setup();
        let caps = SequenceCaps::default();
        let p = &c.pairs[1];
        let t = build_text_sequence(p, &v, &caps);
        let s = build_visual_sequence(p, &v, &caps);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let to = m.encode_text(&mut g, &[&t], None, &mut rng).unwrap();
        let vo = m.encode_visual(&mut g, &[&s], &mut rng).unwrap();
        let mm = m
            .encode_multimodal(&mut g, &to, &vo, &[(0, 0)], &mut rng)
            .unwrap();
        let fin = g.l2_normalize(mm.hidden);
        assert_ne!(g.value(fin).data(), g.value(mm.grounding).data());
    }

    #[test]
    fn zero_projection_erases_region_features() {
        let (c, v, mut m) = setup();
        let (w, b) = m.region_projection();
        m.params
            .get_mut(w)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        m.params
            .get_mut(b)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let caps = SequenceCaps::default();
        let p = &c.pairs[2];
        let t = build_text_sequence(p, &v, &caps);
        let s = build_visual_sequence(p, &v, &caps);
        let mut s2 = s.clone();
        s2.features
            .iter_mut()
            .flatten()
            .for_each(|x| *x = x.sin() * 3.0);
        let a = m.encode_pair(&t, &s).unwrap();
        let b = m.encode_pair(&t, &s2).unwrap();
        assert_eq!(a.regions, b.regions);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (c, v, _) = setup();
        let w = c.header.config.feat_dim + 6;
        let mut cfg = ModelConfig::tiny(&v, w);
        cfg.arch.heads = 3;
        assert!(Model::<f64>::from_vocabs(cfg, &v).is_err());
        let mut cfg = ModelConfig::tiny(&v, w);
        cfg.arch.wpg_layer = 3;
        assert!(Model::<f64>::from_vocabs(cfg, &v).is_err());
    }
}
