use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{TextSequence, VisualSequence};
use super::vocab::{Vocabs, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Caption tokens, excluding `[CLS]`.
    Mlm,
    /// Object tag slots of the visual sequence.
    McrTags,
    /// Phrase concept slots of the text sequence.
    McrPhrases,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Unchanged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl MaskingConfig {
    pub fn mlm() -> Self {
        Self {
            rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }

    pub fn mcr() -> Self {
        Self {
            rate: 0.25,
            ..Self::mlm()
        }
    }

    /// Every selected slot becomes `[MASK]`.
    pub fn mask_only(rate: f64) -> Self {
        Self {
            rate,
            mask_prob: 1.0,
            random_prob: 0.0,
        }
    }
}

/// Which slots of a sequence were corrupted and what they held before.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    pub kind: MaskKind,
    /// Sequence positions of the selected slots, ascending; never 0.
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
    pub replacements: Vec<usize>,
    pub corruptions: Vec<Corruption>,
    /// Sequence position of slot 0 of the masked segment.
    pub offset: usize,
}

impl MaskedView {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Writes the replacements into `slots` (segment-relative).
    pub fn apply(&self, slots: &mut [usize]) {
        for (&p, &r) in self.positions.iter().zip(&self.replacements) {
            slots[p - self.offset] = r;
        }
    }

    /// Undoes [`MaskedView::apply`].
    pub fn restore(&self, slots: &mut [usize]) {
        for (&p, &o) in self.positions.iter().zip(&self.originals) {
            slots[p - self.offset] = o;
        }
    }
}

/// Selects slots `eligible..slots.len()` at `cfg.rate` (forcing one when none
/// is drawn) and corrupts each with the mask / random / keep split.
/// Returns `None` when no slot is eligible.
pub fn apply_masking<R: Rng + ?Sized>(
    slots: &[usize],
    eligible: usize,
    offset: usize,
    kind: MaskKind,
    cfg: &MaskingConfig,
    domain: &[usize],
    rng: &mut R,
) -> Option<MaskedView> {
    if eligible >= slots.len() {
        return None;
    }
    let mut chosen: Vec<usize> = (eligible..slots.len())
        .filter(|_| rng.random::<f64>() < cfg.rate)
        .collect();
    if chosen.is_empty() {
        chosen.push(rng.random_range(eligible..slots.len()));
    }
    let mut view = MaskedView {
        kind,
        positions: Vec::with_capacity(chosen.len()),
        originals: Vec::with_capacity(chosen.len()),
        replacements: Vec::with_capacity(chosen.len()),
        corruptions: Vec::with_capacity(chosen.len()),
        offset,
    };
    for i in chosen {
        let u: f64 = rng.random();
        let (corruption, replacement) = if u < cfg.mask_prob || domain.is_empty() {
            (Corruption::Mask, MASK)
        } else if u < cfg.mask_prob + cfg.random_prob {
            (
                Corruption::Random,
                domain[rng.random_range(0..domain.len())],
            )
        } else {
            (Corruption::Unchanged, slots[i])
        };
        view.positions.push(offset + i);
        view.originals.push(slots[i]);
        view.replacements.push(replacement);
        view.corruptions.push(corruption);
    }
    Some(view)
}

/// Draws masks for the three objectives against one vocabulary.
#[derive(Clone, Debug)]
pub struct Masker {
    pub mlm: MaskingConfig,
    pub mcr: MaskingConfig,
    token_domain: Vec<usize>,
    tag_domain: Vec<usize>,
    phrase_domain: Vec<usize>,
}

impl Masker {
    pub fn new(vocabs: &Vocabs, mlm: MaskingConfig, mcr: MaskingConfig) -> Self {
        Self {
            mlm,
            mcr,
            token_domain: vocabs.tokens.regular_ids().collect(),
            tag_domain: vocabs.tokens.tag_ids().to_vec(),
            phrase_domain: vocabs.phrases.concept_ids().collect(),
        }
    }

    /// Masks caption tokens (`Mlm`) or phrase slots (`McrPhrases`).
    pub fn mask_text<R: Rng + ?Sized>(
        &self,
        seq: &TextSequence,
        kind: MaskKind,
        rng: &mut R,
    ) -> Option<(TextSequence, MaskedView)> {
        let mut out = seq.clone();
        let view = match kind {
            MaskKind::Mlm => {
                let v = apply_masking(&seq.tokens, 1, 0, kind, &self.mlm, &self.token_domain, rng)?;
                v.apply(&mut out.tokens);
                v
            }
            MaskKind::McrPhrases => {
                let off = seq.phrase_offset();
                let v = apply_masking(
                    &seq.phrases,
                    0,
                    off,
                    kind,
                    &self.mcr,
                    &self.phrase_domain,
                    rng,
                )?;
                v.apply(&mut out.phrases);
                v
            }
            MaskKind::McrTags => return None,
        };
        Some((out, view))
    }

    pub fn mask_tags<R: Rng + ?Sized>(
        &self,
        seq: &VisualSequence,
        rng: &mut R,
    ) -> Option<(VisualSequence, MaskedView)> {
        let view = apply_masking(
            &seq.tags,
            0,
            1,
            MaskKind::McrTags,
            &self.mcr,
            &self.tag_domain,
            rng,
        )?;
        let mut out = seq.clone();
        view.apply(&mut out.tags);
        Some((out, view))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_one_mask_only_masks_everything() {
        let slots: Vec<usize> = (10..40).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = apply_masking(
            &slots,
            1,
            0,
            MaskKind::Mlm,
            &MaskingConfig::mask_only(1.0),
            &[7],
            &mut rng,
        )
        .unwrap();
        assert_eq!(v.positions, (1..30).collect::<Vec<_>>());
        assert!(v.replacements.iter().all(|&r| r == MASK));
    }

    #[test]
    fn short_sequences_still_mask_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = apply_masking(
                &[0, 5],
                1,
                0,
                MaskKind::Mlm,
                &MaskingConfig::mlm(),
                &[9],
                &mut rng,
            )
            .unwrap();
            assert_eq!(v.positions, vec![1]);
        }
        assert!(apply_masking(
            &[0],
            1,
            0,
            MaskKind::Mlm,
            &MaskingConfig::mlm(),
            &[9],
            &mut rng
        )
        .is_none());
    }

    #[test]
    fn restore_undoes_apply() {
        let slots: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = apply_masking(
            &slots,
            0,
            4,
            MaskKind::McrTags,
            &MaskingConfig::mcr(),
            &[50, 51],
            &mut rng,
        )
        .unwrap();
        let mut s = slots.clone();
        v.apply(&mut s);
        v.restore(&mut s);
        assert_eq!(s, slots);
        assert!(v.positions.iter().all(|&p| p >= 4));
    }
}
