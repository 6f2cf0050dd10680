//! Vocabularies, model input sequences and masking.

mod masking;
mod sequence;
mod vocab;

pub use masking::{apply_masking, Corruption, MaskKind, MaskedView, Masker, MaskingConfig};
pub use sequence::{
    build_text_sequence, build_visual_sequence, extract_phrases, SequenceCaps, TextSequence,
    VisualSequence, TEXT_SEGMENT, VISUAL_SEGMENT,
};
pub use vocab::{
    build_vocabs, PhraseEntry, PhraseVocab, TokenVocab, VocabFiles, Vocabs, CLS, MASK, NUM_SPECIAL,
    PAD, PHRASES_FILE, SEP, SPECIALS, TAGS_FILE, TOKENS_FILE, UNK,
};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
