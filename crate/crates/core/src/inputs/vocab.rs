use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Corpus;

use super::InputError;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIALS: [&str; NUM_SPECIAL] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

/// Surface tokens and tag names in one id space.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenVocab {
    surfaces: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
    /// Token ids of tag names, ascending; position = tag class index.
    tags: Vec<usize>,
    tag_slot: HashMap<usize, usize>,
}

impl TokenVocab {
    fn from_parts(surfaces: Vec<String>, freqs: Vec<u64>, tags: Vec<usize>) -> Self {
        let index = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let tag_slot = tags.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Self {
            surfaces,
            freqs,
            index,
            tags,
            tag_slot,
        }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    pub fn id_or_unk(&self, surface: &str) -> usize {
        self.id(surface).unwrap_or(UNK)
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.surfaces[id]
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freqs[id]
    }

    /// Token ids of every tag name, in tag-class order.
    pub fn tag_ids(&self) -> &[usize] {
        &self.tags
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    /// Tag class index of a token id, if the token is a tag name.
    pub fn tag_class(&self, token_id: usize) -> Option<usize> {
        self.tag_slot.get(&token_id).copied()
    }

    /// Ids eligible as random MLM replacements.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIAL..self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseEntry {
    pub words: Vec<String>,
    /// Number of captions containing the phrase.
    pub frequency: u64,
    pub token_ids: Vec<usize>,
}

/// Frequent phrase tuples. Concept ids start right after the last token id.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseVocab {
    entries: Vec<PhraseEntry>,
    index: HashMap<Vec<String>, usize>,
    offset: usize,
}

impl PhraseVocab {
    fn from_entries(entries: Vec<PhraseEntry>, offset: usize) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.words.clone(), i))
            .collect();
        Self {
            entries,
            index,
            offset,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First concept id (equals the token vocabulary size).
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn concept_id(&self, words: &[String]) -> Option<usize> {
        self.index.get(words).map(|&i| i + self.offset)
    }

    /// Phrase class index of a concept id.
    pub fn class_of(&self, concept_id: usize) -> Option<usize> {
        concept_id
            .checked_sub(self.offset)
            .filter(|&i| i < self.entries.len())
    }

    pub fn entry(&self, class: usize) -> &PhraseEntry {
        &self.entries[class]
    }

    pub fn entries(&self) -> &[PhraseEntry] {
        &self.entries
    }

    pub fn concept_ids(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.entries.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub tokens: TokenVocab,
    pub phrases: PhraseVocab,
    pub min_phrase_freq: u64,
}

/// Builds the token vocabulary (captions + tags) and keeps every phrase that
/// occurs in at least `min_phrase_freq` captions.
pub fn build_vocabs(corpus: &Corpus, min_phrase_freq: u64) -> Result<Vocabs, InputError> {
    if corpus.pairs.is_empty() {
        return Err(InputError::EmptyCorpus);
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut tag_names: BTreeSet<&str> = BTreeSet::new();
    let mut phrase_counts: BTreeMap<&[String], u64> = BTreeMap::new();
    for p in &corpus.pairs {
        for w in p.caption.iter().chain(&p.tags) {
            *counts.entry(w.as_str()).or_default() += 1;
        }
        tag_names.extend(p.tags.iter().map(String::as_str));
        let distinct: BTreeSet<&[String]> =
            p.phrases.iter().map(|ph| ph.words.as_slice()).collect();
        for words in distinct {
            *phrase_counts.entry(words).or_default() += 1;
        }
    }
    let mut surfaces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut freqs = vec![0u64; NUM_SPECIAL];
    for (w, c) in &counts {
        surfaces.push(w.to_string());
        freqs.push(*c);
    }
    let tokens = TokenVocab::from_parts(surfaces, freqs, Vec::new());
    let tags = tag_names
        .iter()
        .map(|t| tokens.id(t).expect("tag counted"))
        .collect();
    let tokens = TokenVocab::from_parts(tokens.surfaces, tokens.freqs, tags);

    let entries = phrase_counts
        .into_iter()
        .filter(|&(_, c)| c >= min_phrase_freq)
        .map(|(words, frequency)| PhraseEntry {
            words: words.to_vec(),
            frequency,
            token_ids: words.iter().map(|w| tokens.id_or_unk(w)).collect(),
        })
        .collect();
    let phrases = PhraseVocab::from_entries(entries, tokens.len());
    Ok(Vocabs {
        tokens,
        phrases,
        min_phrase_freq,
    })
}

/// Tab-separated renderings of a [`Vocabs`].
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabFiles {
    pub tokens: String,
    pub phrases: String,
    pub tags: String,
    pub min_phrase_freq: u64,
}

pub const TOKENS_FILE: &str = "tokens.tsv";
pub const PHRASES_FILE: &str = "phrases.tsv";
pub const TAGS_FILE: &str = "tags.tsv";

impl Vocabs {
    pub fn to_files(&self) -> VocabFiles {
        let mut tokens = String::new();
        for (i, s) in self.tokens.surfaces.iter().enumerate() {
            writeln!(tokens, "{i}\t{s}\t{}", self.tokens.freqs[i]).expect("string write");
        }
        let mut phrases = String::new();
        for (i, e) in self.phrases.entries.iter().enumerate() {
            let ids: Vec<String> = e.token_ids.iter().map(usize::to_string).collect();
            writeln!(
                phrases,
                "{}\t{}\t{}\t{}",
                i + self.phrases.offset,
                e.words.join(" "),
                e.frequency,
                ids.join(",")
            )
            .expect("string write");
        }
        let mut tags = String::new();
        for (i, &t) in self.tokens.tags.iter().enumerate() {
            writeln!(tags, "{i}\t{t}\t{}", self.tokens.surfaces[t]).expect("string write");
        }
        VocabFiles {
            tokens,
            phrases,
            tags,
            min_phrase_freq: self.min_phrase_freq,
        }
    }

    pub fn from_files(files: &VocabFiles) -> Result<Self, InputError> {
        let bad = |file: &'static str, line: usize, message: &str| InputError::Malformed {
            file,
            line,
            message: message.to_string(),
        };
        let mut surfaces = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in files.tokens.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(TOKENS_FILE, i + 1, "expected 3 columns"));
            }
            if cols[0].parse::<usize>().ok() != Some(i) {
                return Err(bad(TOKENS_FILE, i + 1, "ids must be dense and sorted"));
            }
            surfaces.push(cols[1].to_string());
            freqs.push(
                cols[2]
                    .parse()
                    .map_err(|_| bad(TOKENS_FILE, i + 1, "bad frequency"))?,
            );
        }
        if surfaces.len() < NUM_SPECIAL || surfaces[..NUM_SPECIAL] != SPECIALS {
            return Err(bad(TOKENS_FILE, 1, "special tokens missing"));
        }
        let mut tags = Vec::new();
        for (i, line) in files.tags.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols[0].parse::<usize>().ok() != Some(i) {
                return Err(bad(
                    TAGS_FILE,
                    i + 1,
                    "expected `index<TAB>token_id<TAB>surface`",
                ));
            }
            let id: usize = cols[1]
                .parse()
                .map_err(|_| bad(TAGS_FILE, i + 1, "bad token id"))?;
            if id >= surfaces.len() {
                return Err(bad(TAGS_FILE, i + 1, "token id out of range"));
            }
            tags.push(id);
        }
        let tokens = TokenVocab::from_parts(surfaces, freqs, tags);
        let offset = tokens.len();
        let mut entries = Vec::new();
        for (i, line) in files.phrases.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(PHRASES_FILE, i + 1, "expected 4 columns"));
            }
            if cols[0].parse::<usize>().ok() != Some(offset + i) {
                return Err(bad(
                    PHRASES_FILE,
                    i + 1,
                    "concept ids must follow the token ids densely",
                ));
            }
            let token_ids = cols[3]
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(PHRASES_FILE, i + 1, "bad token id list"))?;
            entries.push(PhraseEntry {
                words: cols[1].split(' ').map(str::to_string).collect(),
                frequency: cols[2]
                    .parse()
                    .map_err(|_| bad(PHRASES_FILE, i + 1, "bad frequency"))?,
                token_ids,
            });
        }
        Ok(Vocabs {
            tokens,
            phrases: PhraseVocab::from_entries(entries, offset),
            min_phrase_freq: files.min_phrase_freq,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), InputError> {
        std::fs::create_dir_all(dir)?;
        let f = self.to_files();
        std::fs::write(dir.join(TOKENS_FILE), f.tokens)?;
        std::fs::write(dir.join(PHRASES_FILE), f.phrases)?;
        std::fs::write(dir.join(TAGS_FILE), f.tags)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path, min_phrase_freq: u64) -> Result<Self, InputError> {
        Self::from_files(&VocabFiles {
            tokens: std::fs::read_to_string(dir.join(TOKENS_FILE))?,
            phrases: std::fs::read_to_string(dir.join(PHRASES_FILE))?,
            tags: std::fs::read_to_string(dir.join(TAGS_FILE))?,
            min_phrase_freq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, Phrase};

    fn corpus() -> Corpus {
        Corpus::generate(CorpusConfig {
            n_pairs: 300,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn specials_are_reserved() {
        let v = build_vocabs(&corpus(), 1).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.tokens.id(s), Some(i));
        }
        assert_eq!(v.phrases.offset(), v.tokens.len());
    }

    #[test]
    fn threshold_is_inclusive_at_the_boundary() {
        let mut c = corpus();
        c.pairs.truncate(50);
        let rare = vec!["zebra".to_string(), "flying".to_string()];
        for p in c.pairs.iter_mut().take(49) {
            p.phrases.push(Phrase {
                words: rare.clone(),
                regions: vec![0],
            });
        }
        assert!(build_vocabs(&c, 50)
            .unwrap()
            .phrases
            .concept_id(&rare)
            .is_none());
        c.pairs[49].phrases.push(Phrase {
            words: rare.clone(),
            regions: vec![0],
        });
        assert!(build_vocabs(&c, 50)
            .unwrap()
            .phrases
            .concept_id(&rare)
            .is_some());
    }

    #[test]
    fn min_freq_one_keeps_every_phrase() {
        let c = corpus();
        let v = build_vocabs(&c, 1).unwrap();
        for p in &c.pairs {
            for ph in &p.phrases {
                assert!(v.phrases.concept_id(&ph.words).is_some());
            }
        }
    }

    #[test]
    fn phrase_count_is_bounded_by_the_grammar() {
        let c = Corpus::generate(CorpusConfig {
            n_pairs: 500,
            n_categories: 10,
            n_attributes: 4,
            ..CorpusConfig::default()
        })
        .unwrap();
        let v = build_vocabs(&c, 1).unwrap();
        let relation_tuples: BTreeSet<&[String]> = c
            .pairs
            .iter()
            .flat_map(|p| {
                p.phrases
                    .iter()
                    .filter(|ph| ph.words.len() == 3)
                    .map(|ph| ph.words.as_slice())
            })
            .collect();
        assert!(v.phrases.len() <= 10 * 4 + relation_tuples.len());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let mut c = corpus();
        c.pairs.clear();
        assert!(matches!(build_vocabs(&c, 1), Err(InputError::EmptyCorpus)));
    }

    #[test]
    fn files_round_trip() {
        let v = build_vocabs(&corpus(), 3).unwrap();
        assert_eq!(Vocabs::from_files(&v.to_files()).unwrap(), v);
    }
}
