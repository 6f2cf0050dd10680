//! JSONL persistence: one header record followed by one record per pair.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, CorpusHeader, SynthPair};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Header(CorpusHeader),
    Pair(SynthPair),
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum RecordRef<'a> {
    Header(&'a CorpusHeader),
    Pair(&'a SynthPair),
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, mut out: W) -> Result<(), CorpusError> {
    let line =
        serde_json::to_string(&RecordRef::Header(&corpus.header)).map_err(std::io::Error::other)?;
    writeln!(out, "{line}")?;
    for p in &corpus.pairs {
        let line = serde_json::to_string(&RecordRef::Pair(p)).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    write_corpus_to(corpus, BufWriter::new(File::create(path)?))
}

pub fn read_corpus_from<R: Read>(input: R) -> Result<Corpus, CorpusError> {
    let mut header: Option<CorpusHeader> = None;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            line: lineno,
            message,
        };
        if header.is_none() {
            let raw: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if raw.get("record").and_then(|r| r.as_str()) != Some("header") {
                return Err(CorpusError::MissingHeader);
            }
            let found = raw
                .get("schema_version")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| malformed("header lacks schema_version".into()))?
                as u32;
            if found != SCHEMA_VERSION {
                return Err(CorpusError::SchemaVersion {
                    found,
                    expected: SCHEMA_VERSION,
                });
            }
        }
        match serde_json::from_str::<Record>(&line).map_err(|e| malformed(e.to_string()))? {
            Record::Header(h) => {
                if header.is_some() {
                    return Err(malformed("second header record".into()));
                }
                h.config.validate().map_err(|e| malformed(e.to_string()))?;
                header = Some(h);
            }
            Record::Pair(p) => {
                let feat_dim = header
                    .as_ref()
                    .expect("header parsed first")
                    .config
                    .feat_dim;
                p.validate(feat_dim).map_err(malformed)?;
                pairs.push(p);
            }
        }
    }
    let header = header.ok_or(CorpusError::MissingHeader)?;
    Ok(Corpus { header, pairs })
}

pub fn read_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    read_corpus_from(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;

    fn corpus(n: usize) -> Corpus {
        Corpus::generate(CorpusConfig {
            n_pairs: n,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn to_bytes(c: &Corpus) -> Vec<u8> {
        let mut buf = Vec::new();
        write_corpus_to(c, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let c = corpus(100);
        let back = read_corpus_from(&to_bytes(&c)[..]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let mut c = corpus(1);
        c.pairs.clear();
        let bytes = to_bytes(&c);
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        assert!(read_corpus_from(&bytes[..]).unwrap().pairs.is_empty());
    }

    #[test]
    fn truncated_record_names_its_line() {
        let bytes = to_bytes(&corpus(3));
        let text = String::from_utf8(bytes).unwrap();
        let cut = text.len() - 40;
        match read_corpus_from(text[..cut].as_bytes()) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!(
                "expected malformed record, got {:?}",
                other.map(|c| c.len())
            ),
        }
    }

    #[test]
    fn schema_version_is_checked() {
        let text = String::from_utf8(to_bytes(&corpus(1))).unwrap();
        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        assert!(matches!(
            read_corpus_from(bumped.as_bytes()),
            Err(CorpusError::SchemaVersion { found: 2, .. })
        ));
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(to_bytes(&corpus(20)), to_bytes(&corpus(20)));
    }
}
