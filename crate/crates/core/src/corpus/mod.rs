//! Synthetic image-text pairs with exact phrase-to-region ground truth.
//!
//! Each scene is a handful of objects (category, attribute, box) plus a few
//! binary relations. Captions come from a fixed template grammar, region
//! features from frozen per-category and per-attribute prototype vectors, so
//! the alignment between phrases, tags and regions is known exactly.

mod generate;
mod io;

pub use generate::{box_encoding, Generator};
pub use io::{read_corpus, read_corpus_from, write_corpus, write_corpus_to, SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("corpus file has no header record")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in unit-square coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..1.0).contains(&self.x_min)
            && self.x_min < self.x_max
            && self.x_max <= 1.0
            && (0.0..1.0).contains(&self.y_min)
            && self.y_min < self.y_max
            && self.y_max <= 1.0
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = BBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .area();
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub n_categories: usize,
    pub n_attributes: usize,
    pub n_predicates: usize,
    pub feat_dim: usize,
    pub feature_noise_sigma: f64,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Upper bound on relations per scene (also bounded by objects - 1).
    pub max_relations: usize,
    /// Scale of the attribute offset added to the category prototype.
    pub attribute_scale: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_pairs: 2000,
            n_categories: 12,
            n_attributes: 6,
            n_predicates: 6,
            feat_dim: 32,
            feature_noise_sigma: 0.3,
            objects_per_scene: (3, 6),
            max_relations: 2,
            attribute_scale: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.n_pairs < 1 {
            return bad("n_pairs must be at least 1");
        }
        if self.n_categories < 1
            || self.n_attributes < 1
            || self.n_predicates < 1
            || self.feat_dim < 1
        {
            return bad("all cardinalities must be at least 1");
        }
        if !(self.feature_noise_sigma >= 0.0) || !self.feature_noise_sigma.is_finite() {
            return bad("feature_noise_sigma must be a finite non-negative number");
        }
        if !(self.attribute_scale >= 0.0) || !self.attribute_scale.is_finite() {
            return bad("attribute_scale must be a finite non-negative number");
        }
        let (lo, hi) = self.objects_per_scene;
        if lo < 1 || lo > hi {
            return bad("objects_per_scene must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub attribute: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
}

impl SceneSpec {
    pub fn is_valid(&self) -> bool {
        !self.objects.is_empty()
            && self.objects.iter().all(|o| o.bbox.is_valid())
            && self.relations.iter().all(|r| {
                r.subject < self.objects.len()
                    && r.object < self.objects.len()
                    && r.subject != r.object
            })
    }
}

/// An attribute or relation tuple with the regions it describes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub words: Vec<String>,
    pub regions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPair {
    pub pair_id: u64,
    pub caption: Vec<String>,
    pub phrases: Vec<Phrase>,
    pub boxes: Vec<BBox>,
    pub region_features: Vec<Vec<f64>>,
    pub tags: Vec<String>,
    pub gt_alignment: Vec<Vec<usize>>,
}

impl SynthPair {
    pub fn num_regions(&self) -> usize {
        self.boxes.len()
    }

    /// Checks the structural invariants, returning the first violation.
    pub fn validate(&self, feat_dim: usize) -> Result<(), String> {
        let k = self.boxes.len();
        if k == 0 {
            return Err("pair has no regions".into());
        }
        if self.region_features.len() != k || self.tags.len() != k {
            return Err(format!(
                "{} boxes, {} feature rows, {} tags",
                k,
                self.region_features.len(),
                self.tags.len()
            ));
        }
        if self.gt_alignment.len() != self.phrases.len() {
            return Err("gt_alignment length differs from phrase count".into());
        }
        for (i, (p, gt)) in self.phrases.iter().zip(&self.gt_alignment).enumerate() {
            if p.regions.is_empty() || p.regions != *gt {
                return Err(format!("phrase {i} has inconsistent ground truth"));
            }
            if gt.iter().any(|&r| r >= k) {
                return Err(format!("phrase {i} points past the last region"));
            }
        }
        for (j, (f, b)) in self.region_features.iter().zip(&self.boxes).enumerate() {
            if f.len() != feat_dim + 6 {
                return Err(format!(
                    "region {j} has {} features, expected {}",
                    f.len(),
                    feat_dim + 6
                ));
            }
            if f[feat_dim..] != box_encoding(b) {
                return Err(format!("region {j} box suffix disagrees with its box"));
            }
        }
        Ok(())
    }
}

/// Frozen generator state shared by every pair of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub schema_version: u32,
    pub config: CorpusConfig,
    pub category_names: Vec<String>,
    pub attribute_names: Vec<String>,
    pub predicate_names: Vec<String>,
    pub prototypes: Prototypes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub category: Vec<Vec<f64>>,
    pub attribute: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub pairs: Vec<SynthPair>,
}

impl Corpus {
    pub fn generate(config: CorpusConfig) -> Result<Self, CorpusError> {
        let gen = Generator::new(config)?;
        Ok(gen.generate_corpus())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// A corpus sharing this header with a subset of pairs.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Corpus {
        Corpus {
            header: self.header.clone(),
            pairs: self.pairs[range].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let full = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(full.iou(&full), 1.0);
        assert_eq!(full.iou(&BBox::new(0.0, 0.0, 0.5, 1.0)), 0.5);
        assert_eq!(
            BBox::new(0.0, 0.0, 0.2, 0.2).iou(&BBox::new(0.5, 0.5, 0.9, 0.9)),
            0.0
        );
    }

    #[test]
    fn config_validation() {
        assert!(CorpusConfig::default().validate().is_ok());
        let mut c = CorpusConfig::default();
        c.n_pairs = 0;
        assert!(c.validate().is_err());
        let mut c = CorpusConfig::default();
        c.feature_noise_sigma = -1.0;
        assert!(c.validate().is_err());
        let mut c = CorpusConfig::default();
        c.objects_per_scene = (3, 2);
        assert!(c.validate().is_err());
    }
}
