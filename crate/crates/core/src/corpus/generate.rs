use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    BBox, Corpus, CorpusConfig, CorpusError, CorpusHeader, Phrase, Prototypes, Relation,
    SceneObject, SceneSpec, SynthPair, SCHEMA_VERSION,
};

const CATEGORY_NAMES: &[&str] = &[
    "person", "dog", "cat", "car", "tree", "horse", "bird", "boat", "chair", "table", "cup",
    "ball", "bike", "bus", "kite", "sheep", "cow", "plane", "clock", "bench",
];
const ATTRIBUTE_NAMES: &[&str] = &[
    "red", "blue", "green", "small", "large", "white", "black", "wooden", "striped", "shiny",
    "old", "young",
];
const PREDICATE_NAMES: &[&str] = &[
    "on", "near", "under", "behind", "holding", "beside", "above", "facing",
];

/// Function word joining clauses in a caption.
pub const JOINER: &str = "and";

fn names(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| {
            base.get(i)
                .map_or_else(|| format!("{prefix}{i}"), |s| s.to_string())
        })
        .collect()
}

/// `[x_min, y_min, x_max, y_max, width, height]` of a unit-square box.
pub fn box_encoding(b: &BBox) -> Vec<f64> {
    vec![
        b.x_min,
        b.y_min,
        b.x_max,
        b.y_max,
        b.x_max - b.x_min,
        b.y_max - b.y_min,
    ]
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Deterministic scene and pair generator for one corpus configuration.
#[derive(Clone, Debug)]
pub struct Generator {
    header: CorpusHeader,
}

impl Generator {
    pub fn new(config: CorpusConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        // stream 0 holds the prototypes; pair i uses stream i + 1
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let category = (0..config.n_categories)
            .map(|_| gaussian_vec(&mut rng, config.feat_dim))
            .collect();
        let attribute = (0..config.n_attributes)
            .map(|_| gaussian_vec(&mut rng, config.feat_dim))
            .collect();
        let header = CorpusHeader {
            schema_version: SCHEMA_VERSION,
            category_names: names(CATEGORY_NAMES, config.n_categories, "object"),
            attribute_names: names(ATTRIBUTE_NAMES, config.n_attributes, "attr"),
            predicate_names: names(PREDICATE_NAMES, config.n_predicates, "rel"),
            prototypes: Prototypes {
                category,
                attribute,
            },
            config,
        };
        Ok(Self { header })
    }

    pub fn from_header(header: CorpusHeader) -> Self {
        Self { header }
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.header.config
    }

    pub fn pair_rng(&self, pair_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.header.config.seed);
        rng.set_stream(pair_id + 1);
        rng
    }

    pub fn generate_scene(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        let c = &self.header.config;
        let (lo, hi) = c.objects_per_scene;
        let n = rng.random_range(lo..=hi);
        let objects = (0..n)
            .map(|_| {
                let category = rng.random_range(0..c.n_categories);
                let attribute = rng.random_range(0..c.n_attributes);
                let (x_min, x_max) = random_span(rng);
                let (y_min, y_max) = random_span(rng);
                SceneObject {
                    category,
                    attribute,
                    bbox: BBox::new(x_min, y_min, x_max, y_max),
                }
            })
            .collect();
        let mut relations = Vec::new();
        if n >= 2 {
            let n_rel = rng.random_range(0..=c.max_relations.min(n - 1));
            for _ in 0..n_rel {
                let subject = rng.random_range(0..n);
                let mut object = rng.random_range(0..n - 1);
                if object >= subject {
                    object += 1;
                }
                relations.push(Relation {
                    subject,
                    predicate: rng.random_range(0..c.n_predicates),
                    object,
                });
            }
        }
        SceneSpec { objects, relations }
    }

    /// Caption, phrases and region features for a scene.
    pub fn render_pair(&self, pair_id: u64, scene: &SceneSpec, rng: &mut ChaCha8Rng) -> SynthPair {
        let h = &self.header;
        let c = &h.config;
        let cat = |o: usize| h.category_names[scene.objects[o].category].clone();

        let mut caption = Vec::new();
        let mut phrases = Vec::new();
        for (i, o) in scene.objects.iter().enumerate() {
            if i > 0 {
                caption.push(JOINER.to_string());
            }
            let words = vec![h.attribute_names[o.attribute].clone(), cat(i)];
            caption.extend(words.iter().cloned());
            phrases.push(Phrase {
                words,
                regions: vec![i],
            });
        }
        for r in &scene.relations {
            let words = vec![
                cat(r.subject),
                h.predicate_names[r.predicate].clone(),
                cat(r.object),
            ];
            caption.push(JOINER.to_string());
            caption.extend(words.iter().cloned());
            let mut regions = vec![r.subject, r.object];
            regions.sort_unstable();
            phrases.push(Phrase { words, regions });
        }

        let mut region_features = Vec::with_capacity(scene.objects.len());
        for o in &scene.objects {
            let proto = &h.prototypes.category[o.category];
            let offset = &h.prototypes.attribute[o.attribute];
            let mut f: Vec<f64> = proto
                .iter()
                .zip(offset)
                .map(|(&p, &a)| {
                    let noise: f64 = StandardNormal.sample(rng);
                    p + c.attribute_scale * a + c.feature_noise_sigma * noise
                })
                .collect();
            f.extend(box_encoding(&o.bbox));
            region_features.push(f);
        }

        let gt_alignment = phrases.iter().map(|p| p.regions.clone()).collect();
        SynthPair {
            pair_id,
            caption,
            phrases,
            boxes: scene.objects.iter().map(|o| o.bbox).collect(),
            region_features,
            tags: scene
                .objects
                .iter()
                .map(|o| h.category_names[o.category].clone())
                .collect(),
            gt_alignment,
        }
    }

    pub fn generate_pair(&self, pair_id: u64) -> SynthPair {
        let mut rng = self.pair_rng(pair_id);
        let scene = self.generate_scene(&mut rng);
        self.render_pair(pair_id, &scene, &mut rng)
    }

    pub fn generate_corpus(&self) -> Corpus {
        let pairs = (0..self.header.config.n_pairs as u64)
            .map(|id| self.generate_pair(id))
            .collect();
        Corpus {
            header: self.header.clone(),
            pairs,
        }
    }
}

/// A sub-interval of [0, 1] at least 0.1 long.
fn random_span(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let lo = rng.random::<f64>() * 0.8;
    let len = 0.1 + rng.random::<f64>() * (0.9 - lo);
    (lo, (lo + len).min(1.0))
}
