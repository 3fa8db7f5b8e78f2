//! Synthetic benchmark world: category vocabulary with confusable appearance
//! prototypes, random room scenes, a simulated object detector, and template
//! referring expressions with eval-only ground truth.
//!
//! The generator only ever emits queries that are *true* and *discriminative*
//! (exactly one same-category instance satisfies the stated relation), so
//! grounding accuracy is well-defined without human annotation.

mod generate;
mod io;

pub use generate::{
    build_dataset, generate_query, generate_scene, generate_split, synth_detect, DatasetSummary,
};
pub use io::{
    gt_proposals, load_dataset, load_meta, meta_path_for, scrub_eval_sections, write_dataset,
    LoadMode,
};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Box3, Relation, RelationParams};

/// Errors from generation or dataset I/O.
#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("could not place {unplaced} of {total} objects after {retries} retries")]
    Placement {
        unplaced: usize,
        total: usize,
        retries: usize,
    },
    #[error("no discriminative (target, relation, anchor) triple in scene {0}")]
    NoDiscriminativeTriple(String),
    #[error("scene {0} has no usable proposals")]
    NoProposals(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset file {path}: {msg}")]
    Dataset { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---- category vocabulary ---------------------------------------------------

/// Built-in category names; a config selects a prefix of this list.
pub const BUILTIN_CATEGORIES: [&str; 10] = [
    "table",
    "end table",
    "chair",
    "armchair",
    "sofa",
    "bed",
    "lamp",
    "desk",
    "nightstand",
    "toilet paper",
];

/// Index pairs of [`BUILTIN_CATEGORIES`] whose appearance prototypes are
/// deliberately confusable.
pub const BUILTIN_CONFUSABLE_PAIRS: [(usize, usize); 2] = [(0, 1), (2, 3)];

/// Cosine similarity placed between confusable prototypes.
const CONFUSABLE_COSINE: f64 = 0.93;
/// Maximum |cosine| tolerated between *independent* prototypes.
const INDEPENDENT_COSINE_CAP: f64 = 0.6;

/// Ordered category names with unit-norm appearance prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryVocab {
    pub names: Vec<String>,
    /// One unit-norm prototype of `appearance_dim` floats per category.
    pub prototypes: Vec<Vec<f64>>,
    /// Pairs whose prototypes sit within cosine >= 0.9 of each other.
    pub confusable_pairs: Vec<(usize, usize)>,
}

impl CategoryVocab {
    /// Builds prototypes deterministically from the name list alone, so two
    /// datasets over the same categories share appearance space.
    ///
    /// Second members of confusable pairs are placed at cosine
    /// [`CONFUSABLE_COSINE`] from their partner; all other pairs are resampled
    /// until their |cosine| is below [`INDEPENDENT_COSINE_CAP`].
    pub fn build(
        names: Vec<String>,
        confusable_pairs: Vec<(usize, usize)>,
        appearance_dim: usize,
    ) -> Result<Self, GenError> {
        let c = names.len();
        if c == 0 {
            return Err(GenError::Vocab("empty category list".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != c {
            return Err(GenError::Vocab("category names must be unique".into()));
        }
        if appearance_dim < 3 {
            return Err(GenError::Vocab(format!(
                "appearance_dim {appearance_dim} too small to separate prototypes"
            )));
        }
        for &(i, j) in &confusable_pairs {
            if i >= c || j >= c || i == j {
                return Err(GenError::Vocab(format!(
                    "confusable pair ({i},{j}) out of range for {c} categories"
                )));
            }
        }
        // Fixed internal seed: prototypes are a function of the vocabulary,
        // not of any particular dataset.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0A70);
        let followers: BTreeSet<usize> = confusable_pairs.iter().map(|&(_, j)| j).collect();
        let mut prototypes: Vec<Option<Vec<f64>>> = vec![None; c];
        for i in 0..c {
            if followers.contains(&i) {
                continue;
            }
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 1000 {
                    return Err(GenError::Vocab(
                        "could not separate independent prototypes".into(),
                    ));
                }
                let cand = random_unit(&mut rng, appearance_dim);
                let ok = prototypes.iter().flatten().all(|p| {
                    dot(&cand, p).abs() < INDEPENDENT_COSINE_CAP
                });
                if ok {
                    prototypes[i] = Some(cand);
                    break;
                }
            }
        }
        for &(i, j) in &confusable_pairs {
            let base = prototypes[i]
                .clone()
                .ok_or_else(|| GenError::Vocab(format!("pair leader {i} is itself a follower")))?;
            // Unit vector at the target cosine: cos·base + sin·orthogonal.
            let ortho = loop {
                let q = random_unit(&mut rng, appearance_dim);
                let mut o: Vec<f64> = q
                    .iter()
                    .zip(&base)
                    .map(|(qv, bv)| qv - dot(&q, &base) * bv)
                    .collect();
                let n = dot(&o, &o).sqrt();
                if n > 1e-6 {
                    for v in &mut o {
                        *v /= n;
                    }
                    break o;
                }
            };
            let sin = (1.0 - CONFUSABLE_COSINE * CONFUSABLE_COSINE).sqrt();
            let v: Vec<f64> = base
                .iter()
                .zip(&ortho)
                .map(|(b, o)| CONFUSABLE_COSINE * b + sin * o)
                .collect();
            prototypes[j] = Some(normalize(v));
        }
        Ok(CategoryVocab {
            names,
            prototypes: prototypes.into_iter().map(Option::unwrap).collect(),
            confusable_pairs,
        })
    }

    /// The default vocabulary over the first `count` built-in categories.
    pub fn builtin(count: usize, appearance_dim: usize) -> Result<Self, GenError> {
        if count == 0 || count > BUILTIN_CATEGORIES.len() {
            return Err(GenError::Vocab(format!(
                "category count {count} outside 1..={}",
                BUILTIN_CATEGORIES.len()
            )));
        }
        let names = BUILTIN_CATEGORIES[..count]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pairs = BUILTIN_CONFUSABLE_PAIRS
            .iter()
            .copied()
            .filter(|&(i, j)| i < count && j < count)
            .collect();
        CategoryVocab::build(names, pairs, appearance_dim)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Cosine similarity between prototypes `i` and `j`.
    pub fn prototype_cosine(&self, i: usize, j: usize) -> f64 {
        dot(&self.prototypes[i], &self.prototypes[j])
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---- scene types ------------------------------------------------------------

/// A placed object with its ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub category: usize,
    #[serde(rename = "box")]
    pub box3: Box3,
}

/// One detector output. `matched_object` is generator bookkeeping for tests
/// and never enters the dataset file or the model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub box3: Box3,
    pub confidence: f64,
    pub det_likelihood: Vec<f64>,
    pub appearance: Vec<f64>,
    #[serde(skip)]
    pub matched_object: Option<usize>,
}

/// Template bookkeeping for a generated query. `relation`/`anchor_category`
/// are absent for category-only queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMeta {
    pub target_category: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relation: Option<Relation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub anchor_category: Option<usize>,
}

/// Eval-only ground truth; lives under the top-level `eval` key so training
/// loaders can drop it wholesale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalInfo {
    pub target_id: usize,
}

/// A referring expression over one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub template_meta: Option<TemplateMeta>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalInfo>,
}

/// One scene record, exactly as serialized per dataset-file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub split: String,
    pub objects: Vec<SceneObject>,
    pub proposals: Vec<Proposal>,
    pub queries: Vec<QueryRecord>,
}

impl Scene {
    /// Looks up an object by id.
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Count of objects sharing `category`.
    pub fn category_count(&self, category: usize) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }
}

// ---- configuration -----------------------------------------------------------

/// Detector noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Std of Gaussian jitter added to box centers and sizes, meters.
    pub jitter_std: f64,
    /// Softmax temperature over prototype affinities; 0 means an exact
    /// one-hot at the true category.
    pub class_noise_temp: f64,
    /// Poisson mean of spurious proposals per scene.
    pub false_positive_rate: f64,
    /// Probability an object goes undetected.
    pub drop_rate: f64,
    /// Std of Gaussian noise on appearance features.
    pub appearance_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            jitter_std: 0.03,
            class_noise_temp: 0.15,
            false_positive_rate: 0.5,
            drop_rate: 0.05,
            // Proposals carry the category prototype verbatim: appearance
            // identifies the category, never the instance, so grounding a
            // specific instance must come from geometry.
            appearance_std: 0.0,
        }
    }
}

/// Benchmark generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Number of categories drawn from the built-in list.
    pub categories: usize,
    pub appearance_dim: usize,
    /// Room extent in meters; boxes are placed fully inside.
    pub room_extent: [f64; 3],
    pub objects_min: usize,
    pub objects_max: usize,
    /// Same-category instance count (target + distractors) per scene.
    pub distractors_min: usize,
    pub distractors_max: usize,
    /// Per-axis object size range, meters.
    pub size_min: f64,
    pub size_max: f64,
    /// Fraction of objects placed on the floor (the rest float, which makes
    /// above/below relations attainable).
    pub floor_bias: f64,
    pub queries_per_scene: usize,
    pub max_place_retries: usize,
    /// Extra separation beyond the relation margin required between the
    /// target and every same-category distractor, so generated queries are
    /// decidable with a comfortable geometric gap.
    pub discriminative_gap: f64,
    pub relation_params: RelationParams,
    pub noise: NoiseConfig,
    /// Keep at most this many proposals per scene.
    pub m_max: usize,
    /// Proposals below this confidence are discarded.
    pub conf_threshold: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train_scenes: 500,
            test_scenes: 100,
            categories: 10,
            appearance_dim: 16,
            room_extent: [6.0, 6.0, 3.0],
            objects_min: 5,
            objects_max: 8,
            distractors_min: 2,
            distractors_max: 4,
            size_min: 0.3,
            size_max: 0.9,
            floor_bias: 0.6,
            queries_per_scene: 2,
            max_place_retries: 200,
            discriminative_gap: 0.2,
            relation_params: RelationParams::default(),
            noise: NoiseConfig::default(),
            m_max: 24,
            conf_threshold: 0.05,
        }
    }
}

/// Dataset sidecar carrying everything shared across scenes: the vocabulary
/// (with prototypes, needed to rebuild noiseless proposals for GT-mode
/// evaluation), room geometry, and relation margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub vocab: CategoryVocab,
    pub appearance_dim: usize,
    pub room_extent: [f64; 3],
    pub relation_params: RelationParams,
    pub gen_seed: u64,
}

// ---- query templates ----------------------------------------------------------

/// Sentence templates for relational queries; `{t}`/`{r}`/`{a}` are the
/// target phrase, relation surface phrase, and anchor phrase.
pub const RELATIONAL_TEMPLATES: [&str; 5] = [
    "the {t} that is {r} the {a}",
    "the {t} {r} the {a}",
    "Find the {t} that is {r} the {a}.",
    "choose the {t} that is {r} the {a}",
    "pick the {t} {r} the {a}",
];

/// Sentence templates for category-only queries (unique-category scenes).
pub const CATEGORY_TEMPLATES: [&str; 3] = ["the {t}", "find the {t}", "Choose the {t}."];

/// Every non-category, non-relation word that can appear in a rendered query;
/// the text-encoder vocabulary is built from these plus category names and
/// relation phrases.
pub fn template_glue_words() -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    for t in RELATIONAL_TEMPLATES.iter().chain(CATEGORY_TEMPLATES.iter()) {
        for w in t.split_whitespace() {
            let w: String = w
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if !w.is_empty() && w != "t" && w != "r" && w != "a" {
                words.insert(w);
            }
        }
    }
    words
}
