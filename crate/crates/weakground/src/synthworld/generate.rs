//! Scene placement, the simulated detector, and template query generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::{iou_3d, Box3, Relation, RELATION_LIBRARY};
use crate::numcore::softmax;

use super::io::write_dataset;
use super::{
    CategoryVocab, DatasetMeta, EvalInfo, GenConfig, GenError, Proposal, QueryRecord, Scene,
    SceneObject, TemplateMeta, CATEGORY_TEMPLATES, RELATIONAL_TEMPLATES,
};

/// Counts reported by [`build_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub queries: usize,
    /// Scenes discarded because no discriminative query or proposal set
    /// could be produced.
    pub skipped: usize,
    pub path: String,
    pub meta_path: String,
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std <= 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).unwrap().sample(rng)
    }
}

fn sample_poisson(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    if rate <= 0.0 {
        0
    } else {
        Poisson::new(rate).unwrap().sample(rng) as usize
    }
}

/// Splitmix-style mixer deriving independent per-scene seeds.
fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---- scene placement -----------------------------------------------------

/// Generates one scene: a target category with its distractor instances, a
/// similarly duplicated decoy category when the object budget allows, an
/// anchor-candidate object, and unique-category fillers, all placed without
/// overlap inside the room. Queries and proposals are added by the callers.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<Scene, GenError> {
    let vocab = CategoryVocab::builtin(cfg.categories, cfg.appearance_dim)?;
    generate_scene_with_vocab(cfg, &vocab, seed, "scene_00000", "train")
}

pub(super) fn generate_scene_with_vocab(
    cfg: &GenConfig,
    vocab: &CategoryVocab,
    seed: u64,
    scene_id: &str,
    split: &str,
) -> Result<Scene, GenError> {
    if cfg.objects_min == 0 || cfg.objects_min > cfg.objects_max {
        return Err(GenError::Config(format!(
            "object count range [{}, {}] invalid",
            cfg.objects_min, cfg.objects_max
        )));
    }
    if cfg.distractors_min == 0 || cfg.distractors_min > cfg.distractors_max {
        return Err(GenError::Config(format!(
            "distractor range [{}, {}] invalid",
            cfg.distractors_min, cfg.distractors_max
        )));
    }
    let c = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let mut instances = rng
        .gen_range(cfg.distractors_min..=cfg.distractors_max)
        .min(n);
    // When the scene is large enough, reserve room for a second duplicated
    // category plus one unique object, so that "which category appears more
    // than once" never identifies the query target by itself.
    if instances >= 2 && c >= 3 {
        instances = instances.min(n.saturating_sub(3)).max(cfg.distractors_min).min(n);
    }
    let target_cat = rng.gen_range(0..c);

    // Category layout: `instances` copies of the target category, a decoy
    // category duplicated to a similar count when it fits, then unique
    // fillers while fresh categories remain.
    let mut cats = vec![target_cat; instances];
    let mut remaining: Vec<usize> = (0..c).filter(|&k| k != target_cat).collect();
    let decoy_budget = (n - cats.len()).saturating_sub(1).min(cfg.distractors_max);
    if instances >= 2 && decoy_budget >= 2 && !remaining.is_empty() {
        let decoy_count = rng.gen_range(2..=decoy_budget);
        let pick = rng.gen_range(0..remaining.len());
        let decoy_cat = remaining.swap_remove(pick);
        cats.extend(std::iter::repeat(decoy_cat).take(decoy_count));
    }
    while cats.len() < n {
        if remaining.is_empty() {
            // Small vocabularies: fall back to arbitrary non-target reuse
            // (or the target itself when it is the whole vocabulary).
            let fallback = if c > 1 {
                (0..c).filter(|&k| k != target_cat).nth(rng.gen_range(0..c - 1)).unwrap()
            } else {
                target_cat
            };
            cats.push(fallback);
        } else {
            let pick = rng.gen_range(0..remaining.len());
            cats.push(remaining.swap_remove(pick));
        }
    }

    // Rejection-sample non-overlapping boxes.
    let mut boxes: Vec<Box3> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..cfg.max_place_retries {
            let size = [
                rng.gen_range(cfg.size_min..=cfg.size_max),
                rng.gen_range(cfg.size_min..=cfg.size_max),
                rng.gen_range(cfg.size_min..=cfg.size_max),
            ];
            let mut center = [0.0; 3];
            for axis in 0..2 {
                let half = size[axis] / 2.0;
                if cfg.room_extent[axis] <= size[axis] {
                    return Err(GenError::Config("room smaller than objects".into()));
                }
                center[axis] = rng.gen_range(half..=cfg.room_extent[axis] - half);
            }
            let half_z = size[2] / 2.0;
            center[2] = if rng.gen::<f64>() < cfg.floor_bias {
                half_z
            } else {
                rng.gen_range(half_z..=cfg.room_extent[2] - half_z)
            };
            let cand = Box3::new(center, size).expect("sizes sampled positive");
            if boxes.iter().all(|b| iou_3d(b, &cand) == 0.0) {
                boxes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GenError::Placement {
                unplaced: n - boxes.len(),
                total: n,
                retries: cfg.max_place_retries,
            });
        }
    }

    // Shuffle so object ids carry no information about the layout roles.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let objects = order
        .iter()
        .enumerate()
        .map(|(id, &slot)| SceneObject {
            id,
            category: cats[slot],
            box3: boxes[slot],
        })
        .collect();

    Ok(Scene {
        scene_id: scene_id.to_string(),
        split: split.to_string(),
        objects,
        proposals: Vec::new(),
        queries: Vec::new(),
    })
}

// ---- simulated detector ----------------------------------------------------

/// Simulates the external detector over a scene's objects: per-object jitter,
/// classification ambiguity from prototype affinities, dropped detections,
/// and Poisson false positives; the survivors are confidence-filtered and
/// capped to the top `m_max`.
pub fn synth_detect(
    scene: &Scene,
    vocab: &CategoryVocab,
    cfg: &GenConfig,
    seed: u64,
) -> Vec<Proposal> {
    let noise = &cfg.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = vocab.len();
    let mut proposals = Vec::with_capacity(scene.objects.len() + 2);
    for obj in &scene.objects {
        if rng.gen::<f64>() < noise.drop_rate {
            continue;
        }
        let mut center = obj.box3.center;
        let mut size = obj.box3.size;
        for axis in 0..3 {
            center[axis] += sample_normal(&mut rng, noise.jitter_std);
            size[axis] = (size[axis] + sample_normal(&mut rng, noise.jitter_std)).max(0.05);
        }
        let affinity: Vec<f64> = (0..c).map(|j| vocab.prototype_cosine(obj.category, j)).collect();
        let det_likelihood = class_distribution(&affinity, noise.class_noise_temp);
        let appearance: Vec<f64> = vocab.prototypes[obj.category]
            .iter()
            .map(|&p| p + sample_normal(&mut rng, noise.appearance_std))
            .collect();
        let confidence = (1.0 - sample_normal(&mut rng, 2.0 * noise.jitter_std).abs()).clamp(0.0, 1.0);
        proposals.push(Proposal {
            box3: Box3::new(center, size).expect("sizes clamped positive"),
            confidence,
            det_likelihood,
            appearance,
            matched_object: Some(obj.id),
        });
    }
    // Spurious detections: random boxes with near-uniform class likelihoods
    // and clutter appearance.
    for _ in 0..sample_poisson(&mut rng, noise.false_positive_rate) {
        let size = [
            rng.gen_range(cfg.size_min..=cfg.size_max),
            rng.gen_range(cfg.size_min..=cfg.size_max),
            rng.gen_range(cfg.size_min..=cfg.size_max),
        ];
        let mut center = [0.0; 3];
        for axis in 0..3 {
            let half = size[axis] / 2.0;
            center[axis] = rng.gen_range(half..=(cfg.room_extent[axis] - half).max(half));
        }
        let weights: Vec<f64> = (0..c).map(|_| 1.0 + sample_normal(&mut rng, 0.02).abs()).collect();
        let z: f64 = weights.iter().sum();
        let appearance: Vec<f64> = (0..vocab.prototypes[0].len())
            .map(|_| sample_normal(&mut rng, 0.3))
            .collect();
        proposals.push(Proposal {
            box3: Box3::new(center, size).expect("sampled positive"),
            confidence: rng.gen_range(0.1..0.6),
            det_likelihood: weights.into_iter().map(|w| w / z).collect(),
            appearance,
            matched_object: None,
        });
    }
    proposals.retain(|p| p.confidence >= cfg.conf_threshold);
    // Stable sort: equal confidences keep object order, so the noiseless
    // detector reproduces the object list exactly.
    proposals.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    proposals.truncate(cfg.m_max);
    proposals
}

/// Softmax of affinities at `temp`, or an exact one-hot at the argmax when
/// `temp` is zero (the noiseless-classifier limit).
fn class_distribution(affinity: &[f64], temp: f64) -> Vec<f64> {
    if temp > 0.0 {
        softmax(affinity, temp).expect("temp checked positive")
    } else {
        let arg = affinity
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut out = vec![0.0; affinity.len()];
        out[arg] = 1.0;
        out
    }
}

// ---- query generation --------------------------------------------------------

/// Signed slack of `rel(subject, anchor)`: positive iff the relation holds,
/// with magnitude equal to the geometric margin. `context` is the
/// same-category instance set used by closest/farthest.
fn relation_slack(
    rel: Relation,
    subject: &SceneObject,
    anchor: &SceneObject,
    context: &[&SceneObject],
    cfg: &GenConfig,
) -> f64 {
    let d = cfg.relation_params.margin;
    let s = subject.box3.center;
    let a = anchor.box3.center;
    match rel {
        Relation::Left => (a[0] - s[0]) - d,
        Relation::Right => (s[0] - a[0]) - d,
        Relation::Front => (a[1] - s[1]) - d,
        Relation::Behind => (s[1] - a[1]) - d,
        Relation::Above => (s[2] - a[2]) - d,
        Relation::Below => (a[2] - s[2]) - d,
        Relation::NextTo => cfg.relation_params.proximity - subject.box3.center_distance(&anchor.box3),
        Relation::Closest | Relation::Farthest => {
            let own = subject.box3.center_distance(&anchor.box3);
            let others = context.iter().filter(|o| o.id != subject.id);
            let mut slack = f64::INFINITY;
            for other in others {
                let theirs = other.box3.center_distance(&anchor.box3);
                let margin = match rel {
                    Relation::Closest => theirs - own,
                    _ => own - theirs,
                };
                slack = slack.min(margin);
            }
            slack
        }
    }
}

struct Candidate {
    target: usize,
    relation: Relation,
    anchor: usize,
}

/// Emits one template query for the scene.
///
/// When the scene has multi-instance categories (the distractor policy put
/// 2+ instances somewhere), the query must refer to one of them, so category
/// information alone can never identify the answer; the chosen relation
/// must hold for the target with at least `discriminative_gap` slack while
/// every same-category distractor fails it by the same gap. Only scenes
/// where every category is unique (single-instance policy) may phrase the
/// query by category alone.
pub fn generate_query(scene: &Scene, cfg: &GenConfig, vocab: &CategoryVocab, seed: u64) -> Result<QueryRecord, GenError> {
    generate_query_with(scene, cfg, vocab, seed, None)
}

/// The scene's duplicated categories in a seed-shuffled order. Callers that
/// emit several queries per scene walk this list so consecutive queries refer
/// to different duplicated categories whenever the scene offers a choice.
pub(super) fn duplicated_category_order(scene: &Scene, seed: u64) -> Vec<usize> {
    let mut cats: Vec<usize> = scene.objects.iter().map(|o| o.category).collect();
    cats.sort_unstable();
    cats.dedup();
    cats.retain(|&c| scene.category_count(c) >= 2);
    cats.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    cats
}

pub(super) fn generate_query_with(
    scene: &Scene,
    cfg: &GenConfig,
    vocab: &CategoryVocab,
    seed: u64,
    preferred_target: Option<usize>,
) -> Result<QueryRecord, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = cfg.discriminative_gap;

    // Anchor candidates: unique-category objects, so the anchor phrase is
    // itself unambiguous.
    let anchors: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| scene.category_count(o.category) == 1)
        .collect();

    let categories: Vec<usize> = {
        let mut cats: Vec<usize> = scene.objects.iter().map(|o| o.category).collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    };
    let multi_cats: Vec<usize> = categories
        .iter()
        .copied()
        .filter(|&c| scene.category_count(c) >= 2)
        .collect();
    // Target categories the query may refer to: the preferred duplicated
    // category when the caller supplies a valid one, else one of the
    // multi-instance ones (chosen at random) when present, otherwise any.
    let target_cats: Vec<usize> = match preferred_target {
        Some(tc) if multi_cats.contains(&tc) => vec![tc],
        _ if multi_cats.is_empty() => categories.clone(),
        _ => vec![multi_cats[rng.gen_range(0..multi_cats.len())]],
    };

    let mut relational: Vec<Candidate> = Vec::new();
    let mut unique_targets: Vec<usize> = Vec::new();
    for &tc in &target_cats {
        let instances: Vec<&SceneObject> =
            scene.objects.iter().filter(|o| o.category == tc).collect();
        if instances.len() == 1 {
            unique_targets.push(instances[0].id);
        }
        for target in &instances {
            for anchor in anchors.iter().filter(|a| a.category != tc) {
                for rel in RELATION_LIBRARY {
                    let slack = relation_slack(rel, target, anchor, &instances, cfg);
                    if slack < gap {
                        continue;
                    }
                    let discriminative = instances
                        .iter()
                        .filter(|o| o.id != target.id)
                        .all(|o| relation_slack(rel, o, anchor, &instances, cfg) <= -gap);
                    if discriminative {
                        relational.push(Candidate {
                            target: target.id,
                            relation: rel,
                            anchor: anchor.id,
                        });
                    }
                }
            }
        }
    }

    // Prefer relational phrasing; allow category-only phrasing for unique
    // targets half the time when both are available.
    let use_category_only = !unique_targets.is_empty()
        && (relational.is_empty() || rng.gen::<f64>() < 0.5);

    if use_category_only {
        let id = unique_targets[rng.gen_range(0..unique_targets.len())];
        let target = scene.object(id).expect("unique target exists");
        let template = CATEGORY_TEMPLATES[rng.gen_range(0..CATEGORY_TEMPLATES.len())];
        let text = template.replace("{t}", &vocab.names[target.category]);
        return Ok(QueryRecord {
            text,
            template_meta: Some(TemplateMeta {
                target_category: target.category,
                relation: None,
                anchor_category: None,
            }),
            eval: Some(EvalInfo { target_id: id }),
        });
    }
    if relational.is_empty() {
        return Err(GenError::NoDiscriminativeTriple(scene.scene_id.clone()));
    }
    let pick = &relational[rng.gen_range(0..relational.len())];
    let target = scene.object(pick.target).expect("candidate target exists");
    let anchor = scene.object(pick.anchor).expect("candidate anchor exists");
    let phrases = pick.relation.surface_phrases();
    let phrase = phrases[rng.gen_range(0..phrases.len())];
    let template = RELATIONAL_TEMPLATES[rng.gen_range(0..RELATIONAL_TEMPLATES.len())];
    let text = template
        .replace("{t}", &vocab.names[target.category])
        .replace("{r}", phrase)
        .replace("{a}", &vocab.names[anchor.category]);
    Ok(QueryRecord {
        text,
        template_meta: Some(TemplateMeta {
            target_category: target.category,
            relation: Some(pick.relation),
            anchor_category: Some(anchor.category),
        }),
        eval: Some(EvalInfo { target_id: pick.target }),
    })
}

// ---- dataset assembly ----------------------------------------------------------

/// Generates the requested train/test scenes in memory.
///
/// Scenes that yield no proposals or no discriminative query are skipped and
/// replaced, so the returned splits always match the requested counts.
pub fn generate_split(
    cfg: &GenConfig,
    seed: u64,
) -> Result<(Vec<Scene>, DatasetMeta, usize), GenError> {
    let vocab = CategoryVocab::builtin(cfg.categories, cfg.appearance_dim)?;
    let total = cfg.train_scenes + cfg.test_scenes;
    let mut scenes = Vec::with_capacity(total);
    let mut skipped = 0;
    let mut raw = 0u64;
    let attempt_cap = 50 * (total as u64) + 1000;
    while scenes.len() < total {
        if raw >= attempt_cap {
            return Err(GenError::Config(format!(
                "gave up after {raw} attempts: configuration keeps producing unusable scenes"
            )));
        }
        let scene_seed = derive_seed(seed, raw);
        raw += 1;
        let split = if scenes.len() < cfg.train_scenes { "train" } else { "test" };
        let scene_id = format!("scene_{:05}", scenes.len());
        let mut scene = match generate_scene_with_vocab(cfg, &vocab, scene_seed, &scene_id, split) {
            Ok(s) => s,
            Err(GenError::Placement { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        scene.proposals = synth_detect(&scene, &vocab, cfg, derive_seed(scene_seed, 1));
        if scene.proposals.is_empty() {
            skipped += 1;
            continue;
        }
        // Walk the duplicated categories so a scene's queries never agree on
        // a target when the scene offers a choice; a query therefore cannot
        // be grounded without reading which category it names.
        let rotation = duplicated_category_order(&scene, derive_seed(scene_seed, 99));
        let mut ok = true;
        for q in 0..cfg.queries_per_scene {
            let preferred = (!rotation.is_empty()).then(|| rotation[q % rotation.len()]);
            match generate_query_with(
                &scene,
                cfg,
                &vocab,
                derive_seed(scene_seed, 2 + q as u64),
                preferred,
            ) {
                Ok(query) => scene.queries.push(query),
                Err(GenError::NoDiscriminativeTriple(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if !ok {
            skipped += 1;
            continue;
        }
        scenes.push(scene);
    }
    let meta = DatasetMeta {
        vocab,
        appearance_dim: cfg.appearance_dim,
        room_extent: cfg.room_extent,
        relation_params: cfg.relation_params,
        gen_seed: seed,
    };
    Ok((scenes, meta, skipped))
}

/// Generates the benchmark and writes it (plus its metadata sidecar) to
/// `out_path`, returning split counts.
pub fn build_dataset(cfg: &GenConfig, seed: u64, out_path: &str) -> Result<DatasetSummary, GenError> {
    let (scenes, meta, skipped) = generate_split(cfg, seed)?;
    let meta_path = write_dataset(&scenes, &meta, out_path)?;
    Ok(DatasetSummary {
        train_scenes: cfg.train_scenes,
        test_scenes: cfg.test_scenes,
        queries: scenes.iter().map(|s| s.queries.len()).sum(),
        skipped,
        path: out_path.to_string(),
        meta_path,
    })
}
