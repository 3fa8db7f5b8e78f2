//! Training, inference, evaluation, and the ablation harness.
//!
//! Training is plain SGD with momentum over batches of (scene, query) pairs;
//! every batch builds one gradient graph so the cross-scene phrase contrast
//! sees the whole batch. Inference compares the two branches' maximum cosine
//! scores and is a pure function of those score vectors. Evaluation runs on a
//! frozen model, optionally across threads, and always reduces records in
//! query order so reports are byte-stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::iou_3d;
use crate::model::{Model, ModelConfig, ModelError};
use crate::numcore::{argmax, Graph, NodeId, NumError};
use crate::objectives::{
    aux_classifier_loss, detector_labels, loss_phr, loss_pn, loss_rel, loss_se, total_loss,
    LossTerms, LossWeights, PhraseSceneItem,
};
use crate::queryparse::{self, corrupt_target, generate_negatives, ParsedQuery};
use crate::synthworld::{
    gt_proposals, load_dataset, load_meta, CategoryVocab, DatasetMeta, GenError, LoadMode,
    Proposal, Scene,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] GenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("engine: {0}")]
    Invalid(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch} (scenes {scenes:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        scenes: Vec<String>,
    },
    #[error("no usable queries in {0}")]
    EmptyDataset(String),
    #[error("query produced no tokens: {0:?}")]
    EmptyQuery(String),
    #[error("no proposals to choose from")]
    NoProposals,
}

// ---- training ------------------------------------------------------------

/// Which loss components are active. `c1`/`c2` are the category-branch
/// terms (detector-supervised matching, negative-query contrast); `i1`/`i2`
/// are the instance-branch terms (cross-scene phrase contrast, relation
/// classification).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub c1: bool,
    pub c2: bool,
    pub i1: bool,
    pub i2: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            c1: true,
            c2: true,
            i1: true,
            i2: true,
        }
    }
}

impl AblationFlags {
    pub fn any_enabled(&self) -> bool {
        self.c1 || self.c2 || self.i1 || self.i2
    }

    /// Short label like `c1+c2+i1`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.c1 {
            parts.push("c1");
        }
        if self.c2 {
            parts.push("c2");
        }
        if self.i1 {
            parts.push("i1");
        }
        if self.i2 {
            parts.push("i2");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// The cumulative component ladder used by [`ablate`], weakest first.
pub fn ablation_ladder() -> [AblationFlags; 4] {
    let row = |c1, c2, i1, i2| AblationFlags { c1, c2, i1, i2 };
    [
        row(true, false, false, false),
        row(true, true, false, false),
        row(true, true, true, false),
        row(true, true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Queries per optimizer step; batches never repeat a scene, so the
    /// cross-scene contrast always compares distinct scenes.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Negative queries per positive for the category contrast.
    pub negatives: usize,
    /// Probability the parsed target phrase is kept intact; lower values
    /// emulate a noisier phrase extractor.
    pub extraction_fidelity: f64,
    /// Weight on the auxiliary detector-label cross-entropy that keeps the
    /// category classifier meaningful; 0 disables it.
    pub aux_weight: f64,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 50,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
            weights: LossWeights::default(),
            negatives: 25,
            extraction_fidelity: 1.0,
            aux_weight: 0.25,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |msg: &str| Err(EngineError::Invalid(msg.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !self.flags.any_enabled() {
            return fail("at least one loss component must be enabled");
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.extraction_fidelity) {
            return fail("extraction_fidelity must be in [0, 1]");
        }
        if !self.aux_weight.is_finite() || self.aux_weight < 0.0 {
            return fail("aux_weight must be finite and non-negative");
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Per-epoch mean of every loss that was computed at least once. `total` is
/// the optimized objective (weighted sum plus the auxiliary term).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub se: Option<f64>,
    pub pn: Option<f64>,
    pub phr: Option<f64>,
    pub rel: Option<f64>,
    pub aux: Option<f64>,
    pub total: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        let show = |v: Option<f64>| match v {
            Some(v) => format!("{v:.6}"),
            None => "-".into(),
        };
        format!(
            "epoch {:>3}  L_se {}  L_PN {}  L_phr {}  L_rel {}  total {:.6}",
            self.epoch,
            show(self.se),
            show(self.pn),
            show(self.phr),
            show(self.rel),
            self.total,
        )
    }
}

/// Bookkeeping for what training actually did; ablation tests assert that
/// disabled components never run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainCounters {
    pub queries_total: usize,
    pub queries_used: usize,
    pub parse_failures: usize,
    pub empty_proposal_scenes: usize,
    pub corrupted_targets: usize,
    /// Negative-query fusion passes across all epochs.
    pub negative_encodings: usize,
    pub se_terms: usize,
    pub pn_terms: usize,
    pub phr_batches: usize,
    pub rel_terms: usize,
    /// Queries where the relation loss was enabled but no usable triple
    /// survived parsing/truncation.
    pub rel_unavailable: usize,
    pub aux_terms: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
    pub counters: TrainCounters,
}

/// Fits the dataset-tied architecture fields (category count, appearance
/// width, room extent) to a dataset's metadata.
pub fn fitted_model_config(base: &ModelConfig, meta: &DatasetMeta) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.category_count = meta.vocab.len();
    cfg.appearance_dim = meta.appearance_dim;
    cfg.room_extent = meta.room_extent;
    cfg
}

struct TrainItem {
    scene: usize,
    parsed: ParsedQuery,
}

fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splits `order` into batches of at most `b` items with pairwise-distinct
/// scenes, preserving relative order; items that collide with an earlier
/// scene in the current batch spill into later batches.
fn pack_batches(order: &[usize], items: &[TrainItem], b: usize) -> Vec<Vec<usize>> {
    let mut remaining: Vec<usize> = order.to_vec();
    let mut batches = Vec::new();
    while !remaining.is_empty() {
        let mut batch = Vec::new();
        let mut scenes = BTreeSet::new();
        let mut rest = Vec::new();
        for &idx in &remaining {
            if batch.len() < b && scenes.insert(items[idx].scene) {
                batch.push(idx);
            } else {
                rest.push(idx);
            }
        }
        batches.push(batch);
        remaining = rest;
    }
    batches
}

fn sgd_step(
    model: &mut Model,
    velocity: &mut BTreeMap<String, Vec<f64>>,
    lr: f64,
    momentum: f64,
) {
    model.params.update_each(|name, values, grads| {
        let v = velocity.get_mut(name).expect("velocity per parameter");
        for ((vi, pi), &gi) in v.iter_mut().zip(values.iter_mut()).zip(grads.iter()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    });
}

/// Trains a fresh model on the dataset's train split.
///
/// The loader runs in weak-supervision mode, so evaluation targets never
/// reach this function. Queries are parsed once up front (applying the
/// extraction-fidelity corruption); each epoch reshuffles them with an
/// epoch-derived seed and takes one optimizer step per batch. Fully
/// deterministic for a fixed (config, dataset).
pub fn train(
    data_path: &str,
    base_model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EngineError> {
    cfg.validate()?;
    let scenes = load_dataset(data_path, LoadMode::Weak)?;
    let meta = load_meta(data_path)?;
    let mut model = Model::for_vocab(fitted_model_config(base_model, &meta), &meta.vocab, cfg.seed)?;

    let mut counters = TrainCounters::default();
    let mut corrupt_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xC0));
    let mut items = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        if scene.split != "train" {
            continue;
        }
        for q in &scene.queries {
            counters.queries_total += 1;
            if scene.proposals.is_empty() {
                counters.empty_proposal_scenes += 1;
                continue;
            }
            match queryparse::parse(&q.text, &meta.vocab) {
                Err(_) => counters.parse_failures += 1,
                Ok(mut parsed) => {
                    if corrupt_target(&mut parsed, &meta.vocab, cfg.extraction_fidelity, &mut corrupt_rng)
                    {
                        counters.corrupted_targets += 1;
                    }
                    items.push(TrainItem { scene: si, parsed });
                }
            }
        }
    }
    if items.is_empty() {
        return Err(EngineError::EmptyDataset(data_path.to_string()));
    }
    counters.queries_used = items.len();

    let mut velocity: BTreeMap<String, Vec<f64>> = model
        .params
        .iter_with_grads()
        .map(|(name, value, _)| (name.to_string(), vec![0.0; value.values().len()]))
        .collect();

    let w = &cfg.weights;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1 + epoch as u64)));
        let batches = pack_batches(&order, &items, cfg.batch_size);

        // Per-loss (sum, batches-contributing) accumulators for the epoch log.
        let mut acc: [(f64, usize); 5] = [(0.0, 0); 5];
        let mut total_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            model.params.zero_grads();
            let mut g = Graph::new();
            // Negative-query ranking uses the current token embeddings; they
            // are frozen within a batch, so compute the table once.
            let cat_embeddings = if cfg.flags.c2 {
                Some(model.category_phrase_embeddings(&meta.vocab)?)
            } else {
                None
            };

            let mut se_nodes = Vec::new();
            let mut pn_nodes = Vec::new();
            let mut rel_nodes = Vec::new();
            let mut aux_nodes = Vec::new();
            let mut phr_items = Vec::new();
            for &idx in batch {
                let item = &items[idx];
                let scene = &scenes[item.scene];
                let f_po_raw = model.encode_proposals(&mut g, &scene.proposals)?;
                let text = model.encode_text(&mut g, &item.parsed.tokens)?;
                let spans: Vec<(usize, usize)> =
                    item.parsed.noun_phrases.iter().map(|np| np.span).collect();
                let pair = model.fuse(&mut g, f_po_raw, &text, &spans)?;

                if cfg.flags.c1 {
                    let tc = item.parsed.target_phrase().category;
                    se_nodes.push(loss_se(&mut g, &pair, tc, w.tau_se)?);
                }
                if let Some(embeddings) = &cat_embeddings {
                    let negs =
                        generate_negatives(&item.parsed, &meta.vocab, embeddings, cfg.negatives)
                            .map_err(|e| EngineError::Invalid(e.to_string()))?;
                    let (lo, hi) = item.parsed.target_phrase().span;
                    let mut f_se_negs = Vec::with_capacity(negs.categories.len());
                    for &cat in &negs.categories {
                        // Same token sequence with the target span swapped;
                        // category names tokenize to one merged token.
                        let mut tokens = item.parsed.tokens[..lo].to_vec();
                        tokens.push(meta.vocab.names[cat].clone());
                        tokens.extend_from_slice(&item.parsed.tokens[hi..]);
                        let neg_text = model.encode_text(&mut g, &tokens)?;
                        let neg_pair = model.fuse(&mut g, f_po_raw, &neg_text, &[])?;
                        f_se_negs.push(neg_pair.f_se);
                        counters.negative_encodings += 1;
                    }
                    pn_nodes.push(loss_pn(&mut g, pair.f_po, pair.f_se, &f_se_negs, w.tau)?);
                }
                if cfg.flags.i1 {
                    if let Some(f_phr) = pair.f_phr {
                        phr_items.push(PhraseSceneItem {
                            f_phr,
                            f_po: pair.f_po,
                        });
                    }
                }
                if cfg.flags.i2 {
                    match loss_rel(&mut g, &model, &item.parsed, &pair)? {
                        Some(node) => rel_nodes.push(node),
                        None => counters.rel_unavailable += 1,
                    }
                }
                if cfg.aux_weight > 0.0 {
                    let labels = detector_labels(&scene.proposals);
                    aux_nodes.push(aux_classifier_loss(&mut g, pair.p_s_logits, &labels)?);
                }
            }
            counters.se_terms += se_nodes.len();
            counters.pn_terms += pn_nodes.len();
            counters.rel_terms += rel_nodes.len();
            counters.aux_terms += aux_nodes.len();

            let mean_of = |g: &mut Graph, nodes: &[NodeId]| -> Result<Option<NodeId>, EngineError> {
                if nodes.is_empty() {
                    return Ok(None);
                }
                let inv = 1.0 / nodes.len() as f64;
                let weighted: Vec<(NodeId, f64)> = nodes.iter().map(|&n| (n, inv)).collect();
                Ok(Some(g.add_scaled(&weighted)?))
            };
            let phr = if !phr_items.is_empty() {
                counters.phr_batches += 1;
                Some(loss_phr(&mut g, &phr_items, w.tau)?)
            } else {
                None
            };
            let terms = LossTerms {
                se: mean_of(&mut g, &se_nodes)?,
                pn: mean_of(&mut g, &pn_nodes)?,
                phr,
                rel: mean_of(&mut g, &rel_nodes)?,
            };
            let bundle = total_loss(&mut g, terms, w)?;
            let aux = mean_of(&mut g, &aux_nodes)?;
            let (root, aux_value) = match aux {
                Some(aux_node) => {
                    let root = g.add_scaled(&[(bundle.total, 1.0), (aux_node, cfg.aux_weight)])?;
                    (root, Some(g.value(aux_node).item()?))
                }
                None => (bundle.total, None),
            };

            let root_value = g.value(root).item()?;
            if !root_value.is_finite() {
                return Err(EngineError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    scenes: batch
                        .iter()
                        .map(|&i| scenes[items[i].scene].scene_id.clone())
                        .collect(),
                });
            }
            g.backward(root, &mut model.params)?;
            sgd_step(&mut model, &mut velocity, cfg.lr, cfg.momentum);

            for (slot, v) in [bundle.se, bundle.pn, bundle.phr, bundle.rel, aux_value]
                .into_iter()
                .enumerate()
            {
                if let Some(v) = v {
                    acc[slot].0 += v;
                    acc[slot].1 += 1;
                }
            }
            total_sum += root_value;
        }

        let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
        epochs.push(EpochStats {
            epoch,
            se: mean(acc[0]),
            pn: mean(acc[1]),
            phr: mean(acc[2]),
            rel: mean(acc[3]),
            aux: mean(acc[4]),
            total: total_sum / batches.len() as f64,
        });
    }

    Ok(TrainOutcome {
        model,
        epochs,
        counters,
    })
}

// ---- inference -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Category,
    Instance,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Category => "category",
            Branch::Instance => "instance",
        }
    }
}

/// One grounding decision with the scores behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    pub proposal: usize,
    pub branch: Branch,
    /// Sentence-proposal cosine per proposal.
    pub p_c: Vec<f64>,
    /// Best phrase-proposal cosine per proposal; absent when no phrase was
    /// extracted.
    pub p_f: Option<Vec<f64>>,
    /// The query had no recognizable noun phrase, so only the sentence
    /// branch ran.
    pub parse_failed: bool,
}

/// Picks the branch with the higher maximum score, then that branch's best
/// proposal. Ties inside a branch go to the lowest index; an exact
/// cross-branch tie goes to the sentence (category) branch, the coarser and
/// safer signal. Pure, so scaling both vectors by one positive constant
/// never changes the outcome.
pub fn decide(p_c: &[f64], p_f: Option<&[f64]>) -> (usize, Branch) {
    let ci = argmax(p_c);
    match p_f {
        None => (ci, Branch::Category),
        Some(pf) => {
            let fi = argmax(pf);
            if p_c[ci] >= pf[fi] {
                (ci, Branch::Category)
            } else {
                (fi, Branch::Instance)
            }
        }
    }
}

/// Grounds one query against one proposal set.
///
/// A query whose parse finds no noun phrase still runs the sentence branch
/// on the raw token sequence; a query with no tokens at all is an error.
pub fn infer(
    model: &Model,
    vocab: &CategoryVocab,
    proposals: &[Proposal],
    query: &str,
) -> Result<InferOutcome, EngineError> {
    if proposals.is_empty() {
        return Err(EngineError::NoProposals);
    }
    let (tokens, spans, parse_failed) = match queryparse::parse(query, vocab) {
        Ok(parsed) => {
            let spans = parsed.noun_phrases.iter().map(|np| np.span).collect();
            (parsed.tokens, spans, false)
        }
        Err(_) => {
            let tokens = queryparse::tokenize(query, vocab);
            if tokens.is_empty() {
                return Err(EngineError::EmptyQuery(query.to_string()));
            }
            (tokens, Vec::new(), true)
        }
    };

    let mut g = Graph::new();
    let f_po = model.encode_proposals(&mut g, proposals)?;
    let text = model.encode_text(&mut g, &tokens)?;
    let pair = model.fuse(&mut g, f_po, &text, &spans)?;

    let pc_node = g.cosine_rows(pair.f_se, pair.f_po)?;
    let p_c: Vec<f64> = g.value(pc_node).row_slice(0).to_vec();
    let p_f: Option<Vec<f64>> = match pair.f_phr {
        None => None,
        Some(f_phr) => {
            // Rows are phrases, columns proposals; each proposal's score is
            // its best phrase match.
            let sims = g.cosine_rows(f_phr, pair.f_po)?;
            let t = g.value(sims);
            Some(
                (0..t.cols())
                    .map(|y| (0..t.rows()).map(|x| t.at(x, y)).fold(f64::NEG_INFINITY, f64::max))
                    .collect(),
            )
        }
    };
    let (proposal, branch) = decide(&p_c, p_f.as_deref());
    Ok(InferOutcome {
        proposal,
        branch,
        p_c,
        p_f,
        parse_failed,
    })
}

// ---- evaluation ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Score against the detector's noisy proposals; correctness is box IoU
    /// against the target object at the 0.25/0.50 thresholds.
    Detector,
    /// Replace proposals with the true object boxes (one per object), so
    /// grounding reduces to picking the right object.
    Gt,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Detector => "detector",
            EvalMode::Gt => "gt",
        }
    }
}

/// Accuracy at an IoU threshold is strict: exactly meeting the threshold
/// does not count.
pub fn correct_at(iou: f64, threshold: f64) -> bool {
    iou > threshold
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEvalRecord {
    pub scene_id: String,
    pub query: String,
    pub branch: Branch,
    pub chosen: usize,
    /// IoU between the chosen box and the target object's box.
    pub iou: f64,
    pub correct25: bool,
    pub correct50: bool,
    /// Whether the chosen proposal IS the target object; only meaningful
    /// with ground-truth proposals.
    pub correct_gt: Option<bool>,
    pub max_pc: f64,
    pub max_pf: Option<f64>,
    pub parse_failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub total: usize,
    pub acc25: f64,
    pub acc50: f64,
    /// Classification accuracy; present when every record carries a
    /// ground-truth verdict (gt mode).
    pub acc_gt: Option<f64>,
    pub category_choices: usize,
    pub instance_choices: usize,
    pub parse_failures: usize,
    /// Calibration diagnostic: the branch scores are raw cosines compared
    /// across different comparison sets, so their typical maxima are logged.
    pub mean_max_pc: f64,
    pub mean_max_pf: Option<f64>,
    pub records: Vec<QueryEvalRecord>,
}

impl EvalReport {
    /// Recomputes every aggregate from the per-query records, which are the
    /// report's source of truth.
    pub fn from_records(mode: EvalMode, records: Vec<QueryEvalRecord>) -> EvalReport {
        let total = records.len();
        let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
        let acc25 = frac(records.iter().filter(|r| r.correct25).count());
        let acc50 = frac(records.iter().filter(|r| r.correct50).count());
        let acc_gt = if total > 0 && records.iter().all(|r| r.correct_gt.is_some()) {
            Some(frac(records.iter().filter(|r| r.correct_gt == Some(true)).count()))
        } else {
            None
        };
        let category_choices = records.iter().filter(|r| r.branch == Branch::Category).count();
        let instance_choices = total - category_choices;
        let parse_failures = records.iter().filter(|r| r.parse_failed).count();
        let mean_max_pc = if total == 0 {
            0.0
        } else {
            records.iter().map(|r| r.max_pc).sum::<f64>() / total as f64
        };
        let with_pf = records.iter().filter_map(|r| r.max_pf).collect::<Vec<_>>();
        let mean_max_pf = if with_pf.is_empty() {
            None
        } else {
            Some(with_pf.iter().sum::<f64>() / with_pf.len() as f64)
        };
        EvalReport {
            mode,
            total,
            acc25,
            acc50,
            acc_gt,
            category_choices,
            instance_choices,
            parse_failures,
            mean_max_pc,
            mean_max_pf,
            records,
        }
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode.as_str());
        let _ = writeln!(s, "queries: {}", self.total);
        let _ = writeln!(s, "Acc@.25: {:.4}", self.acc25);
        let _ = writeln!(s, "Acc@.50: {:.4}", self.acc50);
        if let Some(acc) = self.acc_gt {
            let _ = writeln!(s, "Acc: {acc:.4}");
        }
        let _ = writeln!(s, "category-branch choices: {}", self.category_choices);
        let _ = writeln!(s, "instance-branch choices: {}", self.instance_choices);
        let _ = writeln!(s, "parse failures: {}", self.parse_failures);
        let _ = writeln!(s, "mean max p_c: {:.4}", self.mean_max_pc);
        match self.mean_max_pf {
            Some(v) => {
                let _ = writeln!(s, "mean max p_f: {v:.4}");
            }
            None => {
                let _ = writeln!(s, "mean max p_f: -");
            }
        }
        s
    }

    /// Per-query records as CSV.
    pub fn records_csv(&self) -> String {
        let mut s = String::from("scene_id,query,branch,chosen_proposal,iou,correct25,correct50\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                csv_field(&r.scene_id),
                csv_field(&r.query),
                r.branch.as_str(),
                r.chosen,
                r.iou,
                r.correct25,
                r.correct50,
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluates a frozen model on the dataset's test split.
///
/// `threads` > 1 splits the queries across that many worker threads; the
/// records are merged back in query order, so the report is identical for
/// any thread count.
pub fn evaluate(
    data_path: &str,
    model: &Model,
    mode: EvalMode,
    threads: usize,
) -> Result<EvalReport, EngineError> {
    let scenes = load_dataset(data_path, LoadMode::Full)?;
    let meta = load_meta(data_path)?;

    let mut gt_sets: BTreeMap<usize, Vec<Proposal>> = BTreeMap::new();
    let mut work: Vec<(usize, usize)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        if scene.split != "test" {
            continue;
        }
        if mode == EvalMode::Gt {
            gt_sets.insert(si, gt_proposals(scene, &meta)?);
        }
        for qi in 0..scene.queries.len() {
            work.push((si, qi));
        }
    }
    if work.is_empty() {
        return Err(EngineError::EmptyDataset(format!(
            "{data_path} (test split)"
        )));
    }

    let eval_one = |&(si, qi): &(usize, usize)| -> Result<QueryEvalRecord, EngineError> {
        let scene = &scenes[si];
        let q = &scene.queries[qi];
        let eval = q.eval.ok_or_else(|| {
            EngineError::Invalid(format!(
                "scene {} query {qi} lacks an evaluation target",
                scene.scene_id
            ))
        })?;
        let proposals: &[Proposal] = match mode {
            EvalMode::Detector => &scene.proposals,
            EvalMode::Gt => &gt_sets[&si],
        };
        let out = infer(model, &meta.vocab, proposals, &q.text)?;
        let gold = &scene
            .object(eval.target_id)
            .expect("eval targets are validated at load")
            .box3;
        let iou = iou_3d(&proposals[out.proposal].box3, gold);
        let max_pc = out.p_c[out.proposal].max(
            out.p_c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let max_pf = out
            .p_f
            .as_ref()
            .map(|pf| pf.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        Ok(QueryEvalRecord {
            scene_id: scene.scene_id.clone(),
            query: q.text.clone(),
            branch: out.branch,
            chosen: out.proposal,
            iou,
            correct25: correct_at(iou, 0.25),
            correct50: correct_at(iou, 0.50),
            // Ground-truth proposals sit in object-id order, so the chosen
            // index names an object directly.
            correct_gt: (mode == EvalMode::Gt).then(|| out.proposal == eval.target_id),
            max_pc,
            max_pf,
            parse_failed: out.parse_failed,
        })
    };

    let threads = threads.max(1).min(work.len());
    let records: Vec<QueryEvalRecord> = if threads == 1 {
        work.iter().map(|w| eval_one(w)).collect::<Result<_, _>>()?
    } else {
        let chunk = work.len().div_ceil(threads);
        let results: Vec<Result<Vec<QueryEvalRecord>, EngineError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = work
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|w| eval_one(w)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker")).collect()
        });
        let mut merged = Vec::with_capacity(work.len());
        for part in results {
            merged.extend(part?);
        }
        merged
    };

    Ok(EvalReport::from_records(mode, records))
}

/// Expected accuracy of a uniform pick among the target's same-category
/// instances, averaged over the given scenes' evaluable queries. This is the
/// ceiling for any method that uses category information alone.
pub fn category_ceiling(scenes: &[Scene], split: &str) -> Result<f64, EngineError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for scene in scenes.iter().filter(|s| s.split == split) {
        for q in &scene.queries {
            let Some(eval) = q.eval else { continue };
            let target = scene.object(eval.target_id).ok_or_else(|| {
                EngineError::Invalid(format!(
                    "scene {}: eval target {} missing",
                    scene.scene_id, eval.target_id
                ))
            })?;
            let instances = scene.category_count(target.category);
            sum += 1.0 / instances as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EngineError::EmptyDataset(format!("split {split:?}")));
    }
    Ok(sum / n as f64)
}

// ---- ablation ------------------------------------------------------------

pub struct AblationRow {
    pub flags: AblationFlags,
    pub counters: TrainCounters,
    pub detector: EvalReport,
    pub gt: EvalReport,
}

pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("c1,c2,i1,i2,Acc@.25,Acc@.50,Acc\n");
        for row in &self.rows {
            let flag = |b: bool| if b { 1 } else { 0 };
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.4}",
                flag(row.flags.c1),
                flag(row.flags.c2),
                flag(row.flags.i1),
                flag(row.flags.i2),
                row.detector.acc25,
                row.detector.acc50,
                row.gt.acc_gt.unwrap_or(0.0),
            );
        }
        s
    }
}

/// Trains and evaluates the four cumulative component configurations with a
/// shared seed and dataset, weakest first.
pub fn ablate(
    data_path: &str,
    base_model: &ModelConfig,
    base: &TrainConfig,
    threads: usize,
) -> Result<AblationTable, EngineError> {
    let mut rows = Vec::with_capacity(4);
    for flags in ablation_ladder() {
        let mut cfg = base.clone();
        cfg.flags = flags;
        let outcome = train(data_path, base_model, &cfg)?;
        let detector = evaluate(data_path, &outcome.model, EvalMode::Detector, threads)?;
        let gt = evaluate(data_path, &outcome.model, EvalMode::Gt, threads)?;
        rows.push(AblationRow {
            flags,
            counters: outcome.counters,
            detector,
            gt,
        });
    }
    Ok(AblationTable { rows })
}
