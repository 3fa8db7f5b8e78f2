//! Training objectives for the two alignment branches.
//!
//! Category branch: `loss_se` pulls the sentence-proposal similarity
//! distribution toward the detector-informed category evidence, and
//! `loss_pn` contrasts the query against its category-swapped negatives
//! through a top-3 proposal compatibility score. Instance branch:
//! `loss_phr` contrasts phrase-proposal matching scores across the scenes of
//! a batch, and `loss_rel` asks a relation classifier to recover the parsed
//! relation from the two most phrase-compatible proposals. `total_loss`
//! combines whichever terms a query admits.
//!
//! Every loss consumes embeddings only through cosine similarity, so loss
//! values are invariant to rescaling the embeddings.

use serde::{Deserialize, Serialize};

use crate::model::{EncodedPair, Model};
use crate::numcore::{argmax, Graph, NodeId, NumError, NumResult};
use crate::queryparse::ParsedQuery;
use crate::synthworld::Proposal;

/// Floor applied to detector probabilities before taking logs.
const PROB_FLOOR: f64 = 1e-12;

/// Loss mixing weights and temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_se: f64,
    pub lambda_pn: f64,
    pub lambda_phr: f64,
    pub lambda_rel: f64,
    /// Temperature for the two InfoNCE losses.
    pub tau: f64,
    /// Temperature for the category-distribution matching loss.
    pub tau_se: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_se: 0.4,
            lambda_pn: 0.005,
            lambda_phr: 0.005,
            lambda_rel: 0.6,
            tau: 0.1,
            tau_se: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> NumResult<()> {
        let lambdas = [self.lambda_se, self.lambda_pn, self.lambda_phr, self.lambda_rel];
        if lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(NumError::contract("loss_weights", "lambdas must be >= 0"));
        }
        if self.tau <= 0.0 || self.tau_se <= 0.0 {
            return Err(NumError::contract("loss_weights", "temperatures must be > 0"));
        }
        Ok(())
    }
}

/// Graph nodes of the loss terms a query produced (each scalar); `None`
/// marks a term the query does not admit.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub se: Option<NodeId>,
    pub pn: Option<NodeId>,
    pub phr: Option<NodeId>,
    pub rel: Option<NodeId>,
}

/// The weighted total plus per-term values for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub total: NodeId,
    pub total_value: f64,
    pub se: Option<f64>,
    pub pn: Option<f64>,
    pub phr: Option<f64>,
    pub rel: Option<f64>,
}

/// Sharpens a probability-like vector with a log-space temperature:
/// `p[i] ∝ col[i]^(1/tau)`. This is the constant (gradient-free) target the
/// similarity distribution is matched against.
fn sharpened_distribution(col: &[f64], tau: f64) -> Vec<f64> {
    let logs: Vec<f64> = col.iter().map(|&v| v.max(PROB_FLOOR).ln() / tau).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Category-evidence matching on raw nodes: KL between the sharpened
/// detector column (held constant) and the softmax of sentence-proposal
/// cosines, both at temperature `tau_se`.
pub fn loss_se_nodes(
    g: &mut Graph,
    f_po: NodeId,
    f_se: NodeId,
    target_col: &[f64],
    tau_se: f64,
) -> NumResult<NodeId> {
    let m = g.value(f_po).rows();
    if target_col.len() != m {
        return Err(NumError::contract(
            "loss_se",
            "detector column length must match proposal count",
        ));
    }
    let sims = g.cosine_rows(f_se, f_po)?;
    let scores = g.reshape(sims, vec![m])?;
    let target = sharpened_distribution(target_col, tau_se);
    g.kl_fixed_target(target, scores, tau_se)
}

/// [`loss_se_nodes`] wired to an encoded pair: the supervision column is the
/// classifier's probability for `target_category`, read as a constant.
pub fn loss_se(
    g: &mut Graph,
    pair: &EncodedPair,
    target_category: usize,
    tau_se: f64,
) -> NumResult<NodeId> {
    let p_s = g.value(pair.p_s);
    if target_category >= p_s.cols() {
        return Err(NumError::IndexOutOfRange {
            op: "loss_se",
            index: target_category,
            len: p_s.cols(),
        });
    }
    let col: Vec<f64> = (0..p_s.rows()).map(|y| p_s.at(y, target_category)).collect();
    loss_se_nodes(g, pair.f_po, pair.f_se, &col, tau_se)
}

/// Top-3 (capped at m) summed sentence-proposal cosine compatibility.
pub fn sentence_compatibility(g: &mut Graph, f_se: NodeId, f_po: NodeId) -> NumResult<NodeId> {
    let m = g.value(f_po).rows();
    let sims = g.cosine_rows(f_se, f_po)?;
    let flat = g.reshape(sims, vec![m])?;
    g.topk_sum(flat, 3.min(m))
}

/// Positive-vs-negative sentence contrast: InfoNCE over the compatibility of
/// the true query and each category-swapped negative query with the scene.
/// Zero negatives yield exactly zero.
pub fn loss_pn(
    g: &mut Graph,
    f_po: NodeId,
    f_se_pos: NodeId,
    f_se_negs: &[NodeId],
    tau: f64,
) -> NumResult<NodeId> {
    let pos = sentence_compatibility(g, f_se_pos, f_po)?;
    if f_se_negs.is_empty() {
        return g.info_nce_node(pos, None, tau);
    }
    let mut neg_scores = Vec::with_capacity(f_se_negs.len());
    for &f_se_neg in f_se_negs {
        neg_scores.push(sentence_compatibility(g, f_se_neg, f_po)?);
    }
    let negs = g.stack_scalars(&neg_scores)?;
    g.info_nce_node(pos, Some(negs), tau)
}

/// Phrase-to-scene matching score: each phrase keeps its best proposal
/// cosine, and the scene score is the sum over phrases.
pub fn phrase_scene_score(g: &mut Graph, f_phr: NodeId, f_po: NodeId) -> NumResult<NodeId> {
    let sims = g.cosine_rows(f_phr, f_po)?;
    max_sum_score(g, sims)
}

/// Sum of row maxima of a precomputed score matrix (the reduction inside
/// [`phrase_scene_score`], exposed for direct verification).
pub fn max_sum_score(g: &mut Graph, scores: NodeId) -> NumResult<NodeId> {
    let maxes = g.row_max(scores)?;
    Ok(g.sum_all(maxes))
}

/// Plain-value oracle for the same reduction: brute-force double loop.
pub fn max_sum_oracle(rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum()
}

/// One batch item for [`loss_phr`]: the query's fused phrase embeddings and
/// its own scene's fused proposal embeddings.
#[derive(Debug, Clone, Copy)]
pub struct PhraseSceneItem {
    pub f_phr: NodeId,
    pub f_po: NodeId,
}

/// Cross-scene phrase contrast: for each batch item, InfoNCE of its
/// own-scene score against its score with every other scene in the batch,
/// averaged over items. A single-item batch has no negatives and returns a
/// constant zero.
pub fn loss_phr(g: &mut Graph, items: &[PhraseSceneItem], tau: f64) -> NumResult<NodeId> {
    if items.is_empty() {
        return Err(NumError::contract("loss_phr", "empty batch"));
    }
    if items.len() == 1 {
        return Ok(g.scalar(0.0));
    }
    let mut terms = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let pos = phrase_scene_score(g, item.f_phr, item.f_po)?;
        let mut negs = Vec::with_capacity(items.len() - 1);
        for (j, other) in items.iter().enumerate() {
            if j != i {
                negs.push(phrase_scene_score(g, item.f_phr, other.f_po)?);
            }
        }
        let negs = g.stack_scalars(&negs)?;
        terms.push(g.info_nce_node(pos, Some(negs), tau)?);
    }
    let inv = 1.0 / items.len() as f64;
    let weighted: Vec<(NodeId, f64)> = terms.into_iter().map(|t| (t, inv)).collect();
    g.add_scaled(&weighted)
}

/// Relation supervision: for each parsed triple, the subject and anchor
/// phrases each pick their most similar proposal (by cosine value, ties to
/// the lowest index), and the relation head must classify the parsed
/// relation from that ordered pair. Returns `None` when the query has no
/// usable triple.
pub fn loss_rel(
    g: &mut Graph,
    model: &Model,
    parsed: &ParsedQuery,
    pair: &EncodedPair,
) -> NumResult<Option<NodeId>> {
    let Some(f_phr) = pair.f_phr else {
        return Ok(None);
    };
    if parsed.relation_triples.is_empty() {
        return Ok(None);
    }
    // Proposal choice is a hard argmax over similarity values; gradients
    // flow through the relation head only, not through the selection.
    let sims = g.cosine_rows(f_phr, pair.f_po)?;
    let sims = g.value(sims).clone();
    let row_argmax: Vec<usize> = (0..sims.rows()).map(|r| argmax(sims.row_slice(r))).collect();
    let phrase_row = |phrase: usize| pair.kept_phrases.iter().position(|&k| k == phrase);

    let mut terms = Vec::new();
    for triple in &parsed.relation_triples {
        let (Some(subj), Some(anch)) = (phrase_row(triple.subject), phrase_row(triple.anchor))
        else {
            continue;
        };
        let i = row_argmax[subj];
        let j = row_argmax[anch];
        let logits = model.relation_head(g, pair.f_po, i, j)?;
        terms.push(g.cross_entropy_node(logits, triple.relation.index())?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let inv = 1.0 / terms.len() as f64;
    let weighted: Vec<(NodeId, f64)> = terms.into_iter().map(|t| (t, inv)).collect();
    Ok(Some(g.add_scaled(&weighted)?))
}

/// Weighted combination of the available terms; absent terms contribute 0.
pub fn total_loss(g: &mut Graph, terms: LossTerms, w: &LossWeights) -> NumResult<LossBundle> {
    let mut weighted = Vec::new();
    let mut read = |t: Option<NodeId>, lambda: f64| -> NumResult<Option<f64>> {
        match t {
            None => Ok(None),
            Some(id) => {
                let v = g.value(id).item()?;
                weighted.push((id, lambda));
                Ok(Some(v))
            }
        }
    };
    let se = read(terms.se, w.lambda_se)?;
    let pn = read(terms.pn, w.lambda_pn)?;
    let phr = read(terms.phr, w.lambda_phr)?;
    let rel = read(terms.rel, w.lambda_rel)?;
    let total = if weighted.is_empty() {
        g.scalar(0.0)
    } else {
        g.add_scaled(&weighted)?
    };
    Ok(LossBundle {
        total,
        total_value: g.value(total).item()?,
        se,
        pn,
        phr,
        rel,
    })
}

/// Hard pseudo-labels for the auxiliary classifier: each proposal's most
/// likely detector category (ties to the lowest index).
pub fn detector_labels(proposals: &[Proposal]) -> Vec<usize> {
    proposals.iter().map(|p| argmax(&p.det_likelihood)).collect()
}

/// Auxiliary cross-entropy training the category classifier toward the
/// detector's own labels; mean over proposals. This is scaffolding that
/// keeps `P_s` meaningful — it is reported separately from the main bundle
/// and can be disabled.
pub fn aux_classifier_loss(
    g: &mut Graph,
    p_s_logits: NodeId,
    labels: &[usize],
) -> NumResult<NodeId> {
    let rows = g.value(p_s_logits).rows();
    let cols = g.value(p_s_logits).cols();
    if labels.len() != rows {
        return Err(NumError::contract(
            "aux_classifier_loss",
            "one label per proposal required",
        ));
    }
    let mut terms = Vec::with_capacity(rows);
    for (y, &label) in labels.iter().enumerate() {
        let row = g.row(p_s_logits, y)?;
        let logits = g.reshape(row, vec![cols])?;
        terms.push(g.cross_entropy_node(logits, label)?);
    }
    let inv = 1.0 / rows as f64;
    let weighted: Vec<(NodeId, f64)> = terms.into_iter().map(|t| (t, inv)).collect();
    g.add_scaled(&weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Box3, Relation};
    use crate::model::ModelConfig;
    use crate::numcore::{grad_check, ParamStore, Tensor};
    use crate::queryparse::parse;
    use crate::synthworld::CategoryVocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input_matrix(g: &mut Graph, rows: usize, cols: usize, vals: Vec<f64>) -> NodeId {
        g.input(Tensor::matrix(rows, cols, vals).unwrap())
    }

    fn weights() -> LossWeights {
        LossWeights::default()
    }

    // ---- loss_se ----------------------------------------------------------

    #[test]
    fn loss_se_is_zero_when_distributions_match() {
        let mut g = Graph::new();
        // Identical proposal rows give a uniform similarity distribution.
        let f_po = input_matrix(&mut g, 3, 2, vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5]);
        let f_se = input_matrix(&mut g, 1, 2, vec![0.3, 0.9]);
        let loss = loss_se_nodes(&mut g, f_po, f_se, &[1.0 / 3.0; 3], 0.1).unwrap();
        assert!(g.value(loss).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn loss_se_prefers_the_matching_peak() {
        // Proposal 2 aligns with the sentence embedding; a supervision
        // column peaked at 2 must beat the same peak placed elsewhere.
        let mut g = Graph::new();
        let f_po = input_matrix(
            &mut g,
            3,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.95, 0.05],
        );
        let f_se = input_matrix(&mut g, 1, 2, vec![0.95, 0.05]);
        let mut values = Vec::new();
        for peak in 0..3 {
            let mut col = vec![0.05; 3];
            col[peak] = 0.9;
            let loss = loss_se_nodes(&mut g, f_po, f_se, &col, 0.5).unwrap();
            values.push(g.value(loss).item().unwrap());
        }
        assert!(values[2] < values[0] && values[2] < values[1], "{values:?}");
    }

    #[test]
    fn loss_se_degenerates_to_zero_for_one_proposal() {
        let mut g = Graph::new();
        let f_po = input_matrix(&mut g, 1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let f_se = input_matrix(&mut g, 1, 4, vec![-1.0, 0.5, 0.2, 0.7]);
        let loss = loss_se_nodes(&mut g, f_po, f_se, &[0.73], 0.1).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    // ---- loss_pn ----------------------------------------------------------

    #[test]
    fn loss_pn_closed_forms() {
        let mut g = Graph::new();
        let f_po = input_matrix(&mut g, 4, 3, vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, //
            0.5, 0.5, 0.0,
        ]);
        let f_se = input_matrix(&mut g, 1, 3, vec![0.2, 0.4, 0.9]);
        // No negatives: exactly zero.
        let zero = loss_pn(&mut g, f_po, f_se, &[], 0.1).unwrap();
        assert_eq!(g.value(zero).item().unwrap(), 0.0);
        // Identical positive and negatives: uniform scores, ln(k+1).
        let negs = [f_se; 5];
        let uniform = loss_pn(&mut g, f_po, f_se, &negs, 0.1).unwrap();
        assert!((g.value(uniform).item().unwrap() - 6.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_pn_matches_brute_force_for_two_proposals() {
        // m = 2 < 3, so compatibility = sum of both cosines; recompute by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut g = Graph::new();
            let rand_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let po_rows = [rand_row(&mut rng), rand_row(&mut rng)];
            let se_row = rand_row(&mut rng);
            let neg_row = rand_row(&mut rng);
            let f_po = input_matrix(&mut g, 2, 3, po_rows.concat());
            let f_se = input_matrix(&mut g, 1, 3, se_row.clone());
            let f_neg = input_matrix(&mut g, 1, 3, neg_row.clone());
            let loss = loss_pn(&mut g, f_po, f_se, &[f_neg], 0.1).unwrap();

            let compat = |q: &[f64]| -> f64 {
                po_rows
                    .iter()
                    .map(|p| {
                        crate::numcore::cosine_sim(q, p, crate::numcore::COSINE_EPS).unwrap()
                    })
                    .sum()
            };
            let expected =
                crate::numcore::info_nce(compat(&se_row), &[compat(&neg_row)], 0.1).unwrap();
            assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_pn_is_invariant_to_negative_and_proposal_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let po: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let se: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let negs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let eval = |po_vals: Vec<f64>, neg_order: Vec<usize>| -> f64 {
            let mut g = Graph::new();
            let f_po = input_matrix(&mut g, 5, 4, po_vals);
            let f_se = input_matrix(&mut g, 1, 4, se.clone());
            let neg_ids: Vec<NodeId> = neg_order
                .iter()
                .map(|&i| input_matrix(&mut g, 1, 4, negs[i].clone()))
                .collect();
            let loss = loss_pn(&mut g, f_po, f_se, &neg_ids, 0.1).unwrap();
            g.value(loss).item().unwrap()
        };

        let base = eval(po.clone(), vec![0, 1, 2]);
        assert!((eval(po.clone(), vec![2, 0, 1]) - base).abs() < 1e-12);
        // Reverse the proposal rows.
        let mut reversed = Vec::new();
        for r in (0..5).rev() {
            reversed.extend_from_slice(&po[r * 4..(r + 1) * 4]);
        }
        assert!((eval(reversed, vec![0, 1, 2]) - base).abs() < 1e-12);
    }

    // ---- phrase/scene scores ------------------------------------------------

    #[test]
    fn max_sum_matches_pinned_examples() {
        let mut g = Graph::new();
        let s = input_matrix(&mut g, 2, 2, vec![0.2, 0.9, 0.5, 0.1]);
        let v = max_sum_score(&mut g, s).unwrap();
        assert!((g.value(v).item().unwrap() - 1.4).abs() < 1e-12);

        let single = input_matrix(&mut g, 1, 1, vec![0.3]);
        let v = max_sum_score(&mut g, single).unwrap();
        assert!((g.value(v).item().unwrap() - 0.3).abs() < 1e-12);

        let zeros = input_matrix(&mut g, 3, 4, vec![0.0; 12]);
        let v = max_sum_score(&mut g, zeros).unwrap();
        assert_eq!(g.value(v).item().unwrap(), 0.0);
    }

    #[test]
    fn max_sum_equals_double_loop_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=16);
            let m = rng.gen_range(1..=24);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut g = Graph::new();
            let node = input_matrix(&mut g, n, m, rows.concat());
            let got = max_sum_score(&mut g, node).unwrap();
            let got = g.value(got).item().unwrap();
            assert!((got - max_sum_oracle(&rows)).abs() <= 1e-12);
        }
    }

    // ---- loss_phr ----------------------------------------------------------

    /// Unit-vector embeddings whose pairwise cosines are exactly 0 or 1 let
    /// the cross-scene scores be dialed in directly.
    #[test]
    fn loss_phr_closed_forms() {
        let mut g = Graph::new();
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let items = [
            PhraseSceneItem {
                f_phr: input_matrix(&mut g, 1, 2, e1.clone()),
                f_po: input_matrix(&mut g, 1, 2, e1.clone()),
            },
            PhraseSceneItem {
                f_phr: input_matrix(&mut g, 1, 2, e2.clone()),
                f_po: input_matrix(&mut g, 1, 2, e2.clone()),
            },
        ];
        // S(Q1,S1)=1, S(Q1,S2)=0 and symmetrically: each term is
        // -ln(e/(e+1)) = 0.3133 at tau=1.
        let loss = loss_phr(&mut g, &items, 1.0).unwrap();
        assert!((g.value(loss).item().unwrap() - 0.31326168751822286).abs() < 1e-4);

        // All-identical embeddings: uniform scores, ln(b).
        let shared = input_matrix(&mut g, 1, 2, e1.clone());
        let same = [PhraseSceneItem { f_phr: shared, f_po: shared }; 3];
        let loss = loss_phr(&mut g, &same, 0.1).unwrap();
        assert!((g.value(loss).item().unwrap() - 3.0f64.ln()).abs() < 1e-9);

        // Single-item batch: exactly zero.
        let solo = [PhraseSceneItem { f_phr: shared, f_po: shared }];
        let loss = loss_phr(&mut g, &solo, 0.1).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn loss_phr_b2_symmetric_scores_give_ln2() {
        let mut g = Graph::new();
        let shared = input_matrix(&mut g, 2, 3, vec![0.4, 0.1, -0.3, 0.9, 0.2, 0.0]);
        let items = [
            PhraseSceneItem { f_phr: shared, f_po: shared },
            PhraseSceneItem { f_phr: shared, f_po: shared },
        ];
        let loss = loss_phr(&mut g, &items, 0.1).unwrap();
        assert!((g.value(loss).item().unwrap() - 2.0f64.ln()).abs() < 1e-9);
    }

    // ---- scale invariance ---------------------------------------------------

    #[test]
    fn losses_are_invariant_to_embedding_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let po: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let se: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phr: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let col = [0.5, 0.2, 0.2, 0.1];

        let eval = |scale: f64| -> (f64, f64, f64) {
            let mut g = Graph::new();
            let sc = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * scale).collect() };
            let f_po = input_matrix(&mut g, 4, 3, sc(&po));
            let f_se = input_matrix(&mut g, 1, 3, sc(&se));
            let f_neg = input_matrix(&mut g, 1, 3, sc(&neg));
            let f_phr = input_matrix(&mut g, 2, 3, sc(&phr));
            let se_l = loss_se_nodes(&mut g, f_po, f_se, &col, 0.1).unwrap();
            let pn_l = loss_pn(&mut g, f_po, f_se, &[f_neg], 0.1).unwrap();
            let items = [
                PhraseSceneItem { f_phr, f_po },
                PhraseSceneItem { f_phr: f_se, f_po: f_neg },
            ];
            let phr_l = loss_phr(&mut g, &items, 0.1).unwrap();
            (
                g.value(se_l).item().unwrap(),
                g.value(pn_l).item().unwrap(),
                g.value(phr_l).item().unwrap(),
            )
        };
        let (a1, b1, c1) = eval(1.0);
        let (a2, b2, c2) = eval(3.7);
        assert!((a1 - a2).abs() < 1e-9);
        assert!((b1 - b2).abs() < 1e-9);
        assert!((c1 - c2).abs() < 1e-9);
    }

    // ---- loss_rel ----------------------------------------------------------

    fn fixture_model_and_pair() -> (Model, Vec<Proposal>, ParsedQuery) {
        let vocab = CategoryVocab::builtin(4, 3).unwrap();
        let cfg = ModelConfig {
            embed_dim: 8,
            text_layers: 1,
            fusion_layers: 1,
            heads: 2,
            category_count: 4,
            appearance_dim: 3,
            ..ModelConfig::default()
        };
        let model = Model::for_vocab(cfg, &vocab, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proposals: Vec<Proposal> = (0..4)
            .map(|_| Proposal {
                box3: Box3::new(
                    [
                        rng.gen_range(0.5..5.5),
                        rng.gen_range(0.5..5.5),
                        rng.gen_range(0.3..2.5),
                    ],
                    [0.5, 0.5, 0.5],
                )
                .unwrap(),
                confidence: rng.gen_range(0.2..1.0),
                det_likelihood: vec![0.25; 4],
                appearance: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                matched_object: None,
            })
            .collect();
        let text = format!(
            "the {} that is to the left of the {}",
            vocab.names[0], vocab.names[1]
        );
        let parsed = parse(&text, &vocab).unwrap();
        (model, proposals, parsed)
    }

    #[test]
    fn loss_rel_absent_without_triples() {
        let (model, proposals, _) = fixture_model_and_pair();
        let vocab = CategoryVocab::builtin(4, 3).unwrap();
        let parsed = parse(&format!("the {}", vocab.names[2]), &vocab).unwrap();
        let mut g = Graph::new();
        let pair = model.encode_pair(&mut g, &proposals, &parsed).unwrap();
        assert!(loss_rel(&mut g, &model, &parsed, &pair).unwrap().is_none());
    }

    #[test]
    fn loss_rel_selection_matches_exhaustive_argmax() {
        let (model, proposals, parsed) = fixture_model_and_pair();
        let mut g = Graph::new();
        let pair = model.encode_pair(&mut g, &proposals, &parsed).unwrap();
        let loss = loss_rel(&mut g, &model, &parsed, &pair).unwrap().unwrap();

        // Recompute by exhaustive scan over (phrase, proposal) cosines.
        let f_phr = g.value(pair.f_phr.unwrap()).clone();
        let f_po = g.value(pair.f_po).clone();
        let cos = |a: &[f64], b: &[f64]| {
            crate::numcore::cosine_sim(a, b, crate::numcore::COSINE_EPS).unwrap()
        };
        let pick = |phrase_row: usize| -> usize {
            let mut best = (0, f64::NEG_INFINITY);
            for y in 0..f_po.rows() {
                let c = cos(f_phr.row_slice(phrase_row), f_po.row_slice(y));
                if c > best.1 {
                    best = (y, c);
                }
            }
            best.0
        };
        let (i, j) = (pick(0), pick(1));
        let mut g2 = Graph::new();
        let f_po2 = g2.input(f_po.clone());
        let logits = model.relation_head(&mut g2, f_po2, i, j).unwrap();
        let expected = g2
            .cross_entropy_node(logits, Relation::Left.index())
            .unwrap();
        let expected = g2.value(expected).item().unwrap();
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_rel_near_zero_when_head_is_already_right() {
        // Train only the relation head on one fixed pair until it saturates,
        // then the loss must drop toward zero.
        let (model, proposals, parsed) = fixture_model_and_pair();
        let mut store: ParamStore = model.params.clone();
        for _ in 0..400 {
            let probe = Model {
                config: model.config.clone(),
                params: store.clone(),
                token_table: model.token_table.clone(),
                category_names: model.category_names.clone(),
            };
            let mut g = Graph::new();
            let pair = probe.encode_pair(&mut g, &proposals, &parsed).unwrap();
            let loss = loss_rel(&mut g, &probe, &parsed, &pair).unwrap().unwrap();
            store.zero_grads();
            g.backward(loss, &mut store).unwrap();
            store.update_each(|name, values, grads| {
                if name.starts_with("rel.") {
                    for (v, g) in values.iter_mut().zip(grads) {
                        *v -= 0.5 * g;
                    }
                }
            });
        }
        let probe = Model {
            config: model.config.clone(),
            params: store,
            token_table: model.token_table.clone(),
            category_names: model.category_names.clone(),
        };
        let mut g = Graph::new();
        let pair = probe.encode_pair(&mut g, &proposals, &parsed).unwrap();
        let loss = loss_rel(&mut g, &probe, &parsed, &pair).unwrap().unwrap();
        assert!(g.value(loss).item().unwrap() < 0.05);
    }

    // ---- total loss ----------------------------------------------------------

    #[test]
    fn total_loss_weighted_sums() {
        let mut g = Graph::new();
        let one_se = g.scalar(1.0);
        let one_pn = g.scalar(1.0);
        let one_phr = g.scalar(1.0);
        let one_rel = g.scalar(1.0);
        let bundle = total_loss(
            &mut g,
            LossTerms {
                se: Some(one_se),
                pn: Some(one_pn),
                phr: Some(one_phr),
                rel: Some(one_rel),
            },
            &weights(),
        )
        .unwrap();
        assert!((bundle.total_value - 1.01).abs() < 1e-12);

        let no_rel = total_loss(
            &mut g,
            LossTerms {
                se: Some(one_se),
                pn: Some(one_pn),
                phr: Some(one_phr),
                rel: None,
            },
            &weights(),
        )
        .unwrap();
        assert!((no_rel.total_value - 0.41).abs() < 1e-12);
        assert_eq!(no_rel.rel, None);

        let zeroed = LossWeights {
            lambda_se: 0.0,
            lambda_pn: 0.0,
            lambda_phr: 0.0,
            lambda_rel: 0.0,
            ..weights()
        };
        let z = total_loss(
            &mut g,
            LossTerms {
                se: Some(one_se),
                pn: Some(one_pn),
                phr: Some(one_phr),
                rel: Some(one_rel),
            },
            &zeroed,
        )
        .unwrap();
        assert_eq!(z.total_value, 0.0);

        let empty = total_loss(&mut g, LossTerms::default(), &weights()).unwrap();
        assert_eq!(empty.total_value, 0.0);
    }

    #[test]
    fn weights_validate() {
        assert!(weights().validate().is_ok());
        let mut w = weights();
        w.lambda_se = -0.1;
        assert!(w.validate().is_err());
        w = weights();
        w.tau = 0.0;
        assert!(w.validate().is_err());
    }

    // ---- auxiliary classifier ------------------------------------------------

    #[test]
    fn detector_labels_take_the_argmax() {
        let mut p = Proposal {
            box3: Box3::new([1.0, 1.0, 0.5], [0.5, 0.5, 0.5]).unwrap(),
            confidence: 1.0,
            det_likelihood: vec![0.1, 0.6, 0.3],
            appearance: vec![0.0; 3],
            matched_object: None,
        };
        let mut q = p.clone();
        q.det_likelihood = vec![0.4, 0.4, 0.2]; // tie → lowest index
        assert_eq!(detector_labels(&[p.clone(), q]), vec![1, 0]);
        p.det_likelihood = vec![0.0, 0.0, 1.0];
        assert_eq!(detector_labels(&[p]), vec![2]);
    }

    #[test]
    fn aux_loss_is_mean_cross_entropy() {
        let mut g = Graph::new();
        let logits = input_matrix(&mut g, 2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let loss = aux_classifier_loss(&mut g, logits, &[0, 0]).unwrap();
        let expected = (3.0f64.ln() + (1.0f64.exp() + 2.0).ln() - 1.0) / 2.0;
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
        assert!(aux_classifier_loss(&mut g, logits, &[0]).is_err());
    }

    // ---- gradients -------------------------------------------------------------

    #[test]
    fn every_loss_passes_finite_difference_checks_through_the_model() {
        let (model, proposals, parsed) = fixture_model_and_pair();
        let vocab = CategoryVocab::builtin(4, 3).unwrap();
        let w = weights();
        let mut store = model.params.clone();

        // The supervision column for loss_se is detached: its gradient is
        // defined with the column frozen, so the finite-difference probe must
        // reuse one fixed column rather than recomputing it per perturbation.
        let fixed_col: Vec<f64> = {
            let mut g = Graph::new();
            let pair = model.encode_pair(&mut g, &proposals, &parsed).unwrap();
            let p_s = g.value(pair.p_s);
            let tc = parsed.target_phrase().category;
            (0..p_s.rows()).map(|y| p_s.at(y, tc)).collect()
        };

        let report = grad_check(
            |g, params| {
                let probe = Model {
                    config: model.config.clone(),
                    params: params.clone(),
                    token_table: model.token_table.clone(),
                    category_names: model.category_names.clone(),
                };
                let pair = probe.encode_pair(g, &proposals, &parsed)?;
                let se = loss_se_nodes(g, pair.f_po, pair.f_se, &fixed_col, w.tau_se)?;

                // One negative query through the full text+fusion path.
                let neg_parsed = parse(&format!("the {} next to the {}", vocab.names[3], vocab.names[1]), &vocab)
                    .expect("parses");
                let neg_pair = probe.encode_pair(g, &proposals, &neg_parsed)?;
                let pn = loss_pn(g, pair.f_po, pair.f_se, &[neg_pair.f_se], w.tau)?;

                let items = [
                    PhraseSceneItem {
                        f_phr: pair.f_phr.expect("phrases"),
                        f_po: pair.f_po,
                    },
                    PhraseSceneItem {
                        f_phr: neg_pair.f_phr.expect("phrases"),
                        f_po: neg_pair.f_po,
                    },
                ];
                let phr = loss_phr(g, &items, w.tau)?;
                let rel = loss_rel(g, &probe, &parsed, &pair)?;
                let bundle = total_loss(
                    g,
                    LossTerms {
                        se: Some(se),
                        pn: Some(pn),
                        phr: Some(phr),
                        rel,
                    },
                    &w,
                )?;
                Ok(bundle.total)
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn no_parameter_group_is_dead_under_the_full_objective() {
        let (model, proposals, parsed) = fixture_model_and_pair();
        let vocab = CategoryVocab::builtin(4, 3).unwrap();
        let w = weights();
        let mut store = model.params.clone();
        let mut g = Graph::new();
        let pair = model.encode_pair(&mut g, &proposals, &parsed).unwrap();
        let se = loss_se(&mut g, &pair, parsed.target_phrase().category, w.tau_se).unwrap();
        let neg_parsed = parse(&format!("the {}", vocab.names[2]), &vocab).unwrap();
        let neg_pair = model.encode_pair(&mut g, &proposals, &neg_parsed).unwrap();
        let pn = loss_pn(&mut g, pair.f_po, pair.f_se, &[neg_pair.f_se], w.tau).unwrap();
        let items = [
            PhraseSceneItem {
                f_phr: pair.f_phr.unwrap(),
                f_po: pair.f_po,
            },
            PhraseSceneItem {
                f_phr: neg_pair.f_phr.unwrap(),
                f_po: neg_pair.f_po,
            },
        ];
        let phr = loss_phr(&mut g, &items, w.tau).unwrap();
        let rel = loss_rel(&mut g, &model, &parsed, &pair).unwrap();
        let aux = aux_classifier_loss(&mut g, pair.p_s_logits, &detector_labels(&proposals)).unwrap();
        let bundle = total_loss(
            &mut g,
            LossTerms {
                se: Some(se),
                pn: Some(pn),
                phr: Some(phr),
                rel,
            },
            &w,
        )
        .unwrap();
        let with_aux = g.add_scaled(&[(bundle.total, 1.0), (aux, 1.0)]).unwrap();
        g.backward(with_aux, &mut store).unwrap();

        let mut groups: std::collections::BTreeMap<String, bool> = Default::default();
        for (name, _, grad) in store.iter_with_grads() {
            let group = name.split('.').next().unwrap().to_string();
            let live = grad.values().iter().any(|&v| v != 0.0);
            *groups.entry(group).or_insert(false) |= live;
        }
        for (group, live) in &groups {
            assert!(live, "parameter group {group} received no gradient");
        }
        assert!(groups.len() >= 5, "expected prop/text/fus/cls/rel groups: {groups:?}");
    }
}
