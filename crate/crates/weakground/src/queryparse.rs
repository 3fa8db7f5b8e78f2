//! Rule-based query analysis for the closed template vocabulary.
//!
//! The grounding pipeline never sees gold target boxes, so everything it
//! knows about a query comes from this module: which token span names the
//! target category, which other spans name context objects, and which spatial
//! relation (if any) links two of those spans. A companion routine
//! manufactures the contrastive "negative" queries by swapping the target
//! span for the most similar other category names.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Relation, RELATION_LIBRARY};
use crate::numcore::{cosine_sim, COSINE_EPS};
use crate::synthworld::CategoryVocab;

/// Upper bound on extracted noun phrases per query; later matches are
/// dropped deterministically and counted in [`ParsedQuery::dropped_phrases`].
pub const MAX_NOUN_PHRASES: usize = 16;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("no vocabulary noun phrase in query {0:?}")]
    NoNounPhrase(String),
    #[error("negative generation needs a non-empty vocabulary embedding table")]
    MissingEmbeddings,
}

/// A vocabulary mention: `surface` occupies `span` (half-open, in token
/// coordinates) and resolves to `category`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounPhrase {
    pub surface: String,
    pub span: (usize, usize),
    pub category: usize,
}

/// `relation(subject, anchor)` claim between two noun phrases, stored as
/// indices into [`ParsedQuery::noun_phrases`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationTriple {
    pub relation: Relation,
    pub subject: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuery {
    /// Normalized tokens; a multiword category name is one token ("end table").
    pub tokens: Vec<String>,
    /// Vocabulary mentions in token order, capped at [`MAX_NOUN_PHRASES`].
    pub noun_phrases: Vec<NounPhrase>,
    /// Index of the target phrase in `noun_phrases` (the subject heuristic
    /// picks the first mention).
    pub target: usize,
    pub relation_triples: Vec<RelationTriple>,
    /// Mentions discarded by the phrase cap.
    pub dropped_phrases: usize,
}

impl ParsedQuery {
    pub fn target_phrase(&self) -> &NounPhrase {
        &self.noun_phrases[self.target]
    }
}

/// Negative queries produced by substituting similar category names at the
/// target span.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQuerySet {
    /// Rewritten queries, most-similar replacement first.
    pub queries: Vec<String>,
    /// Replacement category per query (parallel to `queries`).
    pub categories: Vec<usize>,
    /// What the caller asked for; `queries.len()` may be smaller when the
    /// vocabulary has fewer than `requested` other categories.
    pub requested: usize,
}

/// Lowercases, strips punctuation, splits on whitespace, and greedily merges
/// multiword vocabulary names (longest first) into single tokens.
pub fn tokenize(text: &str, vocab: &CategoryVocab) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();

    // Vocabulary names as word sequences, longest first so "end table" is
    // preferred over a bare "table" starting at the same word.
    let mut names: Vec<Vec<&str>> = vocab
        .names
        .iter()
        .map(|n| n.split_whitespace().collect::<Vec<_>>())
        .filter(|n| n.len() > 1)
        .collect();
    names.sort_by_key(|n| std::cmp::Reverse(n.len()));

    let mut tokens = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        let merged = names.iter().find(|name| words[i..].starts_with(name));
        match merged {
            Some(name) => {
                tokens.push(name.join(" "));
                i += name.len();
            }
            None => {
                tokens.push(words[i].to_string());
                i += 1;
            }
        }
    }
    tokens
}

/// Relation surface forms as token sequences, longest first, so that e.g.
/// "nearest to" is tried before "nearest".
fn relation_surface_table() -> Vec<(Vec<&'static str>, Relation)> {
    let mut table: Vec<(Vec<&'static str>, Relation)> = RELATION_LIBRARY
        .iter()
        .flat_map(|&rel| {
            rel.surface_phrases()
                .iter()
                .map(move |p| (p.split_whitespace().collect::<Vec<_>>(), rel))
                .collect::<Vec<_>>()
        })
        .collect();
    table.sort_by_key(|(toks, _)| std::cmp::Reverse(toks.len()));
    table
}

/// Finds the leftmost longest relation surface inside `gap`.
fn find_relation(gap: &[String]) -> Option<Relation> {
    let table = relation_surface_table();
    let mut best: Option<(usize, usize, Relation)> = None; // (start, len, rel)
    for (surface, rel) in &table {
        if gap.len() < surface.len() {
            continue;
        }
        for start in 0..=gap.len() - surface.len() {
            if gap[start..start + surface.len()]
                .iter()
                .zip(surface.iter())
                .all(|(a, b)| a == b)
            {
                let better = match best {
                    None => true,
                    Some((s, l, _)) => start < s || (start == s && surface.len() > l),
                };
                if better {
                    best = Some((start, surface.len(), *rel));
                }
                break; // leftmost occurrence of this surface found
            }
        }
    }
    best.map(|(_, _, rel)| rel)
}

/// Extracts noun phrases, the target phrase, and relation triples.
///
/// Noun phrases are vocabulary-name matches over the merged token stream; the
/// target is the first mention (subject heuristic); a relation triple is
/// emitted whenever a relation surface phrase lies between two consecutive
/// noun phrases.
pub fn parse(text: &str, vocab: &CategoryVocab) -> Result<ParsedQuery, ParseError> {
    let tokens = tokenize(text, vocab);
    let mut noun_phrases = Vec::new();
    let mut dropped = 0usize;
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(cat) = vocab.index_of(tok) {
            if noun_phrases.len() == MAX_NOUN_PHRASES {
                dropped += 1;
                continue;
            }
            noun_phrases.push(NounPhrase {
                surface: tok.clone(),
                span: (i, i + 1),
                category: cat,
            });
        }
    }
    if noun_phrases.is_empty() {
        return Err(ParseError::NoNounPhrase(text.to_string()));
    }
    let mut relation_triples = Vec::new();
    for j in 0..noun_phrases.len() - 1 {
        let gap = &tokens[noun_phrases[j].span.1..noun_phrases[j + 1].span.0];
        if let Some(rel) = find_relation(gap) {
            relation_triples.push(RelationTriple {
                relation: rel,
                subject: j,
                anchor: j + 1,
            });
        }
    }
    Ok(ParsedQuery {
        tokens,
        noun_phrases,
        target: 0,
        relation_triples,
        dropped_phrases: dropped,
    })
}

/// Ranks every other category by phrase-embedding cosine similarity to the
/// target phrase and substitutes the top `k` names at the target span.
///
/// `phrase_embeddings[c]` is the embedding for category `c`'s name; ties
/// break toward the lower category index. Asking for more candidates than
/// exist yields all of them, with the shortfall visible via `requested`.
pub fn generate_negatives(
    parsed: &ParsedQuery,
    vocab: &CategoryVocab,
    phrase_embeddings: &[Vec<f64>],
    k: usize,
) -> Result<NegativeQuerySet, ParseError> {
    let target = parsed.target_phrase();
    let anchor_emb = phrase_embeddings
        .get(target.category)
        .filter(|_| phrase_embeddings.len() == vocab.len())
        .ok_or(ParseError::MissingEmbeddings)?;
    let mut ranked = Vec::with_capacity(vocab.len().saturating_sub(1));
    for c in (0..vocab.len()).filter(|&c| c != target.category) {
        let sim = cosine_sim(&phrase_embeddings[c], anchor_emb, COSINE_EPS)
            .map_err(|_| ParseError::MissingEmbeddings)?;
        ranked.push((c, sim));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);

    let (lo, hi) = target.span;
    let mut queries = Vec::with_capacity(ranked.len());
    let mut categories = Vec::with_capacity(ranked.len());
    for (cat, _) in ranked {
        let mut toks: Vec<&str> = Vec::with_capacity(parsed.tokens.len());
        toks.extend(parsed.tokens[..lo].iter().map(String::as_str));
        toks.push(&vocab.names[cat]);
        toks.extend(parsed.tokens[hi..].iter().map(String::as_str));
        queries.push(toks.join(" "));
        categories.push(cat);
    }
    Ok(NegativeQuerySet {
        queries,
        categories,
        requested: k,
    })
}

/// Extraction-noise switch: with probability `1 - fidelity` the target
/// phrase is re-labeled with a uniformly random other category, emulating a
/// parser that picks the wrong phrase. Returns whether corruption happened.
pub fn corrupt_target(
    parsed: &mut ParsedQuery,
    vocab: &CategoryVocab,
    fidelity: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    if vocab.len() < 2 || rng.gen::<f64>() < fidelity {
        return false;
    }
    let old = parsed.noun_phrases[parsed.target].category;
    let pick = rng.gen_range(0..vocab.len() - 1);
    let new = (0..vocab.len()).filter(|&c| c != old).nth(pick).unwrap();
    let phrase = &mut parsed.noun_phrases[parsed.target];
    phrase.category = new;
    phrase.surface = vocab.names[new].clone();
    true
}
