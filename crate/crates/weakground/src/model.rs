//! The dual-branch grounding network.
//!
//! Three encoders feed two alignment branches. A proposal encoder maps each
//! detector proposal (normalized box geometry, confidence, appearance) to a
//! `D`-dimensional embedding; a small transformer encodes the query tokens
//! with a learned sentence-summary slot prepended; a cross-attention fusion
//! stack then lets the two streams exchange information. The fused outputs
//! are the proposal embeddings `F_po`, the sentence embedding `F_se`, the
//! per-noun-phrase embeddings `F_phr`, and a per-proposal category
//! distribution `P_s`. A separate two-layer head classifies the spatial
//! relation expressed by an ordered pair of proposal embeddings.
//!
//! All forward passes build onto a [`Graph`] so the objectives module can
//! differentiate through them.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Relation, RELATION_LIBRARY};
use crate::numcore::{Graph, NodeId, NumError, NumResult, ParamStore, Tensor};
use crate::queryparse::ParsedQuery;
use crate::synthworld::{template_glue_words, CategoryVocab, Proposal};

/// Layer-norm variance floor.
const LN_EPS: f64 = 1e-9;

/// Checkpoint file magic + format version.
const CKPT_MAGIC: &[u8; 8] = b"WKGRNDCP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Architecture hyperparameters. `category_count`, `appearance_dim`, and
/// `room_extent` tie a model to the dataset it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    /// Queries longer than this are truncated (with a diagnostic count).
    pub max_tokens: usize,
    pub relation_count: usize,
    pub category_count: usize,
    pub appearance_dim: usize,
    pub room_extent: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            text_layers: 1,
            fusion_layers: 2,
            heads: 4,
            max_tokens: 24,
            relation_count: RELATION_LIBRARY.len(),
            category_count: 10,
            appearance_dim: 16,
            room_extent: [6.0, 6.0, 3.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> NumResult<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("max_tokens", self.max_tokens),
            ("relation_count", self.relation_count),
            ("category_count", self.category_count),
            ("appearance_dim", self.appearance_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NumError::contract("model_config", name));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(NumError::contract(
                "model_config",
                "embed_dim must be divisible by heads",
            ));
        }
        if self.room_extent.iter().any(|&e| e <= 0.0) {
            return Err(NumError::contract("model_config", "room_extent must be positive"));
        }
        Ok(())
    }

    /// Hidden width of the feed-forward sub-blocks and MLP heads. Kept equal
    /// to the embedding width: at this scale wider FFNs buy nothing but cost.
    fn hidden(&self) -> usize {
        self.embed_dim
    }
}

/// Bidirectional token-string ↔ embedding-row mapping. Row 0 is the
/// out-of-vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TokenTable {
    pub fn from_words(mut words: Vec<String>) -> Self {
        words.retain(|w| w != "<unk>");
        words.sort();
        words.dedup();
        words.insert(0, "<unk>".to_string());
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        TokenTable { words, index }
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// The token inventory a dataset's queries can produce: category names (as
/// single merged units), relation surface words, and template glue words.
pub fn default_token_words(vocab: &CategoryVocab) -> Vec<String> {
    let mut words: Vec<String> = vocab.names.clone();
    for rel in RELATION_LIBRARY {
        for phrase in rel.surface_phrases() {
            words.extend(phrase.split_whitespace().map(str::to_string));
        }
    }
    words.extend(template_glue_words());
    words
}

/// Text-encoder output: `states` is `[(1 + tokens) × D]` with the sentence
/// summary in row 0 and token `i` in row `i + 1`.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoding {
    pub states: NodeId,
    pub kept_tokens: usize,
    pub truncated: usize,
}

/// Fused representations for one (proposal set, query) pair.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    /// `[m × D]` fused proposal embeddings.
    pub f_po: NodeId,
    /// `[1 × D]` fused sentence embedding (summary slot).
    pub f_se: NodeId,
    /// `[n′ × D]` fused phrase embeddings; `None` when every phrase span was
    /// truncated away.
    pub f_phr: Option<NodeId>,
    /// Indices into the parse's `noun_phrases` for each `f_phr` row.
    pub kept_phrases: Vec<usize>,
    /// `[m × c]` category logits and their row softmax.
    pub p_s_logits: NodeId,
    pub p_s: NodeId,
    /// Tokens dropped by the length cap.
    pub truncated_tokens: usize,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub token_table: TokenTable,
    /// Category names in dataset order, kept so a checkpoint is
    /// self-describing about what its classifier columns mean.
    pub category_names: Vec<String>,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    ///
    /// Weights are uniform in ±1/√fan_in, biases and the sentence-summary
    /// embedding start at zero, and layer-norm gains start at one. Parameters
    /// are created in a fixed order (proposal encoder, text embeddings, text
    /// layers, fusion layers, classifier head, relation head) so a seed fully
    /// determines every value.
    pub fn new(
        config: ModelConfig,
        token_words: Vec<String>,
        category_names: Vec<String>,
        seed: u64,
    ) -> NumResult<Model> {
        config.validate()?;
        if category_names.len() != config.category_count {
            return Err(NumError::contract(
                "model_config",
                "category_count must match the category name list",
            ));
        }
        let token_table = TokenTable::from_words(token_words);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let h = config.hidden();

        let mut init = |params: &mut ParamStore, name: String, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            params.insert(&name, Tensor::matrix(rows, cols, values).expect("sized"))
        };
        let linear = |params: &mut ParamStore,
                      init: &mut dyn FnMut(&mut ParamStore, String, usize, usize) -> NumResult<()>,
                      prefix: &str,
                      rows: usize,
                      cols: usize|
         -> NumResult<()> {
            init(params, format!("{prefix}.w"), rows, cols)?;
            params.insert(&format!("{prefix}.b"), Tensor::vector(vec![0.0; cols]))
        };
        let layer_norm = |params: &mut ParamStore, prefix: &str| -> NumResult<()> {
            params.insert(&format!("{prefix}.ln.g"), Tensor::vector(vec![1.0; d]))?;
            params.insert(&format!("{prefix}.ln.b"), Tensor::vector(vec![0.0; d]))
        };

        // Wrap `init` once so the helper closures above can borrow it.
        let mut init_fn =
            |p: &mut ParamStore, name: String, r: usize, c: usize| init(p, name, r, c);

        // Proposal encoder: concat(center, size, confidence, appearance) → D.
        let prop_in = 7 + config.appearance_dim;
        linear(&mut params, &mut init_fn, "prop.l1", prop_in, d)?;
        linear(&mut params, &mut init_fn, "prop.l2", d, d)?;

        // Text embeddings: token table, positions (slot 0 = summary), summary.
        init_fn(&mut params, "text.tok".into(), token_table.len(), d)?;
        init_fn(&mut params, "text.pos".into(), config.max_tokens + 1, d)?;
        params.insert("text.summary", Tensor::matrix(1, d, vec![0.0; d])?)?;

        let attn = |params: &mut ParamStore,
                    init: &mut dyn FnMut(&mut ParamStore, String, usize, usize) -> NumResult<()>,
                    prefix: &str|
         -> NumResult<()> {
            for mat in ["wq", "wk", "wv"] {
                init(params, format!("{prefix}.{mat}"), d, d)?;
            }
            init(params, format!("{prefix}.wo"), d, d)?;
            params.insert(&format!("{prefix}.bo"), Tensor::vector(vec![0.0; d]))
        };

        for l in 0..config.text_layers {
            let p = format!("text.l{l}.attn");
            attn(&mut params, &mut init_fn, &p)?;
            layer_norm(&mut params, &p)?;
            let f = format!("text.l{l}.ffn");
            linear(&mut params, &mut init_fn, &format!("{f}.1"), d, h)?;
            linear(&mut params, &mut init_fn, &format!("{f}.2"), h, d)?;
            layer_norm(&mut params, &f)?;
        }
        for l in 0..config.fusion_layers {
            for block in ["p2t", "t2p"] {
                let p = format!("fus.l{l}.{block}.attn");
                attn(&mut params, &mut init_fn, &p)?;
                layer_norm(&mut params, &p)?;
                let f = format!("fus.l{l}.{block}.ffn");
                linear(&mut params, &mut init_fn, &format!("{f}.1"), d, h)?;
                linear(&mut params, &mut init_fn, &format!("{f}.2"), h, d)?;
                layer_norm(&mut params, &f)?;
            }
        }

        // Category classifier over fused proposal embeddings.
        linear(&mut params, &mut init_fn, "cls.l1", d, h)?;
        linear(&mut params, &mut init_fn, "cls.l2", h, config.category_count)?;
        // Relation classifier over an ordered proposal-embedding pair.
        linear(&mut params, &mut init_fn, "rel.l1", 2 * d, h)?;
        linear(&mut params, &mut init_fn, "rel.l2", h, config.relation_count)?;

        Ok(Model {
            config,
            params,
            token_table,
            category_names,
        })
    }

    /// Convenience constructor wiring the model to a dataset vocabulary.
    pub fn for_vocab(config: ModelConfig, vocab: &CategoryVocab, seed: u64) -> NumResult<Model> {
        Model::new(config, default_token_words(vocab), vocab.names.clone(), seed)
    }

    // ---- forward passes ----------------------------------------------------

    /// Encodes proposals to `[m × D]`: geometry normalized by room extent,
    /// concatenated with confidence and appearance, through a 2-layer MLP.
    pub fn encode_proposals(&self, g: &mut Graph, proposals: &[Proposal]) -> NumResult<NodeId> {
        if proposals.is_empty() {
            return Err(NumError::contract("encode_proposals", "no proposals"));
        }
        let d_a = self.config.appearance_dim;
        let ext = self.config.room_extent;
        let mut vals = Vec::with_capacity(proposals.len() * (7 + d_a));
        for p in proposals {
            if p.appearance.len() != d_a {
                return Err(NumError::contract(
                    "encode_proposals",
                    "appearance width does not match the model",
                ));
            }
            for axis in 0..3 {
                vals.push(p.box3.center[axis] / ext[axis]);
            }
            for axis in 0..3 {
                vals.push(p.box3.size[axis] / ext[axis]);
            }
            vals.push(p.confidence);
            vals.extend_from_slice(&p.appearance);
        }
        let x = Tensor::matrix(proposals.len(), 7 + d_a, vals)?;
        let x = g.input(x);
        let x = self.linear_relu(g, x, "prop.l1")?;
        self.linear_plain(g, x, "prop.l2")
    }

    /// Encodes query tokens: learned token + position embeddings with the
    /// summary slot prepended, then the configured self-attention layers.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[String]) -> NumResult<TextEncoding> {
        let keep = tokens.len().min(self.config.max_tokens);
        let truncated = tokens.len() - keep;
        let tok_param = g.param(&self.params, "text.tok")?;
        let pos_param = g.param(&self.params, "text.pos")?;
        let summary = g.param(&self.params, "text.summary")?;

        let content = if keep > 0 {
            let ids: Vec<usize> = tokens[..keep].iter().map(|t| self.token_table.id_of(t)).collect();
            let embedded = g.gather_rows(tok_param, ids)?;
            g.concat_rows(&[summary, embedded])?
        } else {
            summary
        };
        let positions = g.gather_rows(pos_param, (0..=keep).collect())?;
        let mut states = g.add(content, positions)?;
        for l in 0..self.config.text_layers {
            states = self.attn_block(g, states, states, &format!("text.l{l}.attn"))?;
            states = self.ffn_block(g, states, &format!("text.l{l}.ffn"))?;
        }
        Ok(TextEncoding {
            states,
            kept_tokens: keep,
            truncated,
        })
    }

    /// Pre-fusion sentence state: the summary slot's output row.
    pub fn sentence_state(&self, g: &mut Graph, text: &TextEncoding) -> NumResult<NodeId> {
        g.row(text.states, 0)
    }

    /// Mean state over a phrase's token span (rows are offset by the summary
    /// slot). Errors if the span was truncated away.
    pub fn phrase_state(
        &self,
        g: &mut Graph,
        states: NodeId,
        kept_tokens: usize,
        span: (usize, usize),
    ) -> NumResult<NodeId> {
        if span.0 >= span.1 || span.1 > kept_tokens {
            return Err(NumError::contract("phrase_state", "span outside kept tokens"));
        }
        g.mean_rows(states, (span.0 + 1..span.1 + 1).collect())
    }

    /// Cross-attention fusion of the two streams plus the output heads.
    ///
    /// Each fusion layer first lets proposals attend to tokens, then tokens
    /// attend to proposals; zero layers bypass fusion entirely (the heads
    /// still apply). `spans` are the parse's noun-phrase token spans; spans
    /// that survived truncation become `f_phr` rows.
    pub fn fuse(
        &self,
        g: &mut Graph,
        f_po_in: NodeId,
        text: &TextEncoding,
        spans: &[(usize, usize)],
    ) -> NumResult<EncodedPair> {
        let mut p_stream = f_po_in;
        let mut t_stream = text.states;
        for l in 0..self.config.fusion_layers {
            let p2t = format!("fus.l{l}.p2t");
            p_stream = self.attn_block(g, p_stream, t_stream, &format!("{p2t}.attn"))?;
            p_stream = self.ffn_block(g, p_stream, &format!("{p2t}.ffn"))?;
            let t2p = format!("fus.l{l}.t2p");
            t_stream = self.attn_block(g, t_stream, p_stream, &format!("{t2p}.attn"))?;
            t_stream = self.ffn_block(g, t_stream, &format!("{t2p}.ffn"))?;
        }
        let f_se = g.row(t_stream, 0)?;
        let mut kept_phrases = Vec::new();
        let mut rows = Vec::new();
        for (i, &span) in spans.iter().enumerate() {
            if span.0 < span.1 && span.1 <= text.kept_tokens {
                rows.push(self.phrase_state(g, t_stream, text.kept_tokens, span)?);
                kept_phrases.push(i);
            }
        }
        let f_phr = if rows.is_empty() {
            None
        } else {
            Some(g.concat_rows(&rows)?)
        };
        let hidden = self.linear_relu(g, p_stream, "cls.l1")?;
        let p_s_logits = self.linear_plain(g, hidden, "cls.l2")?;
        let p_s = g.softmax_rows(p_s_logits, 1.0)?;
        Ok(EncodedPair {
            f_po: p_stream,
            f_se,
            f_phr,
            kept_phrases,
            p_s_logits,
            p_s,
            truncated_tokens: text.truncated,
        })
    }

    /// Full forward pass for one (proposals, parsed query) pair.
    pub fn encode_pair(
        &self,
        g: &mut Graph,
        proposals: &[Proposal],
        parsed: &ParsedQuery,
    ) -> NumResult<EncodedPair> {
        let f_po = self.encode_proposals(g, proposals)?;
        let text = self.encode_text(g, &parsed.tokens)?;
        let spans: Vec<(usize, usize)> = parsed.noun_phrases.iter().map(|np| np.span).collect();
        self.fuse(g, f_po, &text, &spans)
    }

    /// Relation logits for the ordered pair (subject row `i`, anchor row `j`)
    /// of `f_po`, as a `relation_count` vector.
    pub fn relation_head(
        &self,
        g: &mut Graph,
        f_po: NodeId,
        i: usize,
        j: usize,
    ) -> NumResult<NodeId> {
        let a = g.row(f_po, i)?;
        let b = g.row(f_po, j)?;
        let pair = g.concat_cols(&[a, b])?;
        let hidden = self.linear_relu(g, pair, "rel.l1")?;
        let logits = self.linear_plain(g, hidden, "rel.l2")?;
        g.reshape(logits, vec![self.config.relation_count])
    }

    /// Index of `rel` in the classifier's output order.
    pub fn relation_label(&self, rel: Relation) -> usize {
        rel.index()
    }

    /// Mean token embedding of each category name, used to rank negative
    /// queries by phrase similarity. Categories whose words are all
    /// out-of-vocabulary fall back to the `<unk>` embedding.
    pub fn category_phrase_embeddings(&self, vocab: &CategoryVocab) -> NumResult<Vec<Vec<f64>>> {
        let table = self.params.get("text.tok")?;
        let d = self.config.embed_dim;
        vocab
            .names
            .iter()
            .map(|name| {
                // Category names are single merged tokens to the tokenizer.
                let row = table.row_slice(self.token_table.id_of(name));
                Ok(row.to_vec())
            })
            .collect::<NumResult<Vec<Vec<f64>>>>()
            .map(|rows| {
                debug_assert!(rows.iter().all(|r| r.len() == d));
                rows
            })
    }

    // ---- building blocks ---------------------------------------------------

    fn linear_relu(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NumResult<NodeId> {
        let w = g.param(&self.params, &format!("{prefix}.w"))?;
        let b = g.param(&self.params, &format!("{prefix}.b"))?;
        let y = g.linear(x, w, b)?;
        Ok(g.relu(y))
    }

    fn linear_plain(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NumResult<NodeId> {
        let w = g.param(&self.params, &format!("{prefix}.w"))?;
        let b = g.param(&self.params, &format!("{prefix}.b"))?;
        g.linear(x, w, b)
    }

    /// Multi-head attention (queries from `x_q`, keys/values from `x_kv`)
    /// with residual connection and layer norm.
    fn attn_block(
        &self,
        g: &mut Graph,
        x_q: NodeId,
        x_kv: NodeId,
        prefix: &str,
    ) -> NumResult<NodeId> {
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let wq = g.param(&self.params, &format!("{prefix}.wq"))?;
        let wk = g.param(&self.params, &format!("{prefix}.wk"))?;
        let wv = g.param(&self.params, &format!("{prefix}.wv"))?;
        let q = g.matmul(x_q, wq)?;
        let k = g.matmul(x_kv, wk)?;
        let v = g.matmul(x_kv, wv)?;
        let mut head_outputs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let qh = g.slice_cols(q, hh * dh, dh)?;
            let kh = g.slice_cols(k, hh * dh, dh)?;
            let vh = g.slice_cols(v, hh * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            // softmax_rows divides by its temperature, giving 1/√d_h scaling.
            let attn = g.softmax_rows(scores, (dh as f64).sqrt())?;
            head_outputs.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat_cols(&head_outputs)?;
        let wo = g.param(&self.params, &format!("{prefix}.wo"))?;
        let bo = g.param(&self.params, &format!("{prefix}.bo"))?;
        let proj = g.linear(ctx, wo, bo)?;
        let res = g.add(x_q, proj)?;
        self.layer_norm(g, res, prefix)
    }

    /// Two-layer feed-forward with residual connection and layer norm.
    fn ffn_block(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NumResult<NodeId> {
        let h = self.linear_relu(g, x, &format!("{prefix}.1"))?;
        let y = self.linear_plain(g, h, &format!("{prefix}.2"))?;
        let res = g.add(x, y)?;
        self.layer_norm(g, res, prefix)
    }

    fn layer_norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NumResult<NodeId> {
        let gain = g.param(&self.params, &format!("{prefix}.ln.g"))?;
        let bias = g.param(&self.params, &format!("{prefix}.ln.b"))?;
        g.layer_norm_rows(x, gain, bias, LN_EPS)
    }

    // ---- checkpointing -----------------------------------------------------

    /// Writes the checkpoint: magic, version, JSON header (config + token
    /// words + category names), then named parameter tensors in sorted
    /// order. Save → load → save is byte-identical.
    pub fn save(&self, path: &str) -> Result<(), ModelError> {
        if let Some(dir) = Path::new(path).parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CKPT_MAGIC)?;
        out.write_all(&CKPT_VERSION.to_le_bytes())?;
        let header = CheckpointHeader {
            config: self.config.clone(),
            token_words: self.token_table.words.clone(),
            category_names: self.category_names.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, tensor, _) in self.params.iter_with_grads() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                out.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in tensor.values() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &str) -> Result<Model, ModelError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(ModelError::Format("not a model checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        header.config.validate()?;

        let mut params = ParamStore::new();
        let count = read_u64(&mut r)? as usize;
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| ModelError::Format("parameter name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            params.insert(&name, Tensor::new(shape, values)?)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(ModelError::Format("trailing bytes after parameters".into()));
        }
        Ok(Model {
            config: header.config,
            params,
            token_table: TokenTable::from_words(header.token_words),
            category_names: header.category_names,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    token_words: Vec<String>,
    category_names: Vec<String>,
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3;
    use crate::numcore::grad_check;
    use crate::queryparse::parse;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            text_layers: 1,
            fusion_layers: 1,
            heads: 2,
            max_tokens: 12,
            category_count: 4,
            appearance_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_vocab() -> CategoryVocab {
        CategoryVocab::builtin(4, 3).unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        Model::for_vocab(tiny_config(), &tiny_vocab(), seed).unwrap()
    }

    fn sample_proposal(seed: u64, d_a: usize) -> Proposal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Proposal {
            box3: Box3::new(
                [
                    rng.gen_range(0.5..5.5),
                    rng.gen_range(0.5..5.5),
                    rng.gen_range(0.3..2.5),
                ],
                [
                    rng.gen_range(0.3..0.9),
                    rng.gen_range(0.3..0.9),
                    rng.gen_range(0.3..0.9),
                ],
            )
            .unwrap(),
            confidence: rng.gen_range(0.1..1.0),
            det_likelihood: vec![0.25; 4],
            appearance: (0..d_a).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            matched_object: None,
        }
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = tiny_config();
        cfg.heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.embed_dim = 0;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn proposal_encoder_shapes_and_determinism() {
        let model = tiny_model(1);
        let p = sample_proposal(3, 3);
        let props = vec![p.clone(), p.clone(), sample_proposal(4, 3)];
        let mut g = Graph::new();
        let out = model.encode_proposals(&mut g, &props).unwrap();
        let t = g.value(out);
        assert_eq!(t.shape(), [3, 8]);
        assert_eq!(t.row_slice(0), t.row_slice(1), "identical inputs, identical rows");
        assert_ne!(t.row_slice(0), t.row_slice(2));
        assert!(model.encode_proposals(&mut g, &[]).is_err());
    }

    #[test]
    fn proposal_encoder_is_permutation_equivariant() {
        let model = tiny_model(2);
        let props: Vec<Proposal> = (0..5).map(|i| sample_proposal(i, 3)).collect();
        let mut g = Graph::new();
        let fwd = model.encode_proposals(&mut g, &props).unwrap();
        let fwd = g.value(fwd).clone();
        let perm = [4, 2, 0, 3, 1];
        let permuted: Vec<Proposal> = perm.iter().map(|&i| props[i].clone()).collect();
        let mut g2 = Graph::new();
        let back = model.encode_proposals(&mut g2, &permuted).unwrap();
        let back = g2.value(back).clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(back.row_slice(new_row), fwd.row_slice(old_row));
        }
    }

    #[test]
    fn text_encoder_states_are_deterministic_and_summary_is_distinct() {
        let model = tiny_model(3);
        let tokens = vec!["chair".to_string()];
        let mut g = Graph::new();
        let enc = model.encode_text(&mut g, &tokens).unwrap();
        assert_eq!(enc.kept_tokens, 1);
        assert_eq!(enc.truncated, 0);
        let states = g.value(enc.states);
        assert_eq!(states.shape(), [2, 8]);
        assert_ne!(states.row_slice(0), states.row_slice(1));

        let mut g2 = Graph::new();
        let enc2 = model.encode_text(&mut g2, &tokens).unwrap();
        assert_eq!(g.value(enc.states), g2.value(enc2.states));
    }

    #[test]
    fn overlong_queries_truncate_with_a_count() {
        let model = tiny_model(4);
        let tokens: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let mut g = Graph::new();
        let enc = model.encode_text(&mut g, &tokens).unwrap();
        assert_eq!(enc.kept_tokens, 12);
        assert_eq!(enc.truncated, 8);
        assert_eq!(g.value(enc.states).rows(), 13);
    }

    #[test]
    fn singleton_phrase_state_equals_its_token_state() {
        let model = tiny_model(5);
        let tokens: Vec<String> = ["the", "chair", "near", "the", "bed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut g = Graph::new();
        let enc = model.encode_text(&mut g, &tokens).unwrap();
        let phrase = model.phrase_state(&mut g, enc.states, enc.kept_tokens, (1, 2)).unwrap();
        assert_eq!(
            g.value(phrase).row_slice(0),
            g.value(enc.states).row_slice(2),
            "span (1,2) is token 1, which sits in state row 2"
        );
        assert!(model
            .phrase_state(&mut g, enc.states, enc.kept_tokens, (4, 6))
            .is_err());
    }

    #[test]
    fn zero_fusion_layers_bypass_cleanly() {
        let vocab = tiny_vocab();
        let mut cfg = tiny_config();
        cfg.fusion_layers = 0;
        let model = Model::for_vocab(cfg, &vocab, 6).unwrap();
        let props: Vec<Proposal> = (0..3).map(|i| sample_proposal(i, 3)).collect();
        let text = format!("the {} near the {}", vocab.names[0], vocab.names[1]);
        let parsed = parse(&text, &vocab).unwrap();
        let mut g = Graph::new();
        let f_po = model.encode_proposals(&mut g, &props).unwrap();
        let enc = model.encode_text(&mut g, &parsed.tokens).unwrap();
        let spans: Vec<_> = parsed.noun_phrases.iter().map(|np| np.span).collect();
        let pair = model.fuse(&mut g, f_po, &enc, &spans).unwrap();
        assert_eq!(g.value(pair.f_po), g.value(f_po), "no fusion, no change");
        assert_eq!(
            g.value(pair.f_se).values(),
            g.value(enc.states).row_slice(0)
        );
        // The classifier head still runs.
        let ps = g.value(pair.p_s);
        assert_eq!(ps.shape(), [3, 4]);
        for r in 0..3 {
            let s: f64 = ps.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fused_outputs_are_proposal_permutation_equivariant() {
        let vocab = tiny_vocab();
        let model = tiny_model(7);
        let props: Vec<Proposal> = (0..4).map(|i| sample_proposal(10 + i, 3)).collect();
        let text = format!("the {} that is behind the {}", vocab.names[2], vocab.names[3]);
        let parsed = parse(&text, &vocab).unwrap();

        let mut g = Graph::new();
        let base = model.encode_pair(&mut g, &props, &parsed).unwrap();
        let base_fpo = g.value(base.f_po).clone();
        let base_ps = g.value(base.p_s).clone();
        let base_fse = g.value(base.f_se).clone();

        let perm = [2, 0, 3, 1];
        let permuted: Vec<Proposal> = perm.iter().map(|&i| props[i].clone()).collect();
        let mut g2 = Graph::new();
        let moved = model.encode_pair(&mut g2, &permuted, &parsed).unwrap();
        let moved_fpo = g2.value(moved.f_po).clone();
        let moved_ps = g2.value(moved.p_s).clone();
        let moved_fse = g2.value(moved.f_se).clone();

        for (new_row, &old_row) in perm.iter().enumerate() {
            for (a, b) in moved_fpo
                .row_slice(new_row)
                .iter()
                .zip(base_fpo.row_slice(old_row))
            {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in moved_ps
                .row_slice(new_row)
                .iter()
                .zip(base_ps.row_slice(old_row))
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in moved_fse.values().iter().zip(base_fse.values()) {
            assert!((a - b).abs() < 1e-12, "sentence state must ignore proposal order");
        }
    }

    #[test]
    fn relation_head_is_order_sensitive_with_right_arity() {
        let vocab = tiny_vocab();
        let model = tiny_model(8);
        let props: Vec<Proposal> = (0..3).map(|i| sample_proposal(20 + i, 3)).collect();
        let parsed = parse(&format!("the {}", vocab.names[0]), &vocab).unwrap();
        let mut g = Graph::new();
        let pair = model.encode_pair(&mut g, &props, &parsed).unwrap();
        let ij = model.relation_head(&mut g, pair.f_po, 0, 2).unwrap();
        let ji = model.relation_head(&mut g, pair.f_po, 2, 0).unwrap();
        assert_eq!(g.value(ij).shape(), [RELATION_LIBRARY.len()]);
        assert_ne!(g.value(ij).values(), g.value(ji).values());
    }

    #[test]
    fn gradients_reach_both_modalities_and_every_block() {
        let vocab = tiny_vocab();
        let model = tiny_model(9);
        let props: Vec<Proposal> = (0..3).map(|i| sample_proposal(30 + i, 3)).collect();
        let text = format!("the {} next to the {}", vocab.names[1], vocab.names[2]);
        let parsed = parse(&text, &vocab).unwrap();

        // A toy scalar loss that touches every output head.
        let mut store = model.params.clone();
        let report = grad_check(
            |g, params| {
                let probe = Model {
                    config: model.config.clone(),
                    params: params.clone(),
                    token_table: model.token_table.clone(),
                    category_names: model.category_names.clone(),
                };
                let pair = probe.encode_pair(g, &props, &parsed)?;
                let rel = probe.relation_head(g, pair.f_po, 0, 1)?;
                let a = g.sum_all(pair.f_po);
                let b = g.sum_all(pair.f_se);
                let c = g.sum_all(pair.p_s_logits);
                let d = g.sum_all(pair.f_phr.expect("two phrases survive"));
                let e = g.sum_all(rel);
                let ab = g.add(a, b)?;
                let cd = g.add(c, d)?;
                let abe = g.add(ab, e)?;
                g.add(abe, cd)
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");

        // Explicitly confirm both modalities receive nonzero gradient.
        let mut g = Graph::new();
        let mut store = model.params.clone();
        let pair = model.encode_pair(&mut g, &props, &parsed).unwrap();
        let loss = g.sum_all(pair.p_s_logits);
        g.backward(loss, &mut store).unwrap();
        for name in ["prop.l1.w", "text.tok", "fus.l0.p2t.attn.wq", "cls.l2.w"] {
            let grad = store.grad(name).unwrap();
            assert!(
                grad.values().iter().any(|&v| v != 0.0),
                "no gradient reached {name}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(11);
        let p1 = dir.path().join("model.ckpt");
        let p1 = p1.to_str().unwrap();
        model.save(p1).unwrap();
        let loaded = Model::load(p1).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.token_table, model.token_table);
        assert_eq!(loaded.category_names, model.category_names);
        assert_eq!(loaded.params.digest(), model.params.digest());
        let p2 = dir.path().join("model2.ckpt");
        let p2 = p2.to_str().unwrap();
        loaded.save(p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            Model::load(p.to_str().unwrap()),
            Err(ModelError::Format(_))
        ));
    }

    #[test]
    fn seeds_control_initialization() {
        let a = tiny_model(1);
        let b = tiny_model(1);
        let c = tiny_model(2);
        assert_eq!(a.params.digest(), b.params.digest());
        assert_ne!(a.params.digest(), c.params.digest());
    }
}
