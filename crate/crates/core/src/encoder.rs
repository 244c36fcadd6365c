//! A small transformer encoder pair with a deterministic tokenizer.
//!
//! Two encoders (one for logs, one for knowledge) are initialized from
//! byte-identical parameters and trained independently. The forward pass is a
//! standard pre-norm transformer in 64-bit floats: deterministic, PAD-masked
//! attention, learned positional embeddings, GELU feed-forward blocks.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod autograd;
pub mod checkpoint;

pub use autograd::{finite_difference_grads, max_relative_error, GradError, Graph, VarId};

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const PAD_ID: usize = 3;
pub const UNK_ID: usize = 4;

/// Display names of the special tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token id {id} exceeds vocabulary size {vocab_size}")]
    VocabOverflow { id: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("sequence contains only padding")]
    AllPadding,
    #[error("invalid dims: {0}")]
    BadDims(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Token vocabulary with the five fixed specials at ids 0..4. Splitting text
/// never yields a special id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            tokens,
        }
    }

    /// Builds a vocabulary from texts, inserting tokens in first-seen order
    /// so construction is deterministic.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab::new();
        for text in texts {
            for token in split_tokens(text.as_ref()) {
                vocab.add_token(&token);
            }
        }
        vocab
    }

    pub fn add_token(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.token_to_id.insert(token.to_owned(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }
}

/// Lowercases and splits text into alphanumeric/underscore runs. The slot
/// sentinel `<*>` and the sequence separator `<sep>` survive as single
/// tokens; all other punctuation is dropped.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let bytes = lower.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut run_start: Option<usize> = None;
    while i < bytes.len() {
        let rest = &lower[i..];
        if rest.starts_with("<*>") || rest.starts_with("<sep>") {
            if let Some(start) = run_start.take() {
                tokens.push(lower[start..i].to_owned());
            }
            let atom_len = if rest.starts_with("<*>") { 3 } else { 5 };
            tokens.push(lower[i..i + atom_len].to_owned());
            i += atom_len;
            continue;
        }
        let ch = rest.chars().next().expect("non-empty rest");
        if ch.is_alphanumeric() || ch == '_' {
            if run_start.is_none() {
                run_start = Some(i);
            }
        } else if let Some(start) = run_start.take() {
            tokens.push(lower[start..i].to_owned());
        }
        i += ch.len_utf8();
    }
    if let Some(start) = run_start {
        tokens.push(lower[start..].to_owned());
    }
    tokens
}

/// Joins the logs of a sequence with the `<sep>` separator word, the input
/// shape used for sequence-level tasks.
pub fn join_sequence(logs: &[impl AsRef<str>]) -> String {
    logs.iter()
        .map(|l| l.as_ref())
        .collect::<Vec<_>>()
        .join(" <sep> ")
}

/// Tokenizes to exactly `max_len` ids: `[CLS] body [SEP]` padded with
/// `[PAD]`, with the body truncated to `max_len - 2` tokens. Out-of-vocab
/// tokens map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must fit [CLS] and [SEP]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    for token in split_tokens(text).into_iter().take(max_len - 2) {
        ids.push(vocab.id(&token).unwrap_or(UNK_ID));
    }
    ids.push(SEP_ID);
    ids.resize(max_len, PAD_ID);
    ids
}

/// Shape of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ff_mult: usize,
}

impl EncoderDims {
    /// Desk-scale defaults: d=32, 2 layers, 2 heads, max_len 128.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderDims {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_len: 128,
            ff_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(EncoderError::BadDims("zero dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::BadDims(format!(
                "heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size <= UNK_ID {
            return Err(EncoderError::BadDims(
                "vocab must include the special tokens".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(EncoderError::BadDims("max_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

/// Per-layer weights: pre-norm attention block then pre-norm feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array2<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array2<f64>,
}

/// Full encoder parameters: embeddings, layers, final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Array2<f64>,
    pub ln_f_bias: Array2<f64>,
}

pub(crate) fn random_normal(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl EncoderParams {
    /// Seeded initialization: weights ~ N(0, 0.02), zero biases, unit
    /// layer-norm gains.
    pub fn init(seed: u64, dims: EncoderDims) -> Result<Self, EncoderError> {
        EncoderParams::init_with_scale(seed, dims, 0.02)
    }

    pub fn init_with_scale(seed: u64, dims: EncoderDims, std: f64) -> Result<Self, EncoderError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_model;
        let ff = dims.ff_dim();
        let mut layers = Vec::with_capacity(dims.n_layers);
        let tok_emb = random_normal(&mut rng, dims.vocab_size, d, std);
        let pos_emb = random_normal(&mut rng, dims.max_len, d, std);
        for _ in 0..dims.n_layers {
            layers.push(LayerParams {
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                w_q: random_normal(&mut rng, d, d, std),
                b_q: Array2::zeros((1, d)),
                w_k: random_normal(&mut rng, d, d, std),
                b_k: Array2::zeros((1, d)),
                w_v: random_normal(&mut rng, d, d, std),
                b_v: Array2::zeros((1, d)),
                w_o: random_normal(&mut rng, d, d, std),
                b_o: Array2::zeros((1, d)),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
                w_ff1: random_normal(&mut rng, d, ff, std),
                b_ff1: Array2::zeros((1, ff)),
                w_ff2: random_normal(&mut rng, ff, d, std),
                b_ff2: Array2::zeros((1, d)),
            });
        }
        Ok(EncoderParams {
            dims,
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain: Array2::ones((1, d)),
            ln_f_bias: Array2::zeros((1, d)),
        })
    }

    /// Named tensors in canonical order; the order is the contract for
    /// gradient vectors, optimizer state and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("w_q", &l.w_q),
                ("b_q", &l.b_q),
                ("w_k", &l.w_k),
                ("b_k", &l.b_k),
                ("w_v", &l.w_v),
                ("b_v", &l.b_v),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w_ff1", &l.w_ff1),
                ("b_ff1", &l.b_ff1),
                ("w_ff2", &l.w_ff2),
                ("b_ff2", &l.b_ff2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("ln_f_gain".into(), &self.ln_f_gain));
        out.push(("ln_f_bias".into(), &self.ln_f_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1_gain", &mut l.ln1_gain),
                ("ln1_bias", &mut l.ln1_bias),
                ("w_q", &mut l.w_q),
                ("b_q", &mut l.b_q),
                ("w_k", &mut l.w_k),
                ("b_k", &mut l.b_k),
                ("w_v", &mut l.w_v),
                ("b_v", &mut l.b_v),
                ("w_o", &mut l.w_o),
                ("b_o", &mut l.b_o),
                ("ln2_gain", &mut l.ln2_gain),
                ("ln2_bias", &mut l.ln2_bias),
                ("w_ff1", &mut l.w_ff1),
                ("b_ff1", &mut l.b_ff1),
                ("w_ff2", &mut l.w_ff2),
                ("b_ff2", &mut l.b_ff2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("ln_f_gain".into(), &mut self.ln_f_gain));
        out.push(("ln_f_bias".into(), &mut self.ln_f_bias));
        out
    }

    /// Rebuilds parameters from named tensors (checkpoint loading).
    pub fn from_tensors(
        dims: EncoderDims,
        mut tensors: HashMap<String, Array2<f64>>,
    ) -> Result<Self, EncoderError> {
        dims.validate()?;
        let mut take = |name: &str| -> Result<Array2<f64>, EncoderError> {
            tensors
                .remove(name)
                .ok_or_else(|| EncoderError::BadDims(format!("missing tensor {name}")))
        };
        let tok_emb = take("tok_emb")?;
        let pos_emb = take("pos_emb")?;
        let mut layers = Vec::with_capacity(dims.n_layers);
        for i in 0..dims.n_layers {
            layers.push(LayerParams {
                ln1_gain: take(&format!("layers.{i}.ln1_gain"))?,
                ln1_bias: take(&format!("layers.{i}.ln1_bias"))?,
                w_q: take(&format!("layers.{i}.w_q"))?,
                b_q: take(&format!("layers.{i}.b_q"))?,
                w_k: take(&format!("layers.{i}.w_k"))?,
                b_k: take(&format!("layers.{i}.b_k"))?,
                w_v: take(&format!("layers.{i}.w_v"))?,
                b_v: take(&format!("layers.{i}.b_v"))?,
                w_o: take(&format!("layers.{i}.w_o"))?,
                b_o: take(&format!("layers.{i}.b_o"))?,
                ln2_gain: take(&format!("layers.{i}.ln2_gain"))?,
                ln2_bias: take(&format!("layers.{i}.ln2_bias"))?,
                w_ff1: take(&format!("layers.{i}.w_ff1"))?,
                b_ff1: take(&format!("layers.{i}.b_ff1"))?,
                w_ff2: take(&format!("layers.{i}.w_ff2"))?,
                b_ff2: take(&format!("layers.{i}.b_ff2"))?,
            });
        }
        Ok(EncoderParams {
            dims,
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain: take("ln_f_gain")?,
            ln_f_bias: take("ln_f_bias")?,
        })
    }
}

/// Initializes two encoders with byte-identical parameters from one seed.
pub fn clone_init(seed: u64, dims: EncoderDims) -> Result<(EncoderParams, EncoderParams), EncoderError> {
    let first = EncoderParams::init(seed, dims)?;
    let second = first.clone();
    Ok((first, second))
}

/// Graph-side handles to one encoder's parameters.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub ln1_gain: VarId,
    pub ln1_bias: VarId,
    pub w_q: VarId,
    pub b_q: VarId,
    pub w_k: VarId,
    pub b_k: VarId,
    pub w_v: VarId,
    pub b_v: VarId,
    pub w_o: VarId,
    pub b_o: VarId,
    pub ln2_gain: VarId,
    pub ln2_bias: VarId,
    pub w_ff1: VarId,
    pub b_ff1: VarId,
    pub w_ff2: VarId,
    pub b_ff2: VarId,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub dims: EncoderDims,
    pub tok_emb: VarId,
    pub pos_emb: VarId,
    pub layers: Vec<LayerVars>,
    pub ln_f_gain: VarId,
    pub ln_f_bias: VarId,
}

impl EncoderVars {
    /// Inserts every parameter as a graph leaf.
    pub fn insert(graph: &mut Graph, params: &EncoderParams) -> Self {
        let tok_emb = graph.leaf(params.tok_emb.clone());
        let pos_emb = graph.leaf(params.pos_emb.clone());
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_gain: graph.leaf(l.ln1_gain.clone()),
                ln1_bias: graph.leaf(l.ln1_bias.clone()),
                w_q: graph.leaf(l.w_q.clone()),
                b_q: graph.leaf(l.b_q.clone()),
                w_k: graph.leaf(l.w_k.clone()),
                b_k: graph.leaf(l.b_k.clone()),
                w_v: graph.leaf(l.w_v.clone()),
                b_v: graph.leaf(l.b_v.clone()),
                w_o: graph.leaf(l.w_o.clone()),
                b_o: graph.leaf(l.b_o.clone()),
                ln2_gain: graph.leaf(l.ln2_gain.clone()),
                ln2_bias: graph.leaf(l.ln2_bias.clone()),
                w_ff1: graph.leaf(l.w_ff1.clone()),
                b_ff1: graph.leaf(l.b_ff1.clone()),
                w_ff2: graph.leaf(l.w_ff2.clone()),
                b_ff2: graph.leaf(l.b_ff2.clone()),
            })
            .collect();
        EncoderVars {
            dims: params.dims,
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain: graph.leaf(params.ln_f_gain.clone()),
            ln_f_bias: graph.leaf(params.ln_f_bias.clone()),
        }
    }

    /// Leaf ids in the same canonical order as [`EncoderParams::tensors`].
    pub fn ids(&self) -> Vec<VarId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.w_q, l.b_q, l.w_k, l.b_k, l.w_v, l.b_v, l.w_o, l.b_o,
                l.ln2_gain, l.ln2_bias, l.w_ff1, l.b_ff1, l.w_ff2, l.b_ff2,
            ]);
        }
        out.extend([self.ln_f_gain, self.ln_f_bias]);
        out
    }

    /// Gradients in canonical tensor order, zeros where unused.
    pub fn grads(&self, graph: &Graph) -> Vec<Array2<f64>> {
        self.ids().iter().map(|&id| graph.grad_or_zero(id)).collect()
    }
}

/// Forward-pass artifacts worth inspecting: the final representations and
/// every attention distribution (layer-major, then head).
pub struct EncodeBuilt {
    pub output: VarId,
    pub attentions: Vec<VarId>,
}

/// Builds the encoder forward pass for one id sequence inside `graph`.
/// PAD key positions are masked out of every attention row.
pub fn encode_graph(graph: &mut Graph, vars: &EncoderVars, ids: &[usize]) -> EncodeBuilt {
    let dims = vars.dims;
    let n = ids.len();
    let allowed: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();

    let tok = graph.gather_rows(vars.tok_emb, ids.to_vec());
    let pos = graph.gather_rows(vars.pos_emb, (0..n).collect());
    let mut x = graph.add(tok, pos);

    let mut attentions = Vec::with_capacity(dims.n_layers * dims.n_heads);
    let head_dim = dims.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    for layer in &vars.layers {
        let normed = graph.layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias);
        let q = graph.matmul(normed, layer.w_q);
        let q = graph.add_row_vec(q, layer.b_q);
        let k = graph.matmul(normed, layer.w_k);
        let k = graph.add_row_vec(k, layer.b_k);
        let v = graph.matmul(normed, layer.w_v);
        let v = graph.add_row_vec(v, layer.b_v);

        let mut head_outputs = Vec::with_capacity(dims.n_heads);
        for h in 0..dims.n_heads {
            let (start, end) = (h * head_dim, (h + 1) * head_dim);
            let qh = graph.slice_cols(q, start, end);
            let kh = graph.slice_cols(k, start, end);
            let vh = graph.slice_cols(v, start, end);
            let scores = graph.matmul_trans_b(qh, kh);
            let scores = graph.scale(scores, scale);
            let attn = graph.softmax_rows_masked(scores, allowed.clone());
            attentions.push(attn);
            head_outputs.push(graph.matmul(attn, vh));
        }
        let concat = graph.concat_cols(&head_outputs);
        let projected = graph.matmul(concat, layer.w_o);
        let projected = graph.add_row_vec(projected, layer.b_o);
        x = graph.add(x, projected);

        let normed = graph.layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias);
        let hidden = graph.matmul(normed, layer.w_ff1);
        let hidden = graph.add_row_vec(hidden, layer.b_ff1);
        let hidden = graph.gelu(hidden);
        let ff = graph.matmul(hidden, layer.w_ff2);
        let ff = graph.add_row_vec(ff, layer.b_ff2);
        x = graph.add(x, ff);
    }

    let output = graph.layer_norm_rows(x, vars.ln_f_gain, vars.ln_f_bias);
    EncodeBuilt { output, attentions }
}

/// Per-token representations plus the CLS sentence vector (row 0).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub token_reps: Array2<f64>,
    pub cls: Array1<f64>,
    pub pad_mask: Vec<bool>,
}

fn validate_ids(params: &EncoderParams, ids: &[usize]) -> Result<(), EncoderError> {
    if ids.len() > params.dims.max_len {
        return Err(EncoderError::SequenceTooLong {
            len: ids.len(),
            max_len: params.dims.max_len,
        });
    }
    for &id in ids {
        if id >= params.dims.vocab_size {
            return Err(EncoderError::VocabOverflow {
                id,
                vocab_size: params.dims.vocab_size,
            });
        }
    }
    if ids.iter().all(|&id| id == PAD_ID) {
        return Err(EncoderError::AllPadding);
    }
    Ok(())
}

/// Runs the deterministic forward pass over frozen parameters.
pub fn encode(params: &EncoderParams, ids: &[usize]) -> Result<EncodedSequence, EncoderError> {
    let (seq, _) = encode_with_attention(params, ids)?;
    Ok(seq)
}

/// As [`encode`], also returning every attention matrix for inspection.
pub fn encode_with_attention(
    params: &EncoderParams,
    ids: &[usize],
) -> Result<(EncodedSequence, Vec<Array2<f64>>), EncoderError> {
    validate_ids(params, ids)?;
    let mut graph = Graph::new();
    let vars = EncoderVars::insert(&mut graph, params);
    let built = encode_graph(&mut graph, &vars, ids);
    let token_reps = graph.value(built.output).clone();
    let cls = token_reps.row(0).to_owned();
    let attentions = built
        .attentions
        .iter()
        .map(|&a| graph.value(a).clone())
        .collect();
    Ok((
        EncodedSequence {
            token_reps,
            cls,
            pad_mask: ids.iter().map(|&id| id != PAD_ID).collect(),
        },
        attentions,
    ))
}
