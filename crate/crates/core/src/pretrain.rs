//! Knowledge-enhanced pre-training: word-level token prediction through the
//! knowledge perception module, sentence-level semantic alignment, and the
//! joint training loop over a bi-encoder.
//!
//! Token prediction masks log tokens and recovers each one from its
//! contextual representation concatenated with an attention-pooled view of
//! the paired knowledge tokens. Semantic alignment pulls a log's CLS vector
//! toward its own knowledge and away from the other knowledge vectors in the
//! batch with a temperature-scaled contrastive loss over cosine similarities.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{round_half_up, KnowledgePair};
use crate::encoder::{
    clone_init, encode_graph, random_normal, tokenize, EncoderDims, EncoderError, EncoderParams,
    EncoderVars, Graph, VarId, Vocab, CLS_ID, MASK_ID, PAD_ID, SEP_ID,
};

pub mod optim;

use optim::{Adam, LrSchedule};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("sequence has no maskable token")]
    NothingToMask,
    #[error("knowledge sequence is empty")]
    EmptyKnowledge,
    #[error("degenerate embedding: zero-norm CLS vector at row {0}")]
    DegenerateEmbedding(usize),
    #[error("loss diverged to NaN at step {step}")]
    Divergence { step: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Grad(#[from] crate::encoder::GradError),
}

/// Weights of the knowledge perception module: query/key/value projections
/// over token representations plus the prediction head over `[l_i ; k']`.
#[derive(Debug, Clone, PartialEq)]
pub struct KpmParams {
    /// d×d
    pub w_q: Array2<f64>,
    /// d×d
    pub w_k: Array2<f64>,
    /// d×d
    pub w_v: Array2<f64>,
    /// V×2d
    pub w_f: Array2<f64>,
}

impl KpmParams {
    pub fn init(seed: u64, d_model: usize, vocab_size: usize) -> Self {
        KpmParams::init_with_scale(seed, d_model, vocab_size, 0.02)
    }

    pub fn init_with_scale(seed: u64, d_model: usize, vocab_size: usize, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KpmParams {
            w_q: random_normal(&mut rng, d_model, d_model, std),
            w_k: random_normal(&mut rng, d_model, d_model, std),
            w_v: random_normal(&mut rng, d_model, d_model, std),
            w_f: random_normal(&mut rng, vocab_size, 2 * d_model, std),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
            ("w_f".into(), &self.w_f),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
            ("w_f".into(), &mut self.w_f),
        ]
    }

    pub fn from_tensors(
        mut tensors: std::collections::HashMap<String, Array2<f64>>,
    ) -> Result<Self, PretrainError> {
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| PretrainError::BadConfig(format!("missing kpm tensor {name}")))
        };
        Ok(KpmParams {
            w_q: take("w_q")?,
            w_k: take("w_k")?,
            w_v: take("w_v")?,
            w_f: take("w_f")?,
        })
    }
}

/// Graph-side handles to the KPM weights.
pub struct KpmVars {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_f: VarId,
}

impl KpmVars {
    pub fn insert(graph: &mut Graph, params: &KpmParams) -> Self {
        KpmVars {
            w_q: graph.leaf(params.w_q.clone()),
            w_k: graph.leaf(params.w_k.clone()),
            w_v: graph.leaf(params.w_v.clone()),
            w_f: graph.leaf(params.w_f.clone()),
        }
    }

    pub fn grads(&self, graph: &Graph) -> Vec<Array2<f64>> {
        [self.w_q, self.w_k, self.w_v, self.w_f]
            .iter()
            .map(|&id| graph.grad_or_zero(id))
            .collect()
    }
}

/// Which positions of a log sequence are masked and what they originally
/// held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
    pub ratio: f64,
}

/// Default fraction of maskable tokens replaced by `[MASK]`.
pub const DEFAULT_MASK_RATIO: f64 = 0.15;

fn is_maskable(id: usize) -> bool {
    !matches!(id, CLS_ID | SEP_ID | PAD_ID | MASK_ID)
}

/// Replaces `max(1, round(ratio * n_maskable))` token positions with
/// `[MASK]`, never touching CLS/SEP/PAD. Deterministic for a fixed RNG state.
pub fn mask_tokens(
    ids: &[usize],
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, MaskingPlan), PretrainError> {
    let mut maskable: Vec<usize> = (0..ids.len()).filter(|&i| is_maskable(ids[i])).collect();
    if maskable.is_empty() {
        return Err(PretrainError::NothingToMask);
    }
    let count = round_half_up(ratio * maskable.len() as f64)
        .max(1)
        .min(maskable.len());
    maskable.shuffle(rng);
    let mut positions: Vec<usize> = maskable.into_iter().take(count).collect();
    positions.sort_unstable();
    let targets: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
    let mut masked = ids.to_vec();
    for &p in &positions {
        masked[p] = MASK_ID;
    }
    Ok((
        masked,
        MaskingPlan {
            positions,
            targets,
            ratio,
        },
    ))
}

/// One (log, knowledge) training pair: unmasked token ids plus the plan for
/// the log side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPair {
    pub log_ids: Vec<usize>,
    pub know_ids: Vec<usize>,
    pub plan: MaskingPlan,
}

impl PretrainPair {
    pub fn masked_log_ids(&self) -> Vec<usize> {
        let mut ids = self.log_ids.clone();
        for &p in &self.plan.positions {
            ids[p] = MASK_ID;
        }
        ids
    }
}

/// A batch of aligned (log, knowledge) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainBatch {
    pub pairs: Vec<PretrainPair>,
}

impl PretrainBatch {
    /// Tokenizes and masks a batch of (log, knowledge) texts.
    pub fn from_texts(
        texts: &[(&str, &str)],
        vocab: &Vocab,
        max_len: usize,
        mask_ratio: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, PretrainError> {
        let mut pairs = Vec::with_capacity(texts.len());
        for (log_text, know_text) in texts {
            let log_ids = tokenize(log_text, vocab, max_len);
            let know_ids = tokenize(know_text, vocab, max_len);
            let (_, plan) = mask_tokens(&log_ids, mask_ratio, rng)?;
            pairs.push(PretrainPair {
                log_ids,
                know_ids,
                plan,
            });
        }
        if pairs.is_empty() {
            return Err(PretrainError::EmptyBatch);
        }
        Ok(PretrainBatch { pairs })
    }
}

/// Pre-training hyperparameters. Desk-scale defaults; the original-scale
/// values (batch 32, 40 epochs, 2000 warmup steps, lr 5e-5) remain available
/// through the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Contrastive temperature τ.
    pub temperature: f64,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// When set, overrides `steps` with `epochs * ceil(n / batch_size)`.
    pub epochs: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            temperature: 0.05,
            mask_ratio: DEFAULT_MASK_RATIO,
            batch_size: 8,
            steps: 200,
            epochs: None,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            seed: 0,
            max_len: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(PretrainError::BadConfig(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(PretrainError::BadConfig(format!(
                "mask ratio {} must lie in (0,1)",
                self.mask_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(PretrainError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab_size: usize) -> EncoderDims {
        EncoderDims {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
            ff_mult: 4,
        }
    }
}

/// The two jointly pre-trained encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoder {
    pub log_encoder: EncoderParams,
    pub knowledge_encoder: EncoderParams,
}

impl BiEncoder {
    /// Twin initialization from one seed.
    pub fn init(seed: u64, dims: EncoderDims) -> Result<Self, EncoderError> {
        let (log_encoder, knowledge_encoder) = clone_init(seed, dims)?;
        Ok(BiEncoder {
            log_encoder,
            knowledge_encoder,
        })
    }
}

/// Attention of one masked-token representation over knowledge-token
/// representations: returns the attention distribution and the pooled
/// knowledge vector.
pub fn kpm_attend(
    l_i: &Array1<f64>,
    k: &Array2<f64>,
    params: &KpmParams,
) -> Result<(Array1<f64>, Array1<f64>), PretrainError> {
    if k.nrows() == 0 {
        return Err(PretrainError::EmptyKnowledge);
    }
    let d = l_i.len();
    let q = params.w_q.dot(l_i);
    let keys = k.dot(&params.w_k.t());
    let values = k.dot(&params.w_v.t());
    let scores = keys.dot(&q) / (d as f64).sqrt();

    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = scores.mapv(|s| (s - max).exp());
    let sum = exp.sum();
    let alpha = exp / sum;
    let k_prime = alpha.dot(&values);
    Ok((alpha, k_prime))
}

/// In-graph version of [`kpm_attend`] plus the prediction logits for one
/// masked position. `l_i` is 1×d, `k` is m×d.
fn kpm_logits_graph(graph: &mut Graph, l_i: VarId, k: VarId, kpm: &KpmVars, d_model: usize) -> VarId {
    let q = graph.matmul_trans_b(l_i, kpm.w_q);
    let keys = graph.matmul_trans_b(k, kpm.w_k);
    let values = graph.matmul_trans_b(k, kpm.w_v);
    let scores = graph.matmul_trans_b(q, keys);
    let scaled = graph.scale(scores, 1.0 / (d_model as f64).sqrt());
    let alpha = graph.softmax_rows(scaled);
    let pooled = graph.matmul(alpha, values);
    let features = graph.concat_cols(&[l_i, pooled]);
    graph.matmul_trans_b(features, kpm.w_f)
}

fn non_pad_indices(ids: &[usize]) -> Vec<usize> {
    (0..ids.len()).filter(|&i| ids[i] != PAD_ID).collect()
}

/// Builds both pre-training losses over one batch inside `graph`. Each log is
/// encoded once (with its masks applied); token prediction reads the masked
/// positions, semantic alignment reads the CLS rows.
pub fn build_losses(
    graph: &mut Graph,
    batch: &PretrainBatch,
    log_vars: &EncoderVars,
    know_vars: &EncoderVars,
    kpm: &KpmVars,
    tau: f64,
) -> Result<(VarId, VarId), PretrainError> {
    if batch.pairs.is_empty() {
        return Err(PretrainError::EmptyBatch);
    }
    let d_model = log_vars.dims.d_model;
    let mut logit_rows = Vec::new();
    let mut targets = Vec::new();
    let mut log_cls_rows = Vec::with_capacity(batch.pairs.len());
    let mut know_cls_rows = Vec::with_capacity(batch.pairs.len());

    for pair in &batch.pairs {
        if pair.plan.positions.is_empty() {
            return Err(PretrainError::NothingToMask);
        }
        let masked = pair.masked_log_ids();
        let log_built = encode_graph(graph, log_vars, &masked);
        let know_built = encode_graph(graph, know_vars, &pair.know_ids);

        let know_tokens = non_pad_indices(&pair.know_ids);
        if know_tokens.is_empty() {
            return Err(PretrainError::EmptyKnowledge);
        }
        let know_reps = graph.gather_rows(know_built.output, know_tokens);

        for (&position, &target) in pair.plan.positions.iter().zip(&pair.plan.targets) {
            let l_i = graph.gather_rows(log_built.output, vec![position]);
            logit_rows.push(kpm_logits_graph(graph, l_i, know_reps, kpm, d_model));
            targets.push(target);
        }

        log_cls_rows.push(graph.gather_rows(log_built.output, vec![0]));
        know_cls_rows.push(graph.gather_rows(know_built.output, vec![0]));
    }

    let all_logits = graph.concat_rows(&logit_rows);
    let tp = graph.cross_entropy_rows(all_logits, targets);

    let log_cls = graph.concat_rows(&log_cls_rows);
    let know_cls = graph.concat_rows(&know_cls_rows);
    let sa = sa_from_cls_graph(graph, log_cls, know_cls, tau)?;
    Ok((tp, sa))
}

/// Semantic-alignment subgraph over stacked CLS rows (N×d each): cosine
/// similarity matrix scaled by 1/τ, then cross-entropy against the diagonal.
pub fn sa_from_cls_graph(
    graph: &mut Graph,
    log_cls: VarId,
    know_cls: VarId,
    tau: f64,
) -> Result<VarId, PretrainError> {
    for id in [log_cls, know_cls] {
        for (row_idx, row) in graph.value(id).rows().into_iter().enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(PretrainError::DegenerateEmbedding(row_idx));
            }
        }
    }
    let n = graph.value(log_cls).nrows();
    let u = graph.normalize_rows(log_cls);
    let v = graph.normalize_rows(know_cls);
    let sim = graph.matmul_trans_b(u, v);
    let scaled = graph.scale(sim, 1.0 / tau);
    Ok(graph.cross_entropy_rows(scaled, (0..n).collect()))
}

/// Semantic-alignment loss for explicit CLS matrices.
pub fn sa_loss_from_cls(
    log_cls: &Array2<f64>,
    know_cls: &Array2<f64>,
    tau: f64,
) -> Result<f64, PretrainError> {
    let mut graph = Graph::new();
    let u = graph.leaf(log_cls.clone());
    let v = graph.leaf(know_cls.clone());
    let loss = sa_from_cls_graph(&mut graph, u, v, tau)?;
    Ok(graph.scalar(loss))
}

/// Per-component loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tp: f64,
    pub sa: f64,
    pub joint: f64,
}

/// Gradients for every trainable tensor, in canonical order per group.
pub struct PretrainGrads {
    pub log_encoder: Vec<Array2<f64>>,
    pub knowledge_encoder: Vec<Array2<f64>>,
    pub kpm: Vec<Array2<f64>>,
}

struct BuiltLosses {
    graph: Graph,
    log_vars: EncoderVars,
    know_vars: EncoderVars,
    kpm_vars: KpmVars,
    tp: VarId,
    sa: VarId,
    joint: VarId,
}

impl BuiltLosses {
    fn grads(&self) -> PretrainGrads {
        PretrainGrads {
            log_encoder: self.log_vars.grads(&self.graph),
            knowledge_encoder: self.know_vars.grads(&self.graph),
            kpm: self.kpm_vars.grads(&self.graph),
        }
    }
}

fn build_graph_losses(
    batch: &PretrainBatch,
    encoders: &BiEncoder,
    kpm: &KpmParams,
    tau: f64,
) -> Result<BuiltLosses, PretrainError> {
    let mut graph = Graph::new();
    let log_vars = EncoderVars::insert(&mut graph, &encoders.log_encoder);
    let know_vars = EncoderVars::insert(&mut graph, &encoders.knowledge_encoder);
    let kpm_vars = KpmVars::insert(&mut graph, kpm);
    let (tp, sa) = build_losses(&mut graph, batch, &log_vars, &know_vars, &kpm_vars, tau)?;
    let joint = graph.add(tp, sa);
    Ok(BuiltLosses {
        graph,
        log_vars,
        know_vars,
        kpm_vars,
        tp,
        sa,
        joint,
    })
}

/// Token-prediction loss of a batch.
pub fn tp_loss(
    batch: &PretrainBatch,
    encoders: &BiEncoder,
    kpm: &KpmParams,
) -> Result<f64, PretrainError> {
    let built = build_graph_losses(batch, encoders, kpm, 1.0)?;
    Ok(built.graph.scalar(built.tp))
}

/// Semantic-alignment loss of a batch.
pub fn sa_loss(batch: &PretrainBatch, encoders: &BiEncoder, tau: f64) -> Result<f64, PretrainError> {
    let mut graph = Graph::new();
    let log_vars = EncoderVars::insert(&mut graph, &encoders.log_encoder);
    let know_vars = EncoderVars::insert(&mut graph, &encoders.knowledge_encoder);
    let mut log_cls_rows = Vec::new();
    let mut know_cls_rows = Vec::new();
    if batch.pairs.is_empty() {
        return Err(PretrainError::EmptyBatch);
    }
    for pair in &batch.pairs {
        let masked = pair.masked_log_ids();
        let log_built = encode_graph(&mut graph, &log_vars, &masked);
        let know_built = encode_graph(&mut graph, &know_vars, &pair.know_ids);
        log_cls_rows.push(graph.gather_rows(log_built.output, vec![0]));
        know_cls_rows.push(graph.gather_rows(know_built.output, vec![0]));
    }
    let log_cls = graph.concat_rows(&log_cls_rows);
    let know_cls = graph.concat_rows(&know_cls_rows);
    let loss = sa_from_cls_graph(&mut graph, log_cls, know_cls, tau)?;
    Ok(graph.scalar(loss))
}

/// Sum of the two objectives.
pub fn joint_loss(
    batch: &PretrainBatch,
    encoders: &BiEncoder,
    kpm: &KpmParams,
    tau: f64,
) -> Result<LossBreakdown, PretrainError> {
    let built = build_graph_losses(batch, encoders, kpm, tau)?;
    Ok(LossBreakdown {
        tp: built.graph.scalar(built.tp),
        sa: built.graph.scalar(built.sa),
        joint: built.graph.scalar(built.joint),
    })
}

/// Joint loss plus analytic gradients for every parameter.
pub fn joint_loss_with_grads(
    batch: &PretrainBatch,
    encoders: &BiEncoder,
    kpm: &KpmParams,
    tau: f64,
) -> Result<(LossBreakdown, PretrainGrads), PretrainError> {
    let mut built = build_graph_losses(batch, encoders, kpm, tau)?;
    let breakdown = LossBreakdown {
        tp: built.graph.scalar(built.tp),
        sa: built.graph.scalar(built.sa),
        joint: built.graph.scalar(built.joint),
    };
    let joint = built.joint;
    built.graph.backward(joint)?;
    Ok((breakdown, built.grads()))
}

/// Token-prediction loss plus gradients.
pub fn tp_loss_with_grads(
    batch: &PretrainBatch,
    encoders: &BiEncoder,
    kpm: &KpmParams,
) -> Result<(f64, PretrainGrads), PretrainError> {
    let mut built = build_graph_losses(batch, encoders, kpm, 1.0)?;
    let value = built.graph.scalar(built.tp);
    let tp = built.tp;
    built.graph.backward(tp)?;
    Ok((value, built.grads()))
}

/// Semantic-alignment loss plus gradients (the KPM slots come back zero).
pub fn sa_loss_with_grads(
    batch: &PretrainBatch,
    encoders: &BiEncoder,
    kpm: &KpmParams,
    tau: f64,
) -> Result<(f64, PretrainGrads), PretrainError> {
    let mut built = build_graph_losses(batch, encoders, kpm, tau)?;
    let value = built.graph.scalar(built.sa);
    let sa = built.sa;
    built.graph.backward(sa)?;
    Ok((value, built.grads()))
}

/// One history entry per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub tp: f64,
    pub sa: f64,
    pub joint: f64,
}

/// Result of a pre-training run.
pub struct TrainOutcome {
    pub encoders: BiEncoder,
    pub kpm: KpmParams,
    pub vocab: Vocab,
    pub dims: EncoderDims,
    pub history: Vec<StepLoss>,
    /// Whole-corpus joint loss before the first step.
    pub initial: LossBreakdown,
    /// Whole-corpus joint loss after the last step, on the same masking.
    pub r#final: LossBreakdown,
}

/// Pre-trains the bi-encoder and KPM on a corpus of (template, knowledge)
/// pairs with Adam, linear warmup then linear decay. Deterministic per seed.
pub fn train(corpus: &[KnowledgePair], config: &PretrainConfig) -> Result<TrainOutcome, PretrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }

    let mut texts: Vec<&str> = Vec::with_capacity(corpus.len() * 2);
    for pair in corpus {
        texts.push(&pair.template.template_text);
        texts.push(&pair.knowledge_text);
    }
    let vocab = Vocab::build(texts);
    let dims = config.dims(vocab.len());

    let mut encoders = BiEncoder::init(config.seed, dims)?;
    let mut kpm = KpmParams::init(config.seed.wrapping_add(1), dims.d_model, dims.vocab_size);

    let pair_texts: Vec<(&str, &str)> = corpus
        .iter()
        .map(|p| (p.template.template_text.as_str(), p.knowledge_text.as_str()))
        .collect();

    let n = pair_texts.len();
    let batch_size = config.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = config
        .epochs
        .map(|e| e * batches_per_epoch)
        .unwrap_or(config.steps);

    // Whole-corpus evaluation batch with its own fixed masking, so the
    // before/after losses are comparable.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let eval_batch = PretrainBatch::from_texts(
        &pair_texts,
        &vocab,
        config.max_len,
        config.mask_ratio,
        &mut eval_rng,
    )?;
    let initial = joint_loss(&eval_batch, &encoders, &kpm, config.temperature)?;

    let shapes: Vec<(usize, usize)> = encoders
        .log_encoder
        .tensors()
        .iter()
        .chain(encoders.knowledge_encoder.tensors().iter())
        .map(|(_, t)| t.dim())
        .chain(kpm.tensors().iter().map(|(_, t)| t.dim()))
        .collect();
    let mut adam = Adam::new(&shapes);
    let schedule = LrSchedule {
        base: config.learning_rate,
        warmup: config.warmup_steps.min(total_steps),
        total: total_steps,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force a shuffle on the first step
    let mut history = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let mut batch_texts = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor >= n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_texts.push(pair_texts[order[cursor]]);
            cursor += 1;
        }
        let batch = PretrainBatch::from_texts(
            &batch_texts,
            &vocab,
            config.max_len,
            config.mask_ratio,
            &mut rng,
        )?;

        let (breakdown, grads) =
            joint_loss_with_grads(&batch, &encoders, &kpm, config.temperature)?;
        if !breakdown.joint.is_finite() {
            return Err(PretrainError::Divergence { step });
        }
        history.push(StepLoss {
            step,
            tp: breakdown.tp,
            sa: breakdown.sa,
            joint: breakdown.joint,
        });

        let mut params: Vec<&mut Array2<f64>> = Vec::with_capacity(shapes.len());
        let mut all_grads: Vec<Array2<f64>> =
            Vec::with_capacity(grads.log_encoder.len() + grads.knowledge_encoder.len() + 4);
        for (_, t) in encoders.log_encoder.tensors_mut() {
            params.push(t);
        }
        all_grads.extend(grads.log_encoder);
        for (_, t) in encoders.knowledge_encoder.tensors_mut() {
            params.push(t);
        }
        all_grads.extend(grads.knowledge_encoder);
        for (_, t) in kpm.tensors_mut() {
            params.push(t);
        }
        all_grads.extend(grads.kpm);

        adam.step(&mut params, &all_grads, schedule.at(step), config.weight_decay);
        if params
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
        {
            return Err(PretrainError::Divergence { step });
        }
    }

    let r#final = joint_loss(&eval_batch, &encoders, &kpm, config.temperature)?;
    Ok(TrainOutcome {
        encoders,
        kpm,
        vocab,
        dims,
        history,
        initial,
        r#final,
    })
}

/// Serializes the loss history as `step,tp,sa,joint` CSV.
pub fn history_to_csv(history: &[StepLoss]) -> String {
    let mut out = String::from("step,tp,sa,joint\n");
    for entry in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            entry.step, entry.tp, entry.sa, entry.joint
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LogTemplate, Strategy};
    use ndarray::array;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn masking_counts_follow_the_rounding_rule() {
        // 10 maskable tokens at ratio 0.15 -> round(1.5) = 2
        let mut ids = vec![CLS_ID];
        ids.extend(5..15);
        ids.push(SEP_ID);
        let (masked, plan) = mask_tokens(&ids, 0.15, &mut rng(1)).unwrap();
        assert_eq!(plan.positions.len(), 2);
        assert_eq!(masked.iter().filter(|&&id| id == MASK_ID).count(), 2);
    }

    #[test]
    fn single_maskable_token_is_masked() {
        let ids = vec![CLS_ID, 7, SEP_ID, PAD_ID];
        let (masked, plan) = mask_tokens(&ids, 0.15, &mut rng(2)).unwrap();
        assert_eq!(plan.positions, vec![1]);
        assert_eq!(plan.targets, vec![7]);
        assert_eq!(masked[1], MASK_ID);
    }

    #[test]
    fn specials_are_never_masked() {
        let ids = vec![CLS_ID, 5, 6, 7, 8, SEP_ID, PAD_ID, PAD_ID];
        for seed in 0..50 {
            let (masked, plan) = mask_tokens(&ids, 0.5, &mut rng(seed)).unwrap();
            assert_eq!(masked[0], CLS_ID);
            assert_eq!(masked[5], SEP_ID);
            assert_eq!(masked[6], PAD_ID);
            for &p in &plan.positions {
                assert!((1..=4).contains(&p));
            }
        }
    }

    #[test]
    fn masking_is_deterministic_per_seed() {
        let ids = vec![CLS_ID, 5, 6, 7, 8, 9, SEP_ID];
        let a = mask_tokens(&ids, 0.3, &mut rng(9)).unwrap();
        let b = mask_tokens(&ids, 0.3, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nothing_to_mask_is_reported() {
        let ids = vec![CLS_ID, SEP_ID, PAD_ID];
        assert!(matches!(
            mask_tokens(&ids, 0.15, &mut rng(1)),
            Err(PretrainError::NothingToMask)
        ));
    }

    #[test]
    fn kpm_single_key_forces_full_attention() {
        let params = KpmParams {
            w_q: array![[1.0]],
            w_k: array![[1.0]],
            w_v: array![[1.0]],
            w_f: Array2::zeros((5, 2)),
        };
        let (alpha, pooled) = kpm_attend(&array![2.0], &array![[3.0]], &params).unwrap();
        assert_eq!(alpha.to_vec(), vec![1.0]);
        assert_eq!(pooled.to_vec(), vec![3.0]);
    }

    #[test]
    fn kpm_identical_keys_split_attention_evenly() {
        let params = KpmParams {
            w_q: array![[1.0, 0.0], [0.0, 1.0]],
            w_k: array![[1.0, 0.0], [0.0, 1.0]],
            w_v: array![[1.0, 0.0], [0.0, 1.0]],
            w_f: Array2::zeros((5, 4)),
        };
        let k = array![[0.5, -1.0], [0.5, -1.0]];
        let (alpha, pooled) = kpm_attend(&array![1.0, 2.0], &k, &params).unwrap();
        assert!((alpha[0] - 0.5).abs() < 1e-15);
        assert!((alpha[1] - 0.5).abs() < 1e-15);
        assert!((pooled[0] - 0.5).abs() < 1e-15);
        assert!((pooled[1] - (-1.0)).abs() < 1e-15);
    }

    #[test]
    fn kpm_hand_computed_softmax() {
        // d=1, identity weights, l=[1], k=[[0],[ln 2]]:
        // scores = [0, ln 2], softmax = [1/3, 2/3], pooled = 2 ln2 / 3
        let params = KpmParams {
            w_q: array![[1.0]],
            w_k: array![[1.0]],
            w_v: array![[1.0]],
            w_f: Array2::zeros((5, 2)),
        };
        let ln2 = std::f64::consts::LN_2;
        let (alpha, pooled) = kpm_attend(&array![1.0], &array![[0.0], [ln2]], &params).unwrap();
        assert!((alpha[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((alpha[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pooled[0] - 2.0 * ln2 / 3.0).abs() < 1e-12);
        assert!((pooled[0] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn kpm_rejects_empty_knowledge() {
        let params = KpmParams::init(0, 2, 5);
        let empty = Array2::zeros((0, 2));
        assert!(matches!(
            kpm_attend(&array![1.0, 2.0], &empty, &params),
            Err(PretrainError::EmptyKnowledge)
        ));
    }

    #[test]
    fn kpm_alpha_is_a_probability_vector() {
        let mut r = rng(4);
        for _ in 0..100 {
            let d = r.gen_range(1..=6);
            let m = r.gen_range(1..=7);
            let params = KpmParams::init_with_scale(r.gen(), d, 5, 0.5);
            let l = Array1::from_shape_fn(d, |_| r.gen_range(-2.0..2.0));
            let k = Array2::from_shape_fn((m, d), |_| r.gen_range(-2.0..2.0));
            let (alpha, _) = kpm_attend(&l, &k, &params).unwrap();
            assert!(alpha.iter().all(|&a| a >= 0.0));
            assert!((alpha.sum() - 1.0).abs() < 1e-12);
        }
    }

    fn toy_setup(seed: u64, n_pairs: usize) -> (Vocab, BiEncoder, KpmParams, PretrainBatch) {
        let texts: Vec<(String, String)> = (0..n_pairs)
            .map(|i| {
                (
                    format!("link {} down on port", i),
                    format!("interface {} lost its carrier signal", i),
                )
            })
            .collect();
        let refs: Vec<(&str, &str)> = texts
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let vocab = Vocab::build(refs.iter().flat_map(|(a, b)| [*a, *b]));
        let dims = EncoderDims {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 12,
            ff_mult: 2,
        };
        let encoders = BiEncoder::init(seed, dims).unwrap();
        let kpm = KpmParams::init(seed + 1, dims.d_model, dims.vocab_size);
        let batch =
            PretrainBatch::from_texts(&refs, &vocab, 12, 0.15, &mut rng(seed + 2)).unwrap();
        (vocab, encoders, kpm, batch)
    }

    #[test]
    fn tp_equals_ln_v_under_uniform_logits() {
        let (vocab, encoders, mut kpm, batch) = toy_setup(5, 3);
        kpm.w_f.fill(0.0);
        let loss = tp_loss(&batch, &encoders, &kpm).unwrap();
        assert!((loss - (vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn tp_approaches_zero_on_saturated_target_logits() {
        let (_, encoders, mut kpm, batch) = toy_setup(6, 1);
        kpm.w_f.fill(0.0);
        let uniform = tp_loss(&batch, &encoders, &kpm).unwrap();
        assert!(uniform > 0.0);
        // saturated logits on the target drive the loss to zero
        let mut graph = Graph::new();
        let mut logits = Array2::zeros((1, 6));
        logits[[0, 2]] = 50.0;
        let l = graph.leaf(logits);
        let loss = graph.cross_entropy_rows(l, vec![2]);
        assert!(graph.scalar(loss) < 1e-20);
    }

    #[test]
    fn tp_matches_straight_line_recomputation() {
        // Independent recomputation: encode, attend, concat, softmax and
        // cross-entropy composed step by step outside the graph.
        let (_, encoders, kpm, batch) = toy_setup(7, 2);
        let expected = {
            let mut total = 0.0;
            let mut count = 0usize;
            for pair in &batch.pairs {
                let masked = pair.masked_log_ids();
                let log_seq = crate::encoder::encode(&encoders.log_encoder, &masked).unwrap();
                let know_seq =
                    crate::encoder::encode(&encoders.knowledge_encoder, &pair.know_ids).unwrap();
                let know_idx = non_pad_indices(&pair.know_ids);
                let mut know_reps = Array2::zeros((know_idx.len(), 8));
                for (i, &idx) in know_idx.iter().enumerate() {
                    know_reps.row_mut(i).assign(&know_seq.token_reps.row(idx));
                }
                for (&p, &t) in pair.plan.positions.iter().zip(&pair.plan.targets) {
                    let l_i = log_seq.token_reps.row(p).to_owned();
                    let (_, pooled) = kpm_attend(&l_i, &know_reps, &kpm).unwrap();
                    let mut features = Array1::zeros(16);
                    for i in 0..8 {
                        features[i] = l_i[i];
                        features[8 + i] = pooled[i];
                    }
                    let logits = kpm.w_f.dot(&features);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.mapv(|z| (z - max).exp()).sum().ln();
                    total += lse - logits[t];
                    count += 1;
                }
            }
            total / count as f64
        };
        let actual = tp_loss(&batch, &encoders, &kpm).unwrap();
        assert!(
            (actual - expected).abs() < 1e-12,
            "tp {actual} vs oracle {expected}"
        );
    }

    #[test]
    fn sa_is_zero_for_single_pair() {
        let (_, encoders, _, batch) = toy_setup(8, 1);
        let loss = sa_loss(&batch, &encoders, 0.05).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn sa_equals_ln_n_for_identical_cls() {
        for n in [2, 4, 8] {
            let cls = Array2::from_shape_fn((n, 4), |(_, c)| 0.3 + c as f64);
            let loss = sa_loss_from_cls(&cls, &cls, 0.05).unwrap();
            assert!(
                (loss - (n as f64).ln()).abs() < 1e-9,
                "n={n}: {loss} vs {}",
                (n as f64).ln()
            );
        }
    }

    #[test]
    fn sa_is_cosine_scale_invariant() {
        let mut r = rng(11);
        let u = Array2::from_shape_fn((4, 6), |_| r.gen_range(-1.0..1.0));
        let v = Array2::from_shape_fn((4, 6), |_| r.gen_range(-1.0..1.0));
        let base = sa_loss_from_cls(&u, &v, 0.05).unwrap();
        let scaled = sa_loss_from_cls(&(&u * 3.7), &(&v * 3.7), 0.05).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn sa_hand_formula_for_two_pairs() {
        // cos(pos)=1, cos(neg)=0, tau=0.05:
        // per-row loss = -ln(e^20 / (e^20 + e^0)), identical rows
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let v = array![[2.0, 0.0], [0.0, 0.5]];
        let loss = sa_loss_from_cls(&u, &v, 0.05).unwrap();
        let f_pos = (1.0f64 / 0.05).exp();
        let f_neg = (0.0f64 / 0.05).exp();
        let expected = -(f_pos / (f_pos + f_neg)).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn sa_detects_degenerate_embeddings() {
        let u = array![[0.0, 0.0], [1.0, 0.0]];
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            sa_loss_from_cls(&u, &v, 0.05),
            Err(PretrainError::DegenerateEmbedding(0))
        ));
    }

    #[test]
    fn joint_is_exactly_tp_plus_sa() {
        let (_, encoders, kpm, batch) = toy_setup(9, 3);
        let tp = tp_loss(&batch, &encoders, &kpm).unwrap();
        let sa = sa_loss(&batch, &encoders, 0.05).unwrap();
        let joint = joint_loss(&batch, &encoders, &kpm, 0.05).unwrap();
        assert!((joint.tp - tp).abs() < 1e-12);
        assert!((joint.sa - sa).abs() < 1e-12);
        assert!((joint.joint - (tp + sa)).abs() < 1e-12);
    }

    #[test]
    fn joint_equals_tp_when_sa_vanishes() {
        // N = 1 batch: the alignment term is exactly zero
        let (_, encoders, kpm, batch) = toy_setup(12, 1);
        let tp = tp_loss(&batch, &encoders, &kpm).unwrap();
        let joint = joint_loss(&batch, &encoders, &kpm, 0.05).unwrap();
        assert_eq!(joint.sa, 0.0);
        assert_eq!(joint.joint, tp);
    }

    #[test]
    fn cross_entropy_strictly_decreases_as_target_logit_grows() {
        let mut previous = f64::INFINITY;
        for boost in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut graph = Graph::new();
            let mut logits = Array2::from_elem((1, 6), 0.3);
            logits[[0, 2]] += boost;
            let l = graph.leaf(logits);
            let loss = graph.cross_entropy_rows(l, vec![2]);
            let value = graph.scalar(loss);
            assert!(value < previous, "loss did not drop at boost {boost}");
            assert!(value >= 0.0);
            previous = value;
        }
    }

    #[test]
    fn joint_gradients_are_sums_of_component_gradients() {
        let (_, encoders, kpm, batch) = toy_setup(10, 2);
        let (_, tp_grads) = tp_loss_with_grads(&batch, &encoders, &kpm).unwrap();
        let (_, sa_grads) = sa_loss_with_grads(&batch, &encoders, &kpm, 0.25).unwrap();
        let (_, joint_grads) = joint_loss_with_grads(&batch, &encoders, &kpm, 0.25).unwrap();
        for ((tp_g, sa_g), joint_g) in tp_grads
            .log_encoder
            .iter()
            .zip(&sa_grads.log_encoder)
            .zip(&joint_grads.log_encoder)
        {
            let sum = tp_g + sa_g;
            let diff = (&sum - joint_g).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
        for (sa_g, _) in sa_grads.kpm.iter().zip(&tp_grads.kpm) {
            assert!(sa_g.iter().all(|&v| v == 0.0));
        }
    }

    fn toy_corpus(n: usize) -> Vec<KnowledgePair> {
        (0..n)
            .map(|i| KnowledgePair {
                template: LogTemplate::from_text(format!("service unit{i} restarted after crash")),
                knowledge_text: format!(
                    "unit{i} restarted because its process crashed; check the core dump"
                ),
                strategy: Strategy::Mec,
                epochs_used: 1,
                passed: true,
                trace_ref: None,
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let corpus = toy_corpus(4);
        let config = PretrainConfig {
            learning_rate: 0.0,
            steps: 5,
            batch_size: 2,
            d_model: 8,
            n_layers: 1,
            max_len: 16,
            ..PretrainConfig::default()
        };
        let outcome = train(&corpus, &config).unwrap();
        let fresh = BiEncoder::init(config.seed, outcome.dims).unwrap();
        assert_eq!(outcome.encoders.log_encoder, fresh.log_encoder);
        assert_eq!(outcome.encoders.knowledge_encoder, fresh.knowledge_encoder);
        assert_eq!(outcome.initial.joint, outcome.r#final.joint);
        assert!(outcome.history.iter().all(|h| h.joint.is_finite() && h.joint > 0.0));
    }

    #[test]
    fn same_seed_reproduces_the_loss_history() {
        let corpus = toy_corpus(6);
        let config = PretrainConfig {
            steps: 8,
            batch_size: 3,
            d_model: 8,
            n_layers: 1,
            max_len: 16,
            seed: 42,
            ..PretrainConfig::default()
        };
        let a = train(&corpus, &config).unwrap();
        let b = train(&corpus, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.encoders.log_encoder, b.encoders.log_encoder);
    }

    #[test]
    fn training_divergence_is_reported_not_propagated_as_nan() {
        // absurd learning rate forces NaN within a few steps
        let corpus = toy_corpus(4);
        let config = PretrainConfig {
            learning_rate: 1e18,
            steps: 50,
            batch_size: 2,
            d_model: 8,
            n_layers: 1,
            max_len: 16,
            warmup_steps: 0,
            ..PretrainConfig::default()
        };
        match train(&corpus, &config) {
            Err(PretrainError::Divergence { .. }) => {}
            Ok(outcome) => {
                assert!(outcome.history.iter().all(|h| h.joint.is_finite()));
            }
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn short_training_lowers_the_corpus_loss() {
        let corpus = toy_corpus(8);
        let config = PretrainConfig {
            steps: 30,
            batch_size: 4,
            d_model: 8,
            n_layers: 1,
            max_len: 16,
            warmup_steps: 5,
            ..PretrainConfig::default()
        };
        let outcome = train(&corpus, &config).unwrap();
        assert!(
            outcome.r#final.joint < outcome.initial.joint,
            "{} -> {}",
            outcome.initial.joint,
            outcome.r#final.joint
        );
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let csv = history_to_csv(&[StepLoss {
            step: 0,
            tp: 1.5,
            sa: 0.5,
            joint: 2.0,
        }]);
        assert!(csv.starts_with("step,tp,sa,joint\n"));
        assert!(csv.contains("0,1.5,0.5,2"));
    }
}
