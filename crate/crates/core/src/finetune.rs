//! Task heads and training/inference runners for the downstream tasks,
//! consuming the pre-trained log encoder as backbone. Only the log encoder
//! and the head are updated; the knowledge encoder plays no part here.
//!
//! Single-input tasks read the CLS vector; pair tasks follow the
//! sentence-pair recipe `[u ; v ; |u - v|]` over the two CLS vectors.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TaskDataset, TaskItem, TaskKind};
use crate::encoder::{
    encode_graph, random_normal, tokenize, EncoderError, EncoderParams, EncoderVars, Graph, VarId,
    Vocab,
};
use crate::pretrain::optim::Adam;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Grad(#[from] crate::encoder::GradError),
}

/// Hyperparameters for one fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub multi_label_threshold: f64,
    pub batch_size: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 20,
            learning_rate: 1e-3,
            seed: 0,
            multi_label_threshold: 0.5,
            batch_size: 8,
        }
    }
}

impl FineTuneConfig {
    /// Single-input task default: 20 epochs.
    pub fn single_task() -> Self {
        FineTuneConfig::default()
    }

    /// Pair task default: 10 epochs.
    pub fn pair_task() -> Self {
        FineTuneConfig {
            epochs: 10,
            ..FineTuneConfig::default()
        }
    }
}

/// One-hidden-layer MLP head over the CLS vector: d -> d -> |labels|.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleHead {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// One-hidden-layer MLP head over pair features: 3d -> d -> 2.
/// Output index 1 is the positive class; its logit doubles as the ranking
/// score.
#[derive(Debug, Clone, PartialEq)]
pub struct PairHead {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

fn init_head(seed: u64, in_dim: usize, hidden: usize, out_dim: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        random_normal(&mut rng, in_dim, hidden, 0.02),
        Array2::zeros((1, hidden)),
        random_normal(&mut rng, hidden, out_dim, 0.02),
        Array2::zeros((1, out_dim)),
    )
}

impl SingleHead {
    pub fn init(seed: u64, d_model: usize, n_labels: usize) -> Self {
        let (w1, b1, w2, b2) = init_head(seed, d_model, d_model, n_labels);
        SingleHead { w1, b1, w2, b2 }
    }

    pub fn n_labels(&self) -> usize {
        self.w2.ncols()
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

impl PairHead {
    pub fn init(seed: u64, d_model: usize) -> Self {
        let (w1, b1, w2, b2) = init_head(seed, 3 * d_model, d_model, 2);
        PairHead { w1, b1, w2, b2 }
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

/// `[u ; v ; |u - v|]` with componentwise absolute difference.
pub fn pair_features(u: &Array1<f64>, v: &Array1<f64>) -> Result<Array1<f64>, FinetuneError> {
    if u.len() != v.len() {
        return Err(FinetuneError::Shape(format!(
            "pair features need equal dims, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let d = u.len();
    let mut out = Array1::zeros(3 * d);
    for i in 0..d {
        out[i] = u[i];
        out[d + i] = v[i];
        out[2 * d + i] = (u[i] - v[i]).abs();
    }
    Ok(out)
}

struct HeadVars {
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
}

impl HeadVars {
    fn insert(graph: &mut Graph, tensors: &[(String, &Array2<f64>)]) -> Self {
        HeadVars {
            w1: graph.leaf(tensors[0].1.clone()),
            b1: graph.leaf(tensors[1].1.clone()),
            w2: graph.leaf(tensors[2].1.clone()),
            b2: graph.leaf(tensors[3].1.clone()),
        }
    }

    fn logits(&self, graph: &mut Graph, features: VarId) -> VarId {
        let hidden = graph.matmul(features, self.w1);
        let hidden = graph.add_row_vec(hidden, self.b1);
        let hidden = graph.gelu(hidden);
        let logits = graph.matmul(hidden, self.w2);
        graph.add_row_vec(logits, self.b2)
    }

    fn grads(&self, graph: &Graph) -> Vec<Array2<f64>> {
        [self.w1, self.b1, self.w2, self.b2]
            .iter()
            .map(|&id| graph.grad_or_zero(id))
            .collect()
    }
}

fn cls_rows(graph: &mut Graph, vars: &EncoderVars, ids_batch: &[Vec<usize>]) -> VarId {
    let rows: Vec<VarId> = ids_batch
        .iter()
        .map(|ids| {
            let built = encode_graph(graph, vars, ids);
            graph.gather_rows(built.output, vec![0])
        })
        .collect();
    graph.concat_rows(&rows)
}

/// Gradients of a fine-tune loss, backbone tensors then head tensors.
pub struct FinetuneGrads {
    pub backbone: Vec<Array2<f64>>,
    pub head: Vec<Array2<f64>>,
}

/// Cross-entropy loss of the single-input head over a tokenized batch.
pub fn single_loss(
    ids_batch: &[Vec<usize>],
    labels: &[usize],
    backbone: &EncoderParams,
    head: &SingleHead,
) -> Result<f64, FinetuneError> {
    let (graph, _, _, loss) = single_loss_graph(ids_batch, labels, backbone, head)?;
    Ok(graph.scalar(loss))
}

fn single_loss_graph(
    ids_batch: &[Vec<usize>],
    labels: &[usize],
    backbone: &EncoderParams,
    head: &SingleHead,
) -> Result<(Graph, EncoderVars, HeadVars, VarId), FinetuneError> {
    if ids_batch.is_empty() {
        return Err(FinetuneError::Data("empty batch".into()));
    }
    let mut graph = Graph::new();
    let enc_vars = EncoderVars::insert(&mut graph, backbone);
    let head_vars = HeadVars::insert(&mut graph, &head.tensors());
    let cls = cls_rows(&mut graph, &enc_vars, ids_batch);
    let logits = head_vars.logits(&mut graph, cls);
    let loss = graph.cross_entropy_rows(logits, labels.to_vec());
    Ok((graph, enc_vars, head_vars, loss))
}

pub fn single_loss_with_grads(
    ids_batch: &[Vec<usize>],
    labels: &[usize],
    backbone: &EncoderParams,
    head: &SingleHead,
) -> Result<(f64, FinetuneGrads), FinetuneError> {
    let (mut graph, enc_vars, head_vars, loss) =
        single_loss_graph(ids_batch, labels, backbone, head)?;
    let value = graph.scalar(loss);
    graph.backward(loss)?;
    Ok((
        value,
        FinetuneGrads {
            backbone: enc_vars.grads(&graph),
            head: head_vars.grads(&graph),
        },
    ))
}

/// Cross-entropy loss of the pair head over tokenized text pairs.
pub fn pair_loss(
    a_batch: &[Vec<usize>],
    b_batch: &[Vec<usize>],
    labels: &[bool],
    backbone: &EncoderParams,
    head: &PairHead,
) -> Result<f64, FinetuneError> {
    let (graph, _, _, loss) = pair_loss_graph(a_batch, b_batch, labels, backbone, head)?;
    Ok(graph.scalar(loss))
}

fn pair_loss_graph(
    a_batch: &[Vec<usize>],
    b_batch: &[Vec<usize>],
    labels: &[bool],
    backbone: &EncoderParams,
    head: &PairHead,
) -> Result<(Graph, EncoderVars, HeadVars, VarId), FinetuneError> {
    if a_batch.is_empty() || a_batch.len() != b_batch.len() {
        return Err(FinetuneError::Data("bad pair batch".into()));
    }
    let mut graph = Graph::new();
    let enc_vars = EncoderVars::insert(&mut graph, backbone);
    let head_vars = HeadVars::insert(&mut graph, &head.tensors());
    let u = cls_rows(&mut graph, &enc_vars, a_batch);
    let v = cls_rows(&mut graph, &enc_vars, b_batch);
    let features = pair_features_graph(&mut graph, u, v);
    let logits = head_vars.logits(&mut graph, features);
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let loss = graph.cross_entropy_rows(logits, targets);
    Ok((graph, enc_vars, head_vars, loss))
}

fn pair_features_graph(graph: &mut Graph, u: VarId, v: VarId) -> VarId {
    let diff = graph.sub(u, v);
    let abs_diff = graph.abs(diff);
    graph.concat_cols(&[u, v, abs_diff])
}

pub fn pair_loss_with_grads(
    a_batch: &[Vec<usize>],
    b_batch: &[Vec<usize>],
    labels: &[bool],
    backbone: &EncoderParams,
    head: &PairHead,
) -> Result<(f64, FinetuneGrads), FinetuneError> {
    let (mut graph, enc_vars, head_vars, loss) =
        pair_loss_graph(a_batch, b_batch, labels, backbone, head)?;
    let value = graph.scalar(loss);
    graph.backward(loss)?;
    Ok((
        value,
        FinetuneGrads {
            backbone: enc_vars.grads(&graph),
            head: head_vars.grads(&graph),
        },
    ))
}

fn adam_over(backbone: &EncoderParams, head_tensors: &[(String, &Array2<f64>)]) -> Adam {
    let shapes: Vec<(usize, usize)> = backbone
        .tensors()
        .iter()
        .map(|(_, t)| t.dim())
        .chain(head_tensors.iter().map(|(_, t)| t.dim()))
        .collect();
    Adam::new(&shapes)
}

fn apply_step(
    adam: &mut Adam,
    backbone: &mut EncoderParams,
    head_tensors: Vec<&mut Array2<f64>>,
    grads: &FinetuneGrads,
    lr: f64,
) {
    let mut params: Vec<&mut Array2<f64>> = Vec::new();
    for (_, t) in backbone.tensors_mut() {
        params.push(t);
    }
    params.extend(head_tensors);
    let mut all_grads = grads.backbone.clone();
    all_grads.extend(grads.head.iter().cloned());
    adam.step(&mut params, &all_grads, lr, 0.0);
}

fn label_index(label_space: &[String], label: &str) -> Result<usize, FinetuneError> {
    label_space
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| FinetuneError::Data(format!("label `{label}` not in label space")))
}

fn batched_shuffled(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Ranked label indices by descending logit, ties broken by index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Output of a single-input task run.
pub struct SingleTaskOutcome {
    pub head: SingleHead,
    /// Predicted label index per eval item.
    pub predictions: Vec<usize>,
    /// Full label ranking per eval item (for Recall@K-style metrics).
    pub rankings: Vec<Vec<usize>>,
    pub train_accuracy: f64,
}

/// Trains the single-input head (cross-entropy on the train split) and
/// predicts by argmax on the eval split. Deterministic per seed.
pub fn run_single_task(
    train: &TaskDataset,
    eval: &TaskDataset,
    backbone: &mut EncoderParams,
    vocab: &Vocab,
    config: &FineTuneConfig,
) -> Result<SingleTaskOutcome, FinetuneError> {
    if train.kind != TaskKind::SingleLabel || eval.kind != TaskKind::SingleLabel {
        return Err(FinetuneError::Data("expected single_label datasets".into()));
    }
    train.validate().map_err(|e| FinetuneError::Data(e.to_string()))?;
    if train.items.is_empty() {
        return Err(FinetuneError::Data("empty train split".into()));
    }
    let max_len = backbone.dims.max_len;
    let mut ids = Vec::with_capacity(train.items.len());
    let mut labels = Vec::with_capacity(train.items.len());
    for item in &train.items {
        match item {
            TaskItem::Single { text, label } => {
                ids.push(tokenize(text, vocab, max_len));
                labels.push(label_index(&train.label_space, label)?);
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }

    let mut head = SingleHead::init(config.seed, backbone.dims.d_model, train.label_space.len());
    let mut adam = adam_over(backbone, &head.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for _ in 0..config.epochs {
        for batch in batched_shuffled(ids.len(), config.batch_size, &mut rng) {
            let batch_ids: Vec<Vec<usize>> = batch.iter().map(|&i| ids[i].clone()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grads) = single_loss_with_grads(&batch_ids, &batch_labels, backbone, &head)?;
            let head_tensors: Vec<&mut Array2<f64>> =
                head.tensors_mut().into_iter().map(|(_, t)| t).collect();
            apply_step(&mut adam, backbone, head_tensors, &grads, config.learning_rate);
        }
    }

    let train_accuracy = {
        let mut hits = 0usize;
        for (item_ids, &label) in ids.iter().zip(&labels) {
            let scores = single_scores(item_ids, backbone, &head)?;
            if rank_desc(&scores)[0] == label {
                hits += 1;
            }
        }
        hits as f64 / ids.len() as f64
    };

    let mut predictions = Vec::with_capacity(eval.items.len());
    let mut rankings = Vec::with_capacity(eval.items.len());
    for item in &eval.items {
        match item {
            TaskItem::Single { text, .. } => {
                let scores = single_scores(&tokenize(text, vocab, max_len), backbone, &head)?;
                let ranking = rank_desc(&scores);
                predictions.push(ranking[0]);
                rankings.push(ranking);
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }
    Ok(SingleTaskOutcome {
        head,
        predictions,
        rankings,
        train_accuracy,
    })
}

/// Per-label logits of one item under the single head.
pub fn single_scores(
    ids: &[usize],
    backbone: &EncoderParams,
    head: &SingleHead,
) -> Result<Vec<f64>, FinetuneError> {
    let mut graph = Graph::new();
    let enc_vars = EncoderVars::insert(&mut graph, backbone);
    let head_vars = HeadVars::insert(&mut graph, &head.tensors());
    let cls = cls_rows(&mut graph, &enc_vars, std::slice::from_ref(&ids.to_vec()));
    let logits = head_vars.logits(&mut graph, cls);
    Ok(graph.value(logits).row(0).to_vec())
}

/// Output of a pair task run.
pub struct PairTaskOutcome {
    pub head: PairHead,
    pub predictions: Vec<bool>,
    pub train_accuracy: f64,
}

/// Trains the pair head on boolean-labelled text pairs and predicts on the
/// eval split.
pub fn run_pair_task(
    train: &TaskDataset,
    eval: &TaskDataset,
    backbone: &mut EncoderParams,
    vocab: &Vocab,
    config: &FineTuneConfig,
) -> Result<PairTaskOutcome, FinetuneError> {
    if train.kind != TaskKind::Pair || eval.kind != TaskKind::Pair {
        return Err(FinetuneError::Data("expected pair datasets".into()));
    }
    if train.items.is_empty() {
        return Err(FinetuneError::Data("empty train split".into()));
    }
    let max_len = backbone.dims.max_len;
    let mut a_ids = Vec::new();
    let mut b_ids = Vec::new();
    let mut labels = Vec::new();
    for item in &train.items {
        match item {
            TaskItem::Pair { text_a, text_b, label } => {
                a_ids.push(tokenize(text_a, vocab, max_len));
                b_ids.push(tokenize(text_b, vocab, max_len));
                labels.push(*label);
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }

    let mut head = PairHead::init(config.seed, backbone.dims.d_model);
    let mut adam = adam_over(backbone, &head.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for _ in 0..config.epochs {
        for batch in batched_shuffled(a_ids.len(), config.batch_size, &mut rng) {
            let batch_a: Vec<Vec<usize>> = batch.iter().map(|&i| a_ids[i].clone()).collect();
            let batch_b: Vec<Vec<usize>> = batch.iter().map(|&i| b_ids[i].clone()).collect();
            let batch_labels: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grads) =
                pair_loss_with_grads(&batch_a, &batch_b, &batch_labels, backbone, &head)?;
            let head_tensors: Vec<&mut Array2<f64>> =
                head.tensors_mut().into_iter().map(|(_, t)| t).collect();
            apply_step(&mut adam, backbone, head_tensors, &grads, config.learning_rate);
        }
    }

    let train_accuracy = {
        let mut hits = 0usize;
        for ((a, b), &label) in a_ids.iter().zip(&b_ids).zip(&labels) {
            let predicted = pair_score(a, b, backbone, &head)? > 0.0;
            if predicted == label {
                hits += 1;
            }
        }
        hits as f64 / a_ids.len() as f64
    };

    let mut predictions = Vec::with_capacity(eval.items.len());
    for item in &eval.items {
        match item {
            TaskItem::Pair { text_a, text_b, .. } => {
                let a = tokenize(text_a, vocab, max_len);
                let b = tokenize(text_b, vocab, max_len);
                predictions.push(pair_score(&a, &b, backbone, &head)? > 0.0);
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }
    Ok(PairTaskOutcome {
        head,
        predictions,
        train_accuracy,
    })
}

/// Pair score: positive-class logit minus negative-class logit. Positive
/// means the pair is predicted to match.
pub fn pair_score(
    a_ids: &[usize],
    b_ids: &[usize],
    backbone: &EncoderParams,
    head: &PairHead,
) -> Result<f64, FinetuneError> {
    let mut graph = Graph::new();
    let enc_vars = EncoderVars::insert(&mut graph, backbone);
    let head_vars = HeadVars::insert(&mut graph, &head.tensors());
    let u = cls_rows(&mut graph, &enc_vars, std::slice::from_ref(&a_ids.to_vec()));
    let v = cls_rows(&mut graph, &enc_vars, std::slice::from_ref(&b_ids.to_vec()));
    let features = pair_features_graph(&mut graph, u, v);
    let logits = head_vars.logits(&mut graph, features);
    let row = graph.value(logits).row(0);
    Ok(row[1] - row[0])
}

/// Scores every candidate against the log with the pair head and returns
/// candidate indices by descending score; ties keep original order.
pub fn rank_candidates(
    log_text: &str,
    candidates: &[String],
    backbone: &EncoderParams,
    head: &PairHead,
    vocab: &Vocab,
) -> Result<Vec<usize>, FinetuneError> {
    let max_len = backbone.dims.max_len;
    let log_ids = tokenize(log_text, vocab, max_len);
    let mut scores = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let cand_ids = tokenize(candidate, vocab, max_len);
        scores.push(pair_score(&log_ids, &cand_ids, backbone, head)?);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort keeps the original index order on ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(order)
}

/// Output of a ranking task run.
pub struct RankingTaskOutcome {
    pub head: PairHead,
    /// Per eval item: candidate indices in predicted priority order.
    pub orderings: Vec<Vec<usize>>,
}

/// Trains the pair head on (log, candidate) pairs derived from the train
/// split (gold candidate positive, the rest negative), then ranks every
/// eval item's candidate set.
pub fn run_ranking_task(
    train: &TaskDataset,
    eval: &TaskDataset,
    backbone: &mut EncoderParams,
    vocab: &Vocab,
    config: &FineTuneConfig,
) -> Result<RankingTaskOutcome, FinetuneError> {
    if train.kind != TaskKind::Ranking || eval.kind != TaskKind::Ranking {
        return Err(FinetuneError::Data("expected ranking datasets".into()));
    }
    if train.items.is_empty() {
        return Err(FinetuneError::Data("empty train split".into()));
    }
    let mut derived = TaskDataset {
        kind: TaskKind::Pair,
        label_space: Vec::new(),
        split: train.split,
        items: Vec::new(),
    };
    for item in &train.items {
        match item {
            TaskItem::Ranking { text, candidates, gold } => {
                for (idx, candidate) in candidates.iter().enumerate() {
                    derived.items.push(TaskItem::Pair {
                        text_a: text.clone(),
                        text_b: candidate.clone(),
                        label: idx == *gold,
                    });
                }
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }
    let empty_eval = TaskDataset {
        kind: TaskKind::Pair,
        label_space: Vec::new(),
        split: eval.split,
        items: Vec::new(),
    };
    let outcome = run_pair_task(&derived, &empty_eval, backbone, vocab, config)?;

    let mut orderings = Vec::with_capacity(eval.items.len());
    for item in &eval.items {
        match item {
            TaskItem::Ranking { text, candidates, .. } => {
                orderings.push(rank_candidates(text, candidates, backbone, &outcome.head, vocab)?);
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }
    Ok(RankingTaskOutcome {
        head: outcome.head,
        orderings,
    })
}

/// Output of a multi-label task run.
pub struct MultiLabelOutcome {
    pub head: SingleHead,
    /// Predicted label-index subsets, ascending, never empty.
    pub predictions: Vec<Vec<usize>>,
}

/// Trains a per-label sigmoid head with binary cross-entropy and predicts
/// the labels whose probability clears the threshold; an empty prediction
/// falls back to the top-1 label.
pub fn run_multilabel_task(
    train: &TaskDataset,
    eval: &TaskDataset,
    backbone: &mut EncoderParams,
    vocab: &Vocab,
    config: &FineTuneConfig,
) -> Result<MultiLabelOutcome, FinetuneError> {
    if train.kind != TaskKind::MultiLabel || eval.kind != TaskKind::MultiLabel {
        return Err(FinetuneError::Data("expected multi_label datasets".into()));
    }
    train.validate().map_err(|e| FinetuneError::Data(e.to_string()))?;
    if train.items.is_empty() {
        return Err(FinetuneError::Data("empty train split".into()));
    }
    let max_len = backbone.dims.max_len;
    let n_labels = train.label_space.len();
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    for item in &train.items {
        match item {
            TaskItem::MultiLabel { text, labels } => {
                ids.push(tokenize(text, vocab, max_len));
                let mut row = vec![0.0; n_labels];
                for label in labels {
                    row[label_index(&train.label_space, label)?] = 1.0;
                }
                targets.push(row);
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }

    let mut head = SingleHead::init(config.seed, backbone.dims.d_model, n_labels);
    let mut adam = adam_over(backbone, &head.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for _ in 0..config.epochs {
        for batch in batched_shuffled(ids.len(), config.batch_size, &mut rng) {
            let batch_ids: Vec<Vec<usize>> = batch.iter().map(|&i| ids[i].clone()).collect();
            let target_rows = Array2::from_shape_fn((batch.len(), n_labels), |(r, c)| {
                targets[batch[r]][c]
            });
            let (_, grads) = multilabel_loss_with_grads(&batch_ids, &target_rows, backbone, &head)?;
            let head_tensors: Vec<&mut Array2<f64>> =
                head.tensors_mut().into_iter().map(|(_, t)| t).collect();
            apply_step(&mut adam, backbone, head_tensors, &grads, config.learning_rate);
        }
    }

    let mut predictions = Vec::with_capacity(eval.items.len());
    for item in &eval.items {
        match item {
            TaskItem::MultiLabel { text, .. } => {
                let scores = single_scores(&tokenize(text, vocab, max_len), backbone, &head)?;
                predictions.push(predict_labels(&scores, config.multi_label_threshold));
            }
            other => return Err(FinetuneError::Data(format!("bad item {other:?}"))),
        }
    }
    Ok(MultiLabelOutcome { head, predictions })
}

/// Labels whose sigmoid probability clears the threshold; top-1 fallback
/// keeps the prediction non-empty.
pub fn predict_labels(logits: &[f64], threshold: f64) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..logits.len())
        .filter(|&i| 1.0 / (1.0 + (-logits[i]).exp()) >= threshold)
        .collect();
    if picked.is_empty() && !logits.is_empty() {
        picked.push(rank_desc(logits)[0]);
    }
    picked
}

/// BCE-with-logits loss for the multi-label head.
pub fn multilabel_loss_with_grads(
    ids_batch: &[Vec<usize>],
    targets: &Array2<f64>,
    backbone: &EncoderParams,
    head: &SingleHead,
) -> Result<(f64, FinetuneGrads), FinetuneError> {
    if ids_batch.is_empty() {
        return Err(FinetuneError::Data("empty batch".into()));
    }
    let mut graph = Graph::new();
    let enc_vars = EncoderVars::insert(&mut graph, backbone);
    let head_vars = HeadVars::insert(&mut graph, &head.tensors());
    let cls = cls_rows(&mut graph, &enc_vars, ids_batch);
    let logits = head_vars.logits(&mut graph, cls);
    let loss = graph.bce_with_logits(logits, targets.clone());
    let value = graph.scalar(loss);
    graph.backward(loss)?;
    Ok((
        value,
        FinetuneGrads {
            backbone: enc_vars.grads(&graph),
            head: head_vars.grads(&graph),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use ndarray::array;

    #[test]
    fn pair_features_examples() {
        let out = pair_features(&array![1.0, 2.0], &array![1.0, 2.0]).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 1.0, 2.0, 0.0, 0.0]);

        let out = pair_features(&array![1.0, 2.0], &array![3.0, 1.0]).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn pair_features_abs_block_is_swap_invariant() {
        let u = array![0.5, -1.0, 2.0];
        let v = array![1.5, 0.0, -2.0];
        let uv = pair_features(&u, &v).unwrap();
        let vu = pair_features(&v, &u).unwrap();
        assert_eq!(uv.slice(ndarray::s![6..]), vu.slice(ndarray::s![6..]));
        assert_eq!(uv.slice(ndarray::s![0..3]), vu.slice(ndarray::s![3..6]));
    }

    #[test]
    fn pair_features_rejects_dim_mismatch() {
        assert!(matches!(
            pair_features(&array![1.0], &array![1.0, 2.0]),
            Err(FinetuneError::Shape(_))
        ));
    }

    fn backbone_and_vocab(texts: &[&str]) -> (EncoderParams, Vocab) {
        let vocab = Vocab::build(texts);
        let dims = crate::encoder::EncoderDims {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 12,
            ff_mult: 2,
        };
        (EncoderParams::init(3, dims).unwrap(), vocab)
    }

    fn single_dataset(split: Split) -> TaskDataset {
        // linearly separable two-class toy set: keyword decides the label
        let mut items = Vec::new();
        for i in 0..10 {
            items.push(TaskItem::Single {
                text: format!("disk failure on node{i}"),
                label: "bad".into(),
            });
            items.push(TaskItem::Single {
                text: format!("backup finished on node{i}"),
                label: "ok".into(),
            });
        }
        TaskDataset {
            kind: TaskKind::SingleLabel,
            label_space: vec!["ok".into(), "bad".into()],
            split,
            items,
        }
    }

    #[test]
    fn separable_single_task_overfits() {
        let ds = single_dataset(Split::Train);
        let texts: Vec<&str> = ds.items.iter().map(|i| i.log_text()).collect();
        let (mut backbone, vocab) = backbone_and_vocab(&texts);
        let config = FineTuneConfig {
            epochs: 20,
            ..FineTuneConfig::single_task()
        };
        let outcome = run_single_task(&ds, &ds, &mut backbone, &vocab, &config).unwrap();
        assert!(
            outcome.train_accuracy >= 0.95,
            "accuracy {}",
            outcome.train_accuracy
        );
    }

    #[test]
    fn single_example_is_memorized() {
        let ds = TaskDataset {
            kind: TaskKind::SingleLabel,
            label_space: vec!["a".into(), "b".into()],
            split: Split::Train,
            items: vec![TaskItem::Single {
                text: "kernel panic".into(),
                label: "b".into(),
            }],
        };
        let (mut backbone, vocab) = backbone_and_vocab(&["kernel panic"]);
        let config = FineTuneConfig {
            epochs: 30,
            ..FineTuneConfig::single_task()
        };
        let outcome = run_single_task(&ds, &ds, &mut backbone, &vocab, &config).unwrap();
        assert_eq!(outcome.predictions, vec![1]);
    }

    #[test]
    fn zero_lr_predictions_match_initial_head() {
        let ds = single_dataset(Split::Train);
        let texts: Vec<&str> = ds.items.iter().map(|i| i.log_text()).collect();
        let (mut backbone, vocab) = backbone_and_vocab(&texts);
        let frozen = backbone.clone();
        let config = FineTuneConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..FineTuneConfig::single_task()
        };
        let outcome = run_single_task(&ds, &ds, &mut backbone, &vocab, &config).unwrap();
        assert_eq!(backbone, frozen);

        // predictions from the untouched initial head agree
        let head = SingleHead::init(config.seed, frozen.dims.d_model, 2);
        for (item, &pred) in ds.items.iter().zip(&outcome.predictions) {
            let ids = tokenize(item.log_text(), &vocab, frozen.dims.max_len);
            let scores = single_scores(&ids, &frozen, &head).unwrap();
            assert_eq!(rank_desc(&scores)[0], pred);
        }
    }

    fn pair_dataset() -> TaskDataset {
        let mut items = Vec::new();
        for i in 0..8 {
            items.push(TaskItem::Pair {
                text_a: format!("link down on port{i}"),
                text_b: format!("link down on port{i}"),
                label: true,
            });
            items.push(TaskItem::Pair {
                text_a: format!("link down on port{i}"),
                text_b: format!("temperature alarm cleared zone{i}"),
                label: false,
            });
        }
        TaskDataset {
            kind: TaskKind::Pair,
            label_space: Vec::new(),
            split: Split::Train,
            items,
        }
    }

    #[test]
    fn separable_pair_task_overfits() {
        let ds = pair_dataset();
        let texts: Vec<String> = ds
            .items
            .iter()
            .map(|i| match i {
                TaskItem::Pair { text_a, text_b, .. } => format!("{text_a} {text_b}"),
                _ => unreachable!(),
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let (mut backbone, vocab) = backbone_and_vocab(&refs);
        let config = FineTuneConfig {
            epochs: 20,
            ..FineTuneConfig::pair_task()
        };
        let outcome = run_pair_task(&ds, &ds, &mut backbone, &vocab, &config).unwrap();
        assert!(
            outcome.train_accuracy >= 0.95,
            "accuracy {}",
            outcome.train_accuracy
        );
    }

    #[test]
    fn empty_train_split_is_a_data_error() {
        let ds = TaskDataset {
            kind: TaskKind::Pair,
            label_space: Vec::new(),
            split: Split::Train,
            items: Vec::new(),
        };
        let (mut backbone, vocab) = backbone_and_vocab(&["x"]);
        assert!(matches!(
            run_pair_task(&ds, &ds, &mut backbone, &vocab, &FineTuneConfig::pair_task()),
            Err(FinetuneError::Data(_))
        ));
    }

    #[test]
    fn ranking_is_stable_under_ties() {
        let scores = [0.5, 0.5, 0.5];
        assert_eq!(rank_desc(&scores), vec![0, 1, 2]);
        let scores = [0.1, 0.9, 0.5];
        assert_eq!(rank_desc(&scores), vec![1, 2, 0]);
        let scores = [0.7];
        assert_eq!(rank_desc(&scores), vec![0]);
    }

    #[test]
    fn rank_candidates_returns_permutation() {
        let (backbone, vocab) =
            backbone_and_vocab(&["router dropped neighbor", "cable fault", "cpu high"]);
        let head = PairHead::init(1, backbone.dims.d_model);
        let candidates = vec![
            "cable fault".to_owned(),
            "cpu high".to_owned(),
            "cable fault again".to_owned(),
        ];
        let order =
            rank_candidates("router dropped neighbor", &candidates, &backbone, &head, &vocab)
                .unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn multilabel_threshold_edges() {
        // threshold 0 predicts everything
        assert_eq!(predict_labels(&[-5.0, 3.0, 0.0], 0.0), vec![0, 1, 2]);
        // sigmoid never reaches 1.0, so the top-1 fallback fires
        assert_eq!(predict_labels(&[-5.0, 3.0, 0.0], 1.0), vec![1]);
    }

    #[test]
    fn multilabel_overfits_single_label_data() {
        let ds = TaskDataset {
            kind: TaskKind::MultiLabel,
            label_space: vec!["l0".into(), "l1".into(), "l2".into()],
            split: Split::Train,
            items: (0..6)
                .map(|i| TaskItem::MultiLabel {
                    text: format!("event {i} overload"),
                    labels: vec!["l1".into()],
                })
                .collect(),
        };
        let texts: Vec<&str> = ds.items.iter().map(|i| i.log_text()).collect();
        let (mut backbone, vocab) = backbone_and_vocab(&texts);
        let config = FineTuneConfig {
            epochs: 30,
            ..FineTuneConfig::single_task()
        };
        let outcome = run_multilabel_task(&ds, &ds, &mut backbone, &vocab, &config).unwrap();
        for prediction in &outcome.predictions {
            assert_eq!(prediction, &vec![1]);
        }
    }

    #[test]
    fn ranking_task_learns_lexical_overlap() {
        let items: Vec<TaskItem> = (0..6)
            .map(|i| TaskItem::Ranking {
                text: format!("fan {i} failed"),
                candidates: vec![format!("fan {i} failed cause"), "unrelated text".into()],
                gold: 0,
            })
            .collect();
        let ds = TaskDataset {
            kind: TaskKind::Ranking,
            label_space: Vec::new(),
            split: Split::Train,
            items,
        };
        let texts: Vec<String> = (0..6).map(|i| format!("fan {i} failed cause unrelated text")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let (mut backbone, vocab) = backbone_and_vocab(&refs);
        let config = FineTuneConfig {
            epochs: 10,
            ..FineTuneConfig::pair_task()
        };
        let outcome = run_ranking_task(&ds, &ds, &mut backbone, &vocab, &config).unwrap();
        assert_eq!(outcome.orderings.len(), 6);
        for ordering in &outcome.orderings {
            let mut sorted = ordering.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1]);
        }
    }

    #[test]
    fn finetune_runs_are_deterministic() {
        let ds = single_dataset(Split::Train);
        let texts: Vec<&str> = ds.items.iter().map(|i| i.log_text()).collect();
        let run = || {
            let (mut backbone, vocab) = backbone_and_vocab(&texts);
            let config = FineTuneConfig {
                epochs: 3,
                ..FineTuneConfig::single_task()
            };
            run_single_task(&ds, &ds, &mut backbone, &vocab, &config)
                .unwrap()
                .predictions
        };
        assert_eq!(run(), run());
    }
}
