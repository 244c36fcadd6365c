//! `logken pretrain` and `logken finetune`.

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use logken_core::corpus::{jsonl, TaskDataset, TaskItem, TaskKind};
use logken_core::encoder::checkpoint::{self, Checkpoint};
use logken_core::finetune::{
    run_multilabel_task, run_pair_task, run_ranking_task, run_single_task, FineTuneConfig,
};
use logken_core::pretrain::{self, PretrainConfig};

use crate::util::{require_input, CliError};
use crate::{FinetuneArgs, PretrainArgs, TaskChoice};

fn resolve_pretrain_config(args: &PretrainArgs) -> Result<PretrainConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            require_input(path)?;
            let text = std::fs::read_to_string(path).context("reading config")?;
            toml::from_str(&text).context("parsing config")?
        }
        None => PretrainConfig::default(),
    };
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if args.epochs.is_some() {
        config.epochs = args.epochs;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.temperature {
        config.temperature = v;
    }
    if let Some(v) = args.mask_ratio {
        config.mask_ratio = v;
    }
    if let Some(v) = args.warmup_steps {
        config.warmup_steps = v;
    }
    if let Some(v) = args.max_len {
        config.max_len = v;
    }
    Ok(config)
}

pub fn pretrain(args: PretrainArgs) -> Result<(), CliError> {
    require_input(&args.knowledge)?;
    let corpus = jsonl::load_knowledge(&args.knowledge).context("loading knowledge")?;
    let config = resolve_pretrain_config(&args)?;
    let outcome = pretrain::train(&corpus, &config).context("pre-training")?;

    let mut ckpt = Checkpoint::new(outcome.vocab.clone(), outcome.dims);
    ckpt.insert_encoder(checkpoint::LOG_ENCODER, &outcome.encoders.log_encoder);
    ckpt.insert_encoder(
        checkpoint::KNOWLEDGE_ENCODER,
        &outcome.encoders.knowledge_encoder,
    );
    ckpt.insert_section(
        checkpoint::KPM,
        outcome
            .kpm
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    );
    ckpt.save(&args.output).context("saving checkpoint")?;

    if let Some(history) = &args.history {
        std::fs::write(history, pretrain::history_to_csv(&outcome.history))
            .context("writing history")?;
    }
    println!(
        "pre-trained on {} pairs for {} steps: joint loss {:.4} -> {:.4}",
        corpus.len(),
        outcome.history.len(),
        outcome.initial.joint,
        outcome.r#final.joint
    );
    Ok(())
}

/// One prediction line. `pred` carries the task-shaped prediction; `ranked`
/// is the full label ranking for single-label tasks.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub pred: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranked: Option<Vec<String>>,
}

fn expected_kind(task: TaskChoice) -> TaskKind {
    match task {
        TaskChoice::Ad | TaskChoice::Fi | TaskChoice::Mc => TaskKind::SingleLabel,
        TaskChoice::Fpi => TaskKind::MultiLabel,
        TaskChoice::Ldsm => TaskKind::Pair,
        TaskChoice::Lpcr => TaskKind::Ranking,
    }
}

fn check_kind(ds: &TaskDataset, task: TaskChoice, which: &str) -> Result<(), CliError> {
    let expected = expected_kind(task);
    if ds.kind != expected {
        return Err(CliError::Data(anyhow!(
            "{which} dataset kind {:?} does not match task (expected {:?})",
            ds.kind,
            expected
        )));
    }
    Ok(())
}

pub fn finetune(args: FinetuneArgs) -> Result<(), CliError> {
    require_input(&args.train)?;
    require_input(&args.eval)?;
    require_input(&args.checkpoint)?;
    let train = jsonl::load_dataset(&args.train).context("loading train split")?;
    let eval = jsonl::load_dataset(&args.eval).context("loading eval split")?;
    check_kind(&train, args.task, "train")?;
    check_kind(&eval, args.task, "eval")?;

    let ckpt = Checkpoint::load(&args.checkpoint).context("loading checkpoint")?;
    let mut backbone = ckpt
        .encoder(checkpoint::LOG_ENCODER)
        .context("reading log encoder")?;
    let vocab = ckpt.vocab.clone();

    let mut config = match expected_kind(args.task) {
        TaskKind::Pair | TaskKind::Ranking => FineTuneConfig::pair_task(),
        _ => FineTuneConfig::single_task(),
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    config.seed = args.seed;
    config.multi_label_threshold = args.threshold;

    type HeadTensors = Vec<(String, logken_core::ndarray::Array2<f64>)>;
    let (records, head_tensors): (Vec<PredictionRecord>, HeadTensors) = match args.task {
        TaskChoice::Ad | TaskChoice::Fi | TaskChoice::Mc => {
            let outcome = run_single_task(&train, &eval, &mut backbone, &vocab, &config)
                .context("running single-label task")?;
            println!("train accuracy {:.3}", outcome.train_accuracy);
            let records = outcome
                .predictions
                .iter()
                .zip(&outcome.rankings)
                .enumerate()
                .map(|(id, (&pred, ranking))| PredictionRecord {
                    id,
                    pred: serde_json::Value::String(train.label_space[pred].clone()),
                    ranked: Some(
                        ranking
                            .iter()
                            .map(|&l| train.label_space[l].clone())
                            .collect(),
                    ),
                })
                .collect();
            let tensors = outcome
                .head
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            (records, tensors)
        }
        TaskChoice::Ldsm => {
            let outcome = run_pair_task(&train, &eval, &mut backbone, &vocab, &config)
                .context("running pair task")?;
            println!("train accuracy {:.3}", outcome.train_accuracy);
            let records = outcome
                .predictions
                .iter()
                .enumerate()
                .map(|(id, &pred)| PredictionRecord {
                    id,
                    pred: serde_json::Value::Bool(pred),
                    ranked: None,
                })
                .collect();
            let tensors = outcome
                .head
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            (records, tensors)
        }
        TaskChoice::Lpcr => {
            let outcome = run_ranking_task(&train, &eval, &mut backbone, &vocab, &config)
                .context("running ranking task")?;
            let records = outcome
                .orderings
                .iter()
                .enumerate()
                .map(|(id, ordering)| PredictionRecord {
                    id,
                    pred: serde_json::to_value(ordering).expect("ordering"),
                    ranked: None,
                })
                .collect();
            let tensors = outcome
                .head
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            (records, tensors)
        }
        TaskChoice::Fpi => {
            let outcome = run_multilabel_task(&train, &eval, &mut backbone, &vocab, &config)
                .context("running multi-label task")?;
            let records = outcome
                .predictions
                .iter()
                .enumerate()
                .map(|(id, labels)| {
                    let names: Vec<String> = labels
                        .iter()
                        .map(|&l| train.label_space[l].clone())
                        .collect();
                    PredictionRecord {
                        id,
                        pred: serde_json::to_value(names).expect("labels"),
                        ranked: None,
                    }
                })
                .collect();
            let tensors = outcome
                .head
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            (records, tensors)
        }
    };

    jsonl::save_lines(&args.predictions, &records).context("writing predictions")?;
    println!("wrote {} predictions", records.len());

    if let Some(path) = &args.save_checkpoint {
        let mut out = Checkpoint::new(vocab, backbone.dims);
        out.insert_encoder(checkpoint::LOG_ENCODER, &backbone);
        out.insert_section(checkpoint::HEAD, head_tensors);
        out.save(path).context("saving fine-tuned checkpoint")?;
    }
    Ok(())
}

// Items needed by eval_cmd when reconstructing gold answers.
pub fn gold_single_labels(ds: &TaskDataset) -> Result<Vec<String>, CliError> {
    ds.items
        .iter()
        .map(|item| match item {
            TaskItem::Single { label, .. } => Ok(label.clone()),
            other => Err(CliError::Data(anyhow!("not a single-label item: {other:?}"))),
        })
        .collect()
}
