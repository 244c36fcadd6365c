//! `logken eval`, `logken audit` and `logken report`.


use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use logken_core::corpus::{jsonl, KnowledgePair, TaskItem};
use logken_core::distill::{self, Aspect, ContrastiveExampleSet, RoleCards};
use logken_core::metrics::{
    self, BinaryOutcome, MultiLabelAccuracyMode, RankingOutcome, RecallQuery, ReportEntry,
};

use crate::model_cmd::PredictionRecord;
use crate::util::{build_gateway, require_input, CliError};
use crate::{AuditArgs, EvalArgs, MultiLabelMode, ReportArgs, TaskChoice};

fn label_index(space: &[String], label: &str) -> Result<usize, CliError> {
    space
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| CliError::Data(anyhow!("label `{label}` not in label space")))
}

fn pred_string(record: &PredictionRecord) -> Result<String, CliError> {
    record
        .pred
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| CliError::Data(anyhow!("prediction {} is not a string", record.id)))
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    require_input(&args.gold)?;
    require_input(&args.predictions)?;
    let gold_ds = jsonl::load_dataset(&args.gold).context("loading gold dataset")?;
    let records: Vec<PredictionRecord> =
        jsonl::load_lines(&args.predictions).context("loading predictions")?;
    if records.len() != gold_ds.items.len() {
        return Err(CliError::Data(anyhow!(
            "{} predictions for {} gold items",
            records.len(),
            gold_ds.items.len()
        )));
    }

    let mut entries: Vec<ReportEntry> = Vec::new();
    let mut push = |metric: &str, value: f64| {
        entries.push(ReportEntry {
            metric: metric.to_owned(),
            name: args.name.clone(),
            value,
        });
    };

    match args.task {
        TaskChoice::Ad => {
            let positive = &args.positive_label;
            let gold: Vec<bool> = crate::model_cmd::gold_single_labels(&gold_ds)?
                .iter()
                .map(|l| l == positive)
                .collect();
            let pred: Vec<bool> = records
                .iter()
                .map(|r| Ok(pred_string(r)? == *positive))
                .collect::<Result<_, CliError>>()?;
            let m = metrics::precision_recall_f1(&BinaryOutcome { gold, pred })
                .context("precision/recall/f1")?;
            push("precision", m.precision);
            push("recall", m.recall);
            push("f1", m.f1);
        }
        TaskChoice::Mc => {
            let space = &gold_ds.label_space;
            let gold: Vec<usize> = crate::model_cmd::gold_single_labels(&gold_ds)?
                .iter()
                .map(|l| label_index(space, l))
                .collect::<Result<_, _>>()?;
            let pred: Vec<usize> = records
                .iter()
                .map(|r| label_index(space, &pred_string(r)?))
                .collect::<Result<_, _>>()?;
            push(
                "accuracy",
                metrics::accuracy(&gold, &pred, space.len()).context("accuracy")?,
            );
            push(
                "weighted_f1",
                metrics::weighted_f1(&gold, &pred, space.len()).context("weighted f1")?,
            );
        }
        TaskChoice::Fi => {
            let space = &gold_ds.label_space;
            let queries: Vec<RecallQuery> = gold_ds
                .items
                .iter()
                .zip(&records)
                .map(|(item, record)| {
                    let gold_label = match item {
                        TaskItem::Single { label, .. } => label_index(space, label)?,
                        other => {
                            return Err(CliError::Data(anyhow!("not single-label: {other:?}")))
                        }
                    };
                    let ranked = record
                        .ranked
                        .as_ref()
                        .ok_or_else(|| {
                            CliError::Data(anyhow!("prediction {} has no ranking", record.id))
                        })?
                        .iter()
                        .map(|l| label_index(space, l))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(RecallQuery {
                        gold: vec![gold_label],
                        ranked,
                    })
                })
                .collect::<Result<_, _>>()?;
            push(
                &format!("recall_at_{}", args.k),
                metrics::recall_at_k(&queries, args.k).context("recall@k")?,
            );
        }
        TaskChoice::Ldsm => {
            let gold: Vec<bool> = gold_ds
                .items
                .iter()
                .map(|item| match item {
                    TaskItem::Pair { label, .. } => Ok(*label),
                    other => Err(CliError::Data(anyhow!("not a pair item: {other:?}"))),
                })
                .collect::<Result<_, _>>()?;
            let pred: Vec<bool> = records
                .iter()
                .map(|r| {
                    r.pred
                        .as_bool()
                        .ok_or_else(|| CliError::Data(anyhow!("prediction {} not boolean", r.id)))
                })
                .collect::<Result<_, _>>()?;
            let gold_idx: Vec<usize> = gold.iter().map(|&b| b as usize).collect();
            let pred_idx: Vec<usize> = pred.iter().map(|&b| b as usize).collect();
            push(
                "accuracy",
                metrics::accuracy(&gold_idx, &pred_idx, 2).context("accuracy")?,
            );
            push(
                "weighted_f1",
                metrics::weighted_f1(&gold_idx, &pred_idx, 2).context("weighted f1")?,
            );
        }
        TaskChoice::Lpcr => {
            let outs: Vec<RankingOutcome> = gold_ds
                .items
                .iter()
                .zip(&records)
                .map(|(item, record)| {
                    let gold = match item {
                        TaskItem::Ranking { gold, .. } => *gold,
                        other => {
                            return Err(CliError::Data(anyhow!("not a ranking item: {other:?}")))
                        }
                    };
                    let ordering: Vec<usize> = serde_json::from_value(record.pred.clone())
                        .map_err(|e| {
                            CliError::Data(anyhow!("prediction {}: {e}", record.id))
                        })?;
                    Ok(RankingOutcome { gold, ordering })
                })
                .collect::<Result<_, _>>()?;
            push(
                &format!("precision_at_{}", args.k),
                metrics::precision_at_k(&outs, args.k).context("precision@k")?,
            );
            push("mrr", metrics::mrr(&outs).context("mrr")?);
        }
        TaskChoice::Fpi => {
            let space = &gold_ds.label_space;
            let gold: Vec<Vec<usize>> = gold_ds
                .items
                .iter()
                .map(|item| match item {
                    TaskItem::MultiLabel { labels, .. } => labels
                        .iter()
                        .map(|l| label_index(space, l))
                        .collect::<Result<Vec<_>, _>>(),
                    other => Err(CliError::Data(anyhow!("not multi-label: {other:?}"))),
                })
                .collect::<Result<_, _>>()?;
            let pred: Vec<Vec<usize>> = records
                .iter()
                .map(|r| {
                    let names: Vec<String> =
                        serde_json::from_value(r.pred.clone()).map_err(|e| {
                            CliError::Data(anyhow!("prediction {}: {e}", r.id))
                        })?;
                    names
                        .iter()
                        .map(|l| label_index(space, l))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()?;
            let mode = match args.multilabel_mode {
                MultiLabelMode::Jaccard => MultiLabelAccuracyMode::Jaccard,
                MultiLabelMode::GoldFraction => MultiLabelAccuracyMode::GoldFraction,
            };
            push(
                "avg_accuracy",
                metrics::multilabel_avg_accuracy(&gold, &pred, mode)
                    .context("multi-label accuracy")?,
            );
        }
    }

    for entry in &entries {
        println!("{} {} = {:.6}", entry.metric, entry.name, entry.value);
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, metrics::report_to_csv(&entries)).context("writing CSV")?;
    }
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&entries).context("serializing report")?;
        std::fs::write(path, json).context("writing JSON")?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct VerdictRecord {
    template_text: String,
    pass: bool,
    failed_aspects: Vec<Aspect>,
    feedback: String,
}

pub fn audit(args: AuditArgs) -> Result<(), CliError> {
    require_input(&args.knowledge)?;
    let pairs: Vec<KnowledgePair> =
        jsonl::load_knowledge(&args.knowledge).context("loading knowledge")?;
    let evaluator = match &args.roles_dir {
        Some(dir) => {
            require_input(dir)?;
            RoleCards::load_dir(dir).context("loading role cards")?.evaluator
        }
        None => RoleCards::builtin().evaluator,
    };
    let examples = match &args.examples {
        Some(path) => {
            require_input(path)?;
            let text = std::fs::read_to_string(path).context("reading example set")?;
            serde_json::from_str::<ContrastiveExampleSet>(&text).context("parsing example set")?
        }
        None => ContrastiveExampleSet::builtin(),
    };
    let gateway = build_gateway(&args.backend)?;

    let mut records = Vec::with_capacity(pairs.len());
    let mut failed = 0usize;
    let mut aspect_counts: std::collections::BTreeMap<Aspect, usize> = Default::default();
    for pair in &pairs {
        let verdict = distill::audit_knowledge(
            &pair.template,
            &pair.knowledge_text,
            &gateway,
            &args.backend.model,
            &evaluator,
            &examples,
        )
        .context("auditing knowledge")?;
        if !verdict.pass {
            failed += 1;
            for aspect in &verdict.failed_aspects {
                *aspect_counts.entry(*aspect).or_default() += 1;
            }
        }
        records.push(VerdictRecord {
            template_text: pair.template.template_text.clone(),
            pass: verdict.pass,
            failed_aspects: verdict.failed_aspects,
            feedback: verdict.feedback,
        });
    }
    jsonl::save_lines(&args.output, &records).context("writing verdicts")?;

    let proportion = failed as f64 / pairs.len().max(1) as f64;
    println!(
        "audited {} knowledge records: {:.1}% unsatisfactory",
        pairs.len(),
        proportion * 100.0
    );
    for (aspect, count) in &aspect_counts {
        println!("  failed {aspect}: {count}");
    }
    Ok(())
}

pub fn report(args: ReportArgs) -> Result<(), CliError> {
    let mut entries: Vec<ReportEntry> = Vec::new();
    for input in &args.inputs {
        require_input(input)?;
        let text = std::fs::read_to_string(input)
            .with_context(|| format!("reading {}", input.display()))?;
        entries.extend(
            metrics::report_from_csv(&text)
                .with_context(|| format!("parsing {}", input.display()))?,
        );
    }
    let json = serde_json::to_string_pretty(&entries).context("serializing summary")?;
    std::fs::write(&args.output, json).context("writing summary")?;
    println!(
        "merged {} entries from {} reports",
        entries.len(),
        args.inputs.len()
    );
    Ok(())
}
