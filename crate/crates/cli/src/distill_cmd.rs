//! `logken negatives` and `logken distill`.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use logken_core::corpus::{jsonl, KnowledgePair, LogTemplate};
use logken_core::distill::{
    self, Aspect, ContrastiveExampleSet, DistillationTrace, RoleCards,
};
use logken_core::gateway::Gateway;

use crate::util::{build_gateway, read_text, require_input, CliError};
use crate::{DistillArgs, NegativesArgs, StrategyChoice};

pub fn negatives(args: NegativesArgs) -> Result<(), CliError> {
    let log_text = read_text(&args.log_file)?;
    let positive = read_text(&args.positive_file)?;
    let keypoints = match &args.keypoints_file {
        Some(path) => read_text(path)?,
        None => String::from("(not provided)"),
    };
    let gateway = build_gateway(&args.backend)?;
    let log = LogTemplate::from_text(log_text);

    // one negative per evaluation requirement
    let target_aspects = vec![
        vec![Aspect::Completeness],
        vec![Aspect::Consistency],
        vec![Aspect::Conciseness],
    ];
    let set = distill::build_negative_examples(
        &positive,
        &log,
        &keypoints,
        &target_aspects,
        &gateway,
        &args.backend.model,
    )
    .context("building negative examples")?;
    let json = serde_json::to_string_pretty(&set).context("serializing example set")?;
    std::fs::write(&args.output, json).context("writing example set")?;
    println!("wrote contrastive example set with {} negatives", set.negatives.len());
    Ok(())
}

fn load_roles(dir: &Option<PathBuf>) -> Result<RoleCards, CliError> {
    match dir {
        Some(dir) => {
            require_input(dir)?;
            Ok(RoleCards::load_dir(dir).context("loading role cards")?)
        }
        None => Ok(RoleCards::builtin()),
    }
}

fn load_examples(path: &Option<PathBuf>) -> Result<ContrastiveExampleSet, CliError> {
    match path {
        Some(path) => {
            require_input(path)?;
            let text = std::fs::read_to_string(path).context("reading example set")?;
            let set: ContrastiveExampleSet =
                serde_json::from_str(&text).context("parsing example set")?;
            set.validate().context("validating example set")?;
            Ok(set)
        }
        None => Ok(ContrastiveExampleSet::builtin()),
    }
}

fn cursor_path(knowledge_out: &Path) -> PathBuf {
    let mut os = knowledge_out.as_os_str().to_owned();
    os.push(".cursor");
    PathBuf::from(os)
}

fn load_cursor(path: &Path) -> Result<HashSet<String>, CliError> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let text = std::fs::read_to_string(path).context("reading cursor")?;
    let mut done = HashSet::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let key: String = serde_json::from_str(line).context("parsing cursor line")?;
        done.insert(key);
    }
    Ok(done)
}

struct DistillOutput {
    pair: KnowledgePair,
    trace: Option<DistillationTrace>,
}

pub fn distill(args: DistillArgs) -> Result<(), CliError> {
    require_input(&args.input)?;
    let templates = jsonl::load_templates(&args.input).context("loading templates")?;
    let roles = load_roles(&args.roles_dir)?;
    let examples = load_examples(&args.examples)?;
    let gateway = build_gateway(&args.backend)?;
    if args.max_epochs == 0 {
        return Err(CliError::Usage(anyhow!("--max-epochs must be >= 1")));
    }

    let cursor = cursor_path(&args.knowledge_out);
    let done = if args.resume {
        load_cursor(&cursor)?
    } else {
        HashSet::new()
    };
    let pending: Vec<(usize, &LogTemplate)> = templates
        .iter()
        .enumerate()
        .filter(|(_, t)| !done.contains(&t.template_text))
        .collect();
    if pending.len() < templates.len() {
        println!(
            "resuming: {} of {} templates already distilled",
            templates.len() - pending.len(),
            templates.len()
        );
    }

    // Workers pull indices from a shared queue; results land in slots so the
    // output keeps the input order regardless of completion order.
    let results: Vec<Mutex<Option<Result<DistillOutput, distill::DistillError>>>> =
        pending.iter().map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let jobs = args.jobs.max(1).min(pending.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= pending.len() {
                    break;
                }
                let template = pending[idx].1;
                let outcome = run_one(template, &gateway, &args, &roles, &examples);
                *results[idx].lock().expect("result slot") = Some(outcome);
            });
        }
    });

    // Flush the contiguous prefix of successes so a failed run stays
    // resumable from the cursor.
    let trace_offset = match (&args.traces_out, args.resume) {
        (Some(path), true) if path.exists() => {
            jsonl::load_lines::<DistillationTrace>(path)
                .context("loading existing traces")?
                .len()
        }
        _ => 0,
    };
    let mut pairs: Vec<KnowledgePair> = Vec::new();
    let mut traces: Vec<DistillationTrace> = Vec::new();
    let mut first_error: Option<distill::DistillError> = None;
    for slot in &results {
        let outcome = slot.lock().expect("result slot").take();
        match outcome {
            Some(Ok(output)) => {
                let mut pair = output.pair;
                if let Some(trace) = output.trace {
                    pair.trace_ref = Some((trace_offset + traces.len()).to_string());
                    traces.push(trace);
                }
                pairs.push(pair);
            }
            Some(Err(e)) => {
                first_error = Some(e);
                break;
            }
            None => break,
        }
    }

    append_knowledge(&args.knowledge_out, &pairs, args.resume)?;
    if let Some(traces_out) = &args.traces_out {
        append_lines(traces_out, &traces, args.resume)?;
    }
    let mut cursor_file = std::fs::OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&cursor)
        .context("opening cursor")?;
    for pair in &pairs {
        writeln!(
            cursor_file,
            "{}",
            serde_json::to_string(&pair.template.template_text).context("cursor line")?
        )
        .context("writing cursor")?;
    }

    if let Some(e) = first_error {
        return Err(CliError::Data(
            anyhow!(e).context("distillation failed; completed prefix written, rerun with --resume"),
        ));
    }

    println!("distilled {} templates", pairs.len());
    if !traces.is_empty() {
        let stats = distill::iteration_stats(&traces).context("computing iteration stats")?;
        println!("unsatisfactory proportion per iteration: {:?}", stats.proportions);
        for (aspect, count) in &stats.aspect_counts {
            println!("  failed {aspect}: {count}");
        }
    }
    Ok(())
}

fn run_one(
    template: &LogTemplate,
    gateway: &Gateway,
    args: &DistillArgs,
    roles: &RoleCards,
    examples: &ContrastiveExampleSet,
) -> Result<DistillOutput, distill::DistillError> {
    match args.strategy {
        StrategyChoice::Mec => {
            let (pair, trace) = distill::distill(
                template,
                gateway,
                &args.backend.model,
                roles,
                examples,
                args.max_epochs,
            )?;
            Ok(DistillOutput {
                pair,
                trace: Some(trace),
            })
        }
        StrategyChoice::Cot => {
            let pair = distill::cot_distill(template, gateway, &args.backend.model)?;
            Ok(DistillOutput { pair, trace: None })
        }
    }
}

fn append_knowledge(path: &Path, pairs: &[KnowledgePair], append: bool) -> Result<(), CliError> {
    if !append || !path.exists() {
        jsonl::save_knowledge(path, pairs).context("writing knowledge")?;
        return Ok(());
    }
    let mut existing = jsonl::load_knowledge(path).context("loading existing knowledge")?;
    existing.extend(pairs.iter().cloned());
    jsonl::save_knowledge(path, &existing).context("writing knowledge")?;
    Ok(())
}

fn append_lines<T>(path: &Path, records: &[T], append: bool) -> Result<(), CliError>
where
    T: serde::Serialize + serde::de::DeserializeOwned + Clone,
{
    let mut all: Vec<T> = if append && path.exists() {
        jsonl::load_lines(path).context("loading existing records")?
    } else {
        Vec::new()
    };
    all.extend(records.iter().cloned());
    jsonl::save_lines(path, &all).context("writing records")?;
    Ok(())
}
