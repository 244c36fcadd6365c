//! `logken corpus` subcommands.

use std::path::Path;

use anyhow::Context;
use logken_core::corpus::{self, jsonl};

use crate::util::{require_input, CliError};

pub fn parse(input: &Path, output: &Path) -> Result<(), CliError> {
    require_input(input)?;
    let logs = jsonl::load_logs(input).context("loading logs")?;
    let templates: Result<Vec<_>, _> = logs.iter().map(corpus::parse_template).collect();
    let templates = templates.context("parsing templates")?;
    jsonl::save_templates(output, &templates).context("writing templates")?;
    println!("parsed {} logs into {} templates", logs.len(), templates.len());
    Ok(())
}

pub fn dedupe(input: &Path, output: &Path) -> Result<(), CliError> {
    require_input(input)?;
    let templates = jsonl::load_templates(input).context("loading templates")?;
    let total = templates.len();
    let deduped = corpus::dedupe_templates(templates);
    jsonl::save_templates(output, &deduped).context("writing templates")?;
    println!("deduplicated {} templates into {}", total, deduped.len());
    Ok(())
}

pub fn perturb(input: &Path, output: &Path, ratio: f64, seed: u64) -> Result<(), CliError> {
    require_input(input)?;
    let ds = jsonl::load_dataset(input).context("loading dataset")?;
    let perturbed = corpus::perturb_dataset(&ds, ratio, seed).context("perturbing")?;
    let changed = ds
        .items
        .iter()
        .zip(&perturbed.items)
        .filter(|(a, b)| a != b)
        .count();
    jsonl::save_dataset(output, &perturbed).context("writing dataset")?;
    println!("perturbed {changed} of {} items (ratio {ratio}, seed {seed})", ds.items.len());
    Ok(())
}

pub fn subsample(input: &Path, output: &Path, ratio: f64, seed: u64) -> Result<(), CliError> {
    require_input(input)?;
    let ds = jsonl::load_dataset(input).context("loading dataset")?;
    let sampled = corpus::subsample(&ds, ratio, seed).context("subsampling")?;
    jsonl::save_dataset(output, &sampled).context("writing dataset")?;
    println!("kept {} of {} items (ratio {ratio}, seed {seed})", sampled.items.len(), ds.items.len());
    Ok(())
}
