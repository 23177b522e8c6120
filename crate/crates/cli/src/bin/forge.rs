use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fwprobe_core::forge::{
    build_inconsistent_dataset, build_semantic_dataset, load_templates, serialize_dataset, BuildOutcome, DatasetKind,
    Template,
};
use fwprobe_core::resources::load_catalog;

/// Builds the probe datasets from concept resources and templates.
#[derive(Parser)]
#[command(name = "forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand templates over resources into `inconsistent.jsonl` and `semantic.jsonl`.
    Build {
        #[arg(long)]
        resources: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Build { resources, templates, out } => build(&resources, &templates, &out),
    }
}

fn build(resources: &PathBuf, templates: &PathBuf, out: &PathBuf) -> Result<()> {
    let catalog = load_catalog(resources).with_context(|| format!("loading resources from {}", resources.display()))?;
    let templates = load_templates(templates).with_context(|| format!("loading templates from {}", templates.display()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    log::info!("resource snapshot {}", catalog.snapshot_id());

    for kind in [DatasetKind::Inconsistent, DatasetKind::Semantic] {
        let selected: Vec<Template> = templates.iter().filter(|t| t.dataset == kind).cloned().collect();
        let BuildOutcome { dataset, rejected } = match kind {
            DatasetKind::Inconsistent => build_inconsistent_dataset(&catalog, &selected)?,
            DatasetKind::Semantic => build_semantic_dataset(&catalog, &selected)?,
        };
        for r in &rejected {
            log::warn!("rejected {} row {}: {}", r.template_id, r.row, r.reason);
        }
        let path = out.join(format!("{kind}.jsonl"));
        fs::write(&path, serialize_dataset(&dataset)).with_context(|| format!("writing {}", path.display()))?;
        let counts: Vec<String> = dataset
            .manifest()
            .counts
            .iter()
            .map(|(subset, n)| format!("{subset} {n}"))
            .collect();
        println!(
            "{}: {} items ({}), {} rejected -> {}",
            kind,
            dataset.len(),
            counts.join(", "),
            rejected.len(),
            path.display()
        );
    }
    Ok(())
}
