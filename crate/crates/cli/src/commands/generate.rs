use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use hulm_core::corpus::{generate_synthetic, split_by_author};
use serde_json::json;

use super::Outcome;
use crate::config::{load_or_default, GenerateConfig};
use crate::rundir::RunDir;
use crate::OutArgs;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// TOML file with `[corpus]` generator settings and `[split]` ratios.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Overrides the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Overrides the number of authors.
    #[arg(long)]
    pub authors: Option<usize>,

    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(args: GenerateArgs) -> Result<Outcome> {
    let (mut cfg, _): (GenerateConfig, _) = load_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.corpus.seed = s;
    }
    if let Some(n) = args.authors {
        cfg.corpus.n_authors = n;
    }
    cfg.corpus.validate()?;

    let mut run = RunDir::create(&args.out)?;
    if let Some(p) = &args.config {
        run.input(p)?;
    }
    let corpus = generate_synthetic(&cfg.corpus)?;
    let parts = split_by_author(&corpus, cfg.split.ratios, cfg.split.seed)?;
    let mut sizes = serde_json::Map::new();
    for (name, part) in SPLITS.iter().zip(&parts) {
        run.write(&format!("{name}.tsv"), part.to_text())?;
        sizes.insert(name.to_string(), json!(part.authors.len()));
    }
    let manifest = run.finish("generate", Some(cfg.corpus.seed), &cfg)?;
    Ok(Outcome {
        text: format!(
            "generated {} authors: train {} / dev {} / test {} in {}\n",
            corpus.authors.len(),
            parts[0].authors.len(),
            parts[1].authors.len(),
            parts[2].authors.len(),
            args.out.out.display()
        ),
        json: json!({ "command": "generate", "out": args.out.out, "authors": sizes, "manifest": manifest }),
    })
}
