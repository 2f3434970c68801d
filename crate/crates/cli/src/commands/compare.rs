use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use hulm_core::eval::{compare_report, RunEval};
use serde_json::json;

use super::evaluate::EVAL_FILE;
use super::Outcome;
use crate::config::config_error;
use crate::rundir::RunDir;
use crate::OutArgs;

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Evaluated run directories or their `eval.json` files; the first is
    /// the baseline for significance tests.
    #[arg(required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,

    #[command(flatten)]
    pub out: OutArgs,
}

fn eval_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(EVAL_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn run(args: CompareArgs) -> Result<Outcome> {
    let mut evals = Vec::new();
    let mut paths = Vec::new();
    for p in &args.runs {
        let path = eval_path(p);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let eval: RunEval = serde_json::from_str(&text)
            .map_err(|e| hulm_core::Error::Data(format!("{}: {e}", path.display())))?;
        if evals.iter().any(|r: &RunEval| r.run == eval.run) {
            return Err(config_error(format!("run name {:?} appears twice; rename with evaluate --name", eval.run)));
        }
        evals.push(eval);
        paths.push(path);
    }
    // Checked before the run directory exists so a mismatch leaves nothing behind.
    let report = compare_report(&evals)?;

    let mut run = RunDir::create(&args.out)?;
    for p in &paths {
        run.input(p)?;
    }
    run.write("report.txt", report.to_text())?;
    run.write("report.json", report.to_json()? + "\n")?;
    run.finish("compare", None, &json!({ "runs": paths }))?;
    Ok(Outcome {
        text: report.to_text(),
        json: json!({ "command": "compare", "out": args.out.out, "report": report }),
    })
}
