use std::fmt::Write as _;
use std::path::PathBuf;

use scanet_core::evaluation::{aggregate_report, FoldMetrics};
use scanet_core::training::predict_all;

use crate::error::Result;
use crate::run::{create_run_dir, load_data, load_model, write};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Checkpoint file or training run directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Cohort directory or manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let loaded = load_model(&args.model)?;
    let cfg = loaded.model.config().clone();
    let studies = load_data(&args.data, &cfg, loaded.window)?;
    let refs: Vec<_> = studies.iter().collect();
    let p = predict_all(&loaded.model, &refs, 8)?;
    let scores: Vec<f64> = p.iter().map(|r| r[1] as f64).collect();
    let labels: Vec<u8> = studies.iter().map(|s| s.label).collect();
    let metrics = FoldMetrics::evaluate(0, &scores, &labels)?;
    let report = aggregate_report(&cfg.variant.to_string(), vec![metrics])?;

    let mut csv = String::from("id,label,p0,p1\n");
    for (s, r) in studies.iter().zip(&p) {
        let _ = writeln!(csv, "{},{},{},{}", s.id, s.label, r[0], r[1]);
    }
    let dir = create_run_dir(&args.out, "eval")?;
    write(&dir.join("predictions.csv"), csv)?;
    write(&dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.table();
    write(&dir.join("report.txt"), &table)?;
    print!("{table}");
    println!("run: {}", dir.display());
    Ok(())
}
