use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scanet_core::config::RunConfig;
use scanet_core::data::{permute_labels, PatientStudy};
use scanet_core::model::{ModelConfig, Variant};
use scanet_core::training::{cross_validate, CrossValidation};

use crate::error::{CliError, Result};
use crate::run::{create_run_dir, load_data, write, ConfigArgs, ThreadArgs, CONFIG_FILE};

/// Seed offset for the label permutation, so it differs from fold planning.
const PERMUTATION_SALT: u64 = 0x5eed_1abe_15;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Cohort directory or manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of folds (at least 2).
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds fold planning, model initialization and training.
    #[arg(long, env = "SCANET_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub threads: ThreadArgs,
    /// Also run the baseline ablation on the same folds.
    #[arg(long)]
    pub compare_baseline: bool,
    /// Shuffle labels across studies first (null-signal control).
    #[arg(long)]
    pub permute_labels: bool,
}

pub fn run(args: Args) -> Result<()> {
    if args.k < 2 {
        return Err(CliError::Usage(format!("--k {} rejected, at least 2 folds are required", args.k)));
    }
    let cfg = args.config.resolve(args.seed)?;
    let mut studies = load_data(&args.data, &cfg.model, cfg.window)?;
    if args.permute_labels {
        let labels: Vec<u8> = studies.iter().map(|s| s.label).collect();
        for (s, l) in studies.iter_mut().zip(permute_labels(&labels, cfg.train.seed ^ PERMUTATION_SALT)) {
            s.label = l;
        }
    }
    let threads = args.threads.count();
    let dir = create_run_dir(&args.out, "cv")?;
    write(&dir.join(CONFIG_FILE), cfg.to_text())?;

    let primary = run_variant(&studies, args.k, &cfg.model, &cfg, threads, &dir)?;
    print!("{}", primary.report.table());
    if args.compare_baseline && cfg.model.variant != Variant::Baseline {
        let base_cfg = ModelConfig {
            variant: Variant::Baseline,
            ..cfg.model.clone()
        };
        let baseline = run_variant(&studies, args.k, &base_cfg, &cfg, threads, &dir.join("baseline"))?;
        print!("{}", baseline.report.table());
        let mean = |cv: &CrossValidation| cv.report.roc_auc.mean.map_or("undefined".into(), |m| format!("{m:.4}"));
        println!("mean ROC-AUC: {} {} vs baseline {}", cfg.model.variant, mean(&primary), mean(&baseline));
    }
    println!("run: {}", dir.display());
    Ok(())
}

fn run_variant(
    studies: &[PatientStudy],
    k: usize,
    model: &ModelConfig,
    cfg: &RunConfig,
    threads: usize,
    dir: &Path,
) -> Result<CrossValidation> {
    eprintln!("{} cross-validation: {} studies, k = {k}, {threads} thread(s)", model.variant, studies.len());
    let cv = cross_validate(studies, k, model, &cfg.train, threads)?;
    write(&dir.join("report.json"), serde_json::to_string_pretty(&cv.report)? + "\n")?;
    write(&dir.join("report.txt"), cv.report.table())?;

    let mut folds = String::from("fold,size,tp,fp,tn,fn,best_epoch,epochs\n");
    let mut preds = String::from("fold,id,label,p0,p1\n");
    for run in &cv.folds {
        let c = run.metrics.counts;
        let _ = writeln!(
            folds,
            "{},{},{},{},{},{},{},{}",
            run.fold + 1,
            run.metrics.size,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            run.history.best_epoch,
            run.history.epochs.len()
        );
        for (&i, p) in run.test_indices.iter().zip(&run.probabilities) {
            let _ = writeln!(preds, "{},{},{},{},{}", run.fold + 1, studies[i].id, studies[i].label, p[0], p[1]);
        }
        write(&dir.join(format!("history_fold{}.csv", run.fold + 1)), run.history.to_csv())?;
    }
    write(&dir.join("folds.csv"), folds)?;
    write(&dir.join("predictions.csv"), preds)?;
    Ok(cv)
}
