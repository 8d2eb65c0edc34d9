use std::path::PathBuf;

use scanet_core::model::ScaNet;
use scanet_core::training::train_with;

use crate::error::Result;
use crate::run::{create_run_dir, load_data, write, ConfigArgs, CHECKPOINT_FILE, CONFIG_FILE, MODEL_CARD_FILE};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Cohort directory or manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds model initialization, the validation split and batch order.
    #[arg(long, env = "SCANET_SEED")]
    pub seed: Option<u64>,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = args.config.resolve(args.seed)?;
    let studies = load_data(&args.data, &cfg.model, cfg.window)?;
    let refs: Vec<_> = studies.iter().collect();
    let model = ScaNet::new(&cfg.model, cfg.train.seed)?;
    eprintln!("training {} studies, {} parameters", refs.len(), model.parameter_count());
    let outcome = train_with(&model, &refs, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  auc {}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    })?;
    let dir = create_run_dir(&args.out, "train")?;
    model.save(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(MODEL_CARD_FILE), model.model_card())?;
    write(&dir.join(CONFIG_FILE), cfg.to_text())?;
    write(&dir.join("history.csv"), outcome.history.to_csv())?;
    println!("run: {}", dir.display());
    println!(
        "best epoch {} of {} ({:?})",
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        outcome.history.stop_reason
    );
    Ok(())
}
