use std::path::PathBuf;

use scanet_core::data::{generate_synthetic_cohort, GeneratorConfig};

use crate::error::{CliError, Result};
use crate::run::create_run_dir;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Number of studies (at least 2).
    #[arg(long)]
    pub n: usize,
    #[arg(long, env = "SCANET_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Parent directory; the cohort goes into a run-stamped subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// 8 slices of 32x32 (default).
    #[arg(long, conflicts_with = "paper_scale")]
    pub toy: bool,
    /// 26 slices of 224x224.
    #[arg(long)]
    pub paper_scale: bool,
}

pub fn run(args: Args) -> Result<()> {
    if args.n < 2 {
        return Err(CliError::Usage(format!("--n {} is too small, a cohort needs at least 2 studies", args.n)));
    }
    let cfg = if args.paper_scale { GeneratorConfig::paper_scale() } else { GeneratorConfig::toy() };
    let dir = create_run_dir(&args.out, "gen-data")?;
    let manifest = generate_synthetic_cohort(args.n, args.seed, &cfg, &dir)?;
    let ones = manifest.labels().iter().filter(|&&l| l == 1).count();
    println!("manifest: {}", dir.join("manifest.json").display());
    println!("studies: {} (label 0: {}, label 1: {})", args.n, args.n - ones, ones);
    Ok(())
}
