use std::path::PathBuf;

use scanet_core::tensor::set_conv_backward_fault;
use scanet_core::verification::{format_table, gradient_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};

use crate::error::{CliError, Result};
use crate::run::{create_run_dir, write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Scale the conv2d input gradient by 1.5.
    ConvBackward,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f32,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, env = "SCANET_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Also write gradcheck.json and gradcheck.txt into a run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negative control: corrupt a backward kernel before checking.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

pub fn run(args: Args) -> Result<()> {
    if let Some(Fault::ConvBackward) = args.inject_fault {
        set_conv_backward_fault(true);
    }
    let rows = gradient_suite(args.eps, args.tolerance, args.seed);
    set_conv_backward_fault(false);
    let rows = rows?;
    let table = format_table(&rows);
    print!("{table}");
    if let Some(out) = &args.out {
        let dir = create_run_dir(out, "gradcheck")?;
        write(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        write(&dir.join("gradcheck.txt"), &table)?;
        println!("run: {}", dir.display());
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient mismatch in {}", failed.join(", "))))
    }
}
