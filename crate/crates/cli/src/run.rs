//! Helpers shared by the subcommands: run directories, configuration
//! merging, cohort and model loading.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use scanet_core::config::{Preset, RunConfig};
use scanet_core::data::{load_cohort, PatientStudy, Window};
use scanet_core::model::{parse_model_card, ModelConfig, ScaNet};

use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "model.sckp";
pub const MODEL_CARD_FILE: &str = "model_card.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Creates `{out}/{command}-{unix seconds}`, adding `-1`, `-2`, ... when
/// that name is taken.
pub fn create_run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let stem = format!("{command}-{secs}");
    for n in 0.. {
        let name = if n == 0 { stem.clone() } else { format!("{stem}-{n}") };
        let path = out.join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(&path, e)),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset, replacing any `preset` line of the file.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Override one key, e.g. `--set learning_rate=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: scanet_core::Error| e.to_string())
}

impl ConfigArgs {
    /// Preset, then file, then `--set` overrides, then the seed.
    pub fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => read(p)?,
            None => String::new(),
        };
        let mut cfg = RunConfig::parse_with_preset(&text, self.preset)?;
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
            if k.trim() == "preset" {
                return Err(CliError::Usage("use --preset to choose the preset".into()));
            }
            cfg.set(k, v)?;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct ThreadArgs {
    /// Run folds one after another on the calling thread.
    #[arg(long, conflicts_with = "threads")]
    pub single_thread: bool,
    /// Worker threads for independent folds (default: available cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl ThreadArgs {
    pub fn count(&self) -> usize {
        if self.single_thread {
            return 1;
        }
        self.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

/// Accepts a cohort directory or its `manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

pub fn check_shape(study: &PatientStudy, model: &ModelConfig) -> Result<()> {
    let want = (model.num_slices, model.slice_height, model.slice_width);
    if study.dims() != want {
        return Err(CliError::Usage(format!(
            "study {} has shape {:?} (slices, height, width) but the model expects {want:?}",
            study.id,
            study.dims()
        )));
    }
    Ok(())
}

/// Loads a cohort, checks every study against the model shape and applies
/// the intensity window.
pub fn load_data(data: &Path, cfg: &ModelConfig, window: Window) -> Result<Vec<PatientStudy>> {
    let path = manifest_path(data);
    if !path.exists() {
        return Err(CliError::Usage(format!("no cohort manifest at {}", path.display())));
    }
    let (_, mut studies) = load_cohort(&path)?;
    for s in &mut studies {
        check_shape(s, cfg)?;
        s.apply_window(window)?;
    }
    Ok(studies)
}

/// A checkpoint with its model card and, when present, the run config
/// written beside it.
pub struct LoadedModel {
    pub model: ScaNet,
    pub window: Window,
}

/// Accepts a checkpoint file or the training run directory holding it.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    if !ckpt.exists() {
        return Err(CliError::Usage(format!("no checkpoint at {}", ckpt.display())));
    }
    let card = dir.join(MODEL_CARD_FILE);
    if !card.exists() {
        return Err(CliError::Usage(format!("no model card beside the checkpoint ({})", card.display())));
    }
    let cfg = parse_model_card(&read(&card)?)?;
    let model = ScaNet::new(&cfg, 0)?;
    model.load_weights(&ckpt)?;
    let run_cfg = dir.join(CONFIG_FILE);
    let window = if run_cfg.exists() {
        RunConfig::parse(&read(&run_cfg)?)?.window
    } else {
        Window::default()
    };
    Ok(LoadedModel { model, window })
}
