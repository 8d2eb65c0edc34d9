use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use scanet_core::data::load_study;
use scanet_core::model::{neighborhood_partition, AttentionRecord, Variant};

use crate::error::{CliError, Result};
use crate::run::{check_shape, create_run_dir, load_model, write};

/// Largest accepted `|row sum - 1|` of an exported attention row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Shortest side of a written image, in pixels.
const MIN_IMAGE_SIDE: u32 = 128;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Checkpoint file or training run directory.
    #[arg(long)]
    pub model: PathBuf,
    /// One SCV1 study file.
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let loaded = load_model(&args.model)?;
    let cfg = loaded.model.config().clone();
    if cfg.variant == Variant::Baseline {
        return Err(CliError::Usage("the baseline variant has no attention to export".into()));
    }
    let mut study = load_study(&args.study)?;
    check_shape(&study, &cfg)?;
    study.apply_window(loaded.window)?;
    let (probs, records) = loaded.model.predict(&[&study], true)?;
    let record = &records[0];
    let worst = record.max_row_error()?;
    if worst > ROW_SUM_TOLERANCE {
        return Err(CliError::Verification(format!(
            "attention row sums deviate from 1 by {worst:.3e}"
        )));
    }

    let dir = create_run_dir(&args.out, "attn-export")?;
    let (gh, gw) = cfg.token_grid()?;
    for (s, layers) in record.sat_maps.iter().enumerate() {
        write(&dir.join("sat").join(format!("slice_{s:02}.csv")), sat_csv(record, layers))?;
        for (l, heads) in layers.iter().enumerate() {
            for (h, map) in heads.iter().enumerate() {
                let t = record.tokens;
                let stem = format!("slice_{s:02}_layer{l}_head{h}");
                save_gray(&dir.join("sat").join(format!("{stem}.png")), map, t, t)?;
                // attention received by each token, laid out on the token grid
                let received: Vec<f32> = (0..t).map(|k| (0..t).map(|q| map[q * t + k]).sum::<f32>() / t as f32).collect();
                save_gray(&dir.join("sat").join(format!("{stem}_grid.png")), &received, gh, gw)?;
            }
        }
    }

    let groups = neighborhood_partition(cfg.num_slices, cfg.neighborhood_size)?;
    let mut cat = String::from("branch,slices");
    for i in 0..cfg.neighborhood_size {
        let _ = write!(cat, ",w{i}");
    }
    cat.push('\n');
    for (b, (weights, slices)) in record.cat_maps.iter().zip(&groups).enumerate() {
        let names: Vec<String> = slices.iter().map(usize::to_string).collect();
        let _ = write!(cat, "{b},{}", names.join(" "));
        for w in weights {
            let _ = write!(cat, ",{w}");
        }
        cat.push('\n');
    }
    write(&dir.join("cat_importance.csv"), cat)?;
    let flat: Vec<f32> = record.cat_maps.concat();
    save_gray(&dir.join("cat_importance.png"), &flat, record.cat_maps.len(), cfg.neighborhood_size)?;
    write(&dir.join("prediction.txt"), format!("p0 = {}\np1 = {}\n", probs[0][0], probs[0][1]))?;

    println!(
        "{} slice maps, {} importance vectors, max row-sum error {worst:.2e}",
        record.sat_maps.len(),
        record.cat_maps.len()
    );
    println!("run: {}", dir.display());
    Ok(())
}

fn sat_csv(record: &AttentionRecord, layers: &[Vec<Vec<f32>>]) -> String {
    let t = record.tokens;
    let mut s = String::from("layer,head,query");
    for k in 0..t {
        let _ = write!(s, ",k{k}");
    }
    s.push('\n');
    for (l, heads) in layers.iter().enumerate() {
        for (h, map) in heads.iter().enumerate() {
            for (q, row) in map.chunks(t).enumerate() {
                let _ = write!(s, "{l},{h},{q}");
                for w in row {
                    let _ = write!(s, ",{w}");
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Row-major `rows × cols` values scaled by their maximum, enlarged with
/// nearest-neighbour blocks.
fn save_gray(path: &Path, values: &[f32], rows: usize, cols: usize) -> Result<()> {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    let scale = (MIN_IMAGE_SIDE / rows.min(cols).max(1) as u32).max(1);
    let img = GrayImage::from_fn(cols as u32 * scale, rows as u32 * scale, |x, y| {
        let v = values[(y / scale) as usize * cols + (x / scale) as usize];
        let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
        Luma([level as u8])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    img.save(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })
}
