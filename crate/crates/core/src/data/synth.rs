//! Synthetic two-modality cohort with a planted label-dependent lesion.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scv::{load_study, save_study};
use super::study::PatientStudy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Mean background intensity.
    pub background: f32,
    /// Standard deviation of each of the smooth field's cosine components.
    pub field_amplitude: f32,
    pub field_components: usize,
    /// Highest field frequency, in cycles per volume extent.
    pub field_max_frequency: f32,
    pub noise_std: f32,
    /// Lesion center as fractions of (width, height, slices).
    pub center: [f32; 3],
    /// Uniform relative jitter of each center coordinate.
    pub jitter: f32,
    /// Lesion radii as fractions of (width, height, slices).
    pub radii: [f32; 3],
    /// Lesion amplitude in (CT, CTA) for label 0.
    pub unfavorable: [f32; 2],
    /// Lesion amplitude in (CT, CTA) for label 1.
    pub favorable: [f32; 2],
}

impl GeneratorConfig {
    pub fn with_shape(slices: usize, height: usize, width: usize) -> Self {
        Self {
            slices,
            height,
            width,
            background: 0.3,
            field_amplitude: 0.035,
            field_components: 4,
            field_max_frequency: 1.5,
            noise_std: 0.05,
            center: [0.6, 0.5, 0.5],
            jitter: 0.1,
            radii: [0.1, 0.1, 1.0 / 6.0],
            unfavorable: [0.10, 0.30],
            favorable: [0.0, 0.10],
        }
    }

    pub fn toy() -> Self {
        Self::with_shape(8, 32, 32)
    }

    pub fn paper_scale() -> Self {
        Self::with_shape(26, 224, 224)
    }

    fn voxel_extents(&self) -> [f64; 3] {
        [self.width as f64, self.height as f64, self.slices as f64]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub id: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub params: GeneratorConfig,
    pub studies: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn labels(&self) -> Vec<u8> {
        self.studies.iter().map(|s| s.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.studies {
            if !seen.insert(&s.id) {
                return Err(Error::Argument(format!("duplicate study id {}", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Argument(format!("study {} has label {}", s.id, s.label)));
            }
        }
        Ok(())
    }
}

/// Inside test for the ellipsoid centered at `c` with radii `r`, in voxel
/// coordinates `(x, y, z)`.
fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0
}

fn lesion_geometry(cfg: &GeneratorConfig) -> ([f64; 3], [f64; 3]) {
    let ext = cfg.voxel_extents();
    let c = [0, 1, 2].map(|i| cfg.center[i] as f64 * ext[i]);
    let r = [0, 1, 2].map(|i| (cfg.radii[i] as f64 * ext[i]).max(0.5));
    (c, r)
}

/// Study `index` of the cohort drawn with `seed`. Labels alternate,
/// starting with 0. Each study has its own random stream, so studies can be
/// generated independently.
pub fn synth_study(index: usize, seed: u64, cfg: &GeneratorConfig) -> Result<PatientStudy> {
    let (s, h, w) = (cfg.slices, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let label = (index % 2) as u8;
    let ext = cfg.voxel_extents();

    let amp = Normal::new(0.0, cfg.field_amplitude as f64).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_std as f64).map_err(|e| Error::Config(e.to_string()))?;
    let fmax = cfg.field_max_frequency as f64;
    let components: Vec<([f64; 3], f64, f64)> = (0..cfg.field_components)
        .map(|_| {
            let f = [0; 3].map(|_| rng.random_range(-fmax..=fmax));
            (f, rng.random_range(0.0..TAU), amp.sample(&mut rng))
        })
        .collect();

    let (c0, r) = lesion_geometry(cfg);
    let j = cfg.jitter as f64;
    let c = [0, 1, 2].map(|i| c0[i] * (1.0 + rng.random_range(-j..=j)));
    let [ct_amp, cta_amp] = if label == 0 { cfg.unfavorable } else { cfg.favorable };

    let n = s * h * w;
    let (mut ct, mut cta) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64, z as f64];
                let field: f64 = components
                    .iter()
                    .map(|(f, phase, a)| a * (TAU * (0..3).map(|i| f[i] * p[i] / ext[i]).sum::<f64>() + phase).cos())
                    .sum();
                let base = cfg.background as f64 + field;
                let lesion = inside(p, c, r);
                let (dct, dcta) = if lesion { (ct_amp as f64, cta_amp as f64) } else { (0.0, 0.0) };
                ct.push((base + dct + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                cta.push((base + dcta + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    PatientStudy::new(format!("study_{index:04}"), (s, h, w), ct, cta, label)
}

/// Mean CTA intensity inside the nominal (unjittered) lesion territory.
pub fn region_mean_cta(study: &PatientStudy, cfg: &GeneratorConfig) -> f64 {
    let (c, r) = lesion_geometry(cfg);
    let (mut total, mut count) = (0.0, 0usize);
    for z in 0..study.slices {
        for y in 0..study.height {
            for x in 0..study.width {
                if inside([x as f64, y as f64, z as f64], c, r) {
                    total += study.cta[(z * study.height + y) * study.width + x] as f64;
                    count += 1;
                }
            }
        }
    }
    total / count.max(1) as f64
}

/// Writes `n` studies as `study_NNNN.scv` plus `manifest.json` into `out`.
pub fn generate_synthetic_cohort(n: usize, seed: u64, cfg: &GeneratorConfig, out: &Path) -> Result<CohortManifest> {
    if n < 2 {
        return Err(Error::Argument(format!("n = {n}, a cohort needs at least 2 studies")));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut studies = Vec::with_capacity(n);
    for i in 0..n {
        let study = synth_study(i, seed, cfg)?;
        let file = format!("{}.scv", study.id);
        save_study(&out.join(&file), &study)?;
        studies.push(ManifestEntry {
            path: file,
            id: study.id,
            label: study.label,
        });
    }
    let manifest = CohortManifest {
        seed,
        params: cfg.clone(),
        studies,
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CohortManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads every study of a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_cohort(manifest_path: &Path) -> Result<(CohortManifest, Vec<PatientStudy>)> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let studies = manifest
        .studies
        .iter()
        .map(|e| {
            let p = PathBuf::from(&e.path);
            let p = if p.is_absolute() { p } else { dir.join(p) };
            let mut st = load_study(&p)?;
            if st.label != e.label {
                return Err(Error::Argument(format!(
                    "{}: manifest label {} but file label {}",
                    e.id, e.label, st.label
                )));
            }
            st.id = e.id.clone();
            Ok(st)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, studies))
}
