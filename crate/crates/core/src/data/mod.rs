//! Study volumes, the SCV1 file format, the synthetic cohort generator and
//! fold planning.

mod folds;
mod scv;
mod study;
mod synth;

pub use folds::{permute_labels, stratified_kfold};
pub use scv::{decode_study, encode_study, load_study, save_study, study_file_size, SCV_HEADER_LEN, SCV_MAGIC, SCV_VERSION};
pub use study::{normalize, PatientStudy, Window};
pub use synth::{
    generate_synthetic_cohort, load_cohort, read_manifest, region_mean_cta, synth_study, CohortManifest,
    GeneratorConfig, ManifestEntry,
};
