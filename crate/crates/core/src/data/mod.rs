//! Manifests, feature files, folds, label sampling and the synthetic corpus.

pub mod bridge;
mod dataset;
pub mod manifest;
pub mod mvf;
pub mod splits;
pub mod synth;

pub use dataset::{Dataset, Normalization, ViewData};
pub use manifest::{load_manifest, write_manifest, LabelMap, Manifest, UtteranceRecord, ViewDecl};
pub use mvf::{mvf_read, mvf_write};
pub use splits::{make_cv_splits, sample_sparse_labels, CvSplit, Part, SparseLabelConfig, SPARSE_FRACTIONS};
pub use synth::{synth_dataset, synth_generate, SynthConfig};
