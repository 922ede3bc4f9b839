//! Training data: manifests, mixtures, prompt templates and the synthetic
//! shapes corpus.

pub mod manifest;
pub mod mixture;
pub mod synthetic;

pub use manifest::{apply_prompt, load_manifest, DatasetManifest, PairRecord, PromptTemplate, Source, SourceKind};
pub use mixture::{sample_batch, sample_indices, Lane, MixtureSpec};
