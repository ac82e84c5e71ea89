//! Array container format, manifests, batching and the synthetic corpus.

pub mod batch;
pub mod container;
pub mod manifest;
pub mod synth;

pub use batch::batch_iter;
pub use container::{read_array, write_array, ArrayContainer, ArrayValue};
pub use manifest::{load_samples, read_manifest, write_manifest, Label, ManifestRow, Sample};
pub use synth::{read_latents, synth_corpus, write_corpus, Corpus, Latent, SynthConfig};
