//! Embedding containers, manifests and synthetic data.

pub mod manifest;
pub mod record;
pub mod synth;

pub use manifest::{load_dataset, Dataset, Manifest, ManifestEntry, Split};
pub use record::{read_record, write_record, FrameMatrix, Label, UtteranceRecord};
pub use synth::{generate, synthetic_dataset, write_synthetic, SynthConfig};
