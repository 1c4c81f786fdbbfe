//! On-disk formats and the synthetic dataset generator.

pub mod checkpoint;
pub mod features;
pub mod qa;
pub mod synth;

pub use checkpoint::{load_checkpoint, load_into, read_manifest, save_checkpoint, Manifest};
pub use features::{read_features, write_features, FeatureReader, FeatureWriter};
pub use qa::{read_qa, read_vocab, write_qa, write_vocab, DatasetMeta, QaRecord, TaskKind};
pub use synth::{generate_synthetic, synthesize, SyntheticConfig};
