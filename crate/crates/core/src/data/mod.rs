//! Vocabulary, manifests, binary features and global normalization.

pub mod features;
pub mod manifest;
pub mod norm;
pub mod vocab;

pub use features::FeatureMatrix;
pub use manifest::{read_manifest, resolve_feat_path, write_manifest, UtteranceRecord};
pub use norm::FeatureStats;
pub use vocab::{Token, Vocabulary, BLANK, EOS, SOS, UNK};
