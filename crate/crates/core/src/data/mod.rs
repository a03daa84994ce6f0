//! Synthetic planted-correspondence corpora.
//!
//! Every image places class signatures at known boxes and every caption
//! mentions those classes at known token spans, so ground-truth grounding is
//! available for the evaluation protocols.

mod corpus;
mod manifest;
mod mentions;
mod vocab;

pub use corpus::{
    generate_corpus, item_seed, make_hard_negative, Annotation, BBox, ClassSpec, Corpus, CorpusConfig,
    GroundedPair, Replacement, Span, Split,
};
pub use manifest::{load_manifest, manifest_from_json, manifest_to_json, save_manifest, MANIFEST_VERSION};
pub use mentions::{match_mentions, SynonymDict};
pub use vocab::{Vocabulary, PAD};
