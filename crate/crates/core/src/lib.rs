//! Alignment of two independently trained monolingual word-embedding spaces
//! without parallel data.
//!
//! The pipeline has three stages: an adversarially trained linear map as an
//! initial guess ([`adversary`]), iterative Procrustes refinement on a
//! synthetic dictionary of mutual nearest neighbors ([`refine`]), and
//! hubness-corrected retrieval for the final lexicon ([`metric`]). Model
//! selection without a validation dictionary goes through the mean-cosine
//! criterion in [`modelsel`]. The [`eval`] module scores a mapping on word
//! translation, cross-lingual word similarity, sentence retrieval and
//! word-by-word translation BLEU. [`synth`] generates planted-rotation
//! instances with known ground truth so every stage can be verified end to
//! end on a desk-scale benchmark.

pub mod adversary;
pub mod embed;
pub mod error;
pub mod eval;
pub mod linmap;
pub mod metric;
pub mod modelsel;
pub mod refine;
pub mod synth;
pub mod util;

pub use embed::{Dictionary, EmbeddingSpace, NormalizeMode};
pub use error::{Error, Result};
pub use linmap::MappingMatrix;
pub use metric::Method;
