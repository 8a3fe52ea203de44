//! Domain-adaptive prompt learning over frozen toy vision-language encoders.
//!
//! A labeled source domain and an unlabeled target domain share one label
//! space. Prompts for a frozen text encoder are built from style statistics
//! (domain tokens) and content features (image-specific context tokens) of
//! a frozen vision encoder, then trained with supervised cross-entropy,
//! a style-mapping regression and an entropy + KL alignment objective.

pub mod cli;
pub mod diffkit;
pub mod encoders;
pub mod error;
pub mod kv;
pub mod losses;
pub mod promptgen;
pub mod synthdata;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
