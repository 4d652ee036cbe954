//! Consistency training with stacked text augmentations, a momentum-contrast
//! regularizer over a memory bank, and an MMD diversity diagnostic, built on a
//! small hand-differentiated text classifier.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod checkpoint;
pub mod contrast;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{CodaError, Result};
