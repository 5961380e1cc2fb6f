//! Label-free self-distillation for small vision transformers.
//!
//! Stage one pretrains a patch transformer on unlabeled images: a gradient-free
//! teacher sees large global crops, a student sees small local crops, and the
//! student is trained to match the teacher's sharpened output distribution.
//! The teacher follows the student by exponential moving average. Stage two
//! freezes the teacher and fits a linear probe on its class-token features.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod image;
pub mod optim;
pub mod probe;
pub mod seed;
pub mod tensor;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
