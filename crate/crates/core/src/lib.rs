//! Attention editing by progressive distillation.
//!
//! A small GQA teacher is converted into an MLA or GateSWA student: edited
//! attention modules are randomly initialised, trained block-wise against the
//! teacher's post-`o_proj` activations, then distilled end-to-end on logits.
//! The crate also carries exact KV-cache accounting for the three variants.

pub mod attention;
pub mod data;
pub mod distill;
mod error;
pub mod kvplan;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
