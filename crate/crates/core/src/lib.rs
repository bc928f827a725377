//! Explicit transformer weight programs.
//!
//! This crate constructs untrained transformer weight matrices that carry
//! out concrete computations: copying regions between token positions,
//! adding binary integers, transposing and multiplying matrices through a
//! linearized softmax, encoding linear combinations of sigmoids in
//! attention heads, filtering chain-of-thought prompts, and learning
//! multilayer perceptrons in context, layer by layer. Every block comes
//! with an input-layout builder and is checked against a plain numeric
//! oracle within a declared error budget.

pub mod cot;
pub mod encodings;
pub mod error;
pub mod functions;
pub mod linalg;
pub mod numerics;
pub mod primitives;
pub mod transformer;

pub use error::{Error, Result};
pub use numerics::{
    leaky_relu, leaky_relu_inverse, relu, temp_softmax, LeakyAlpha, Matrix, Temperature,
};
pub use transformer::{
    attention_forward, block_forward, check_against_oracle, layer_forward, AttentionHead,
    ConsequentialMask, FunctionBlock, TransformerLayer, VerificationReport,
};
