//! Multi-task sequence-to-sequence NLU workbench.

pub mod bpe;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
