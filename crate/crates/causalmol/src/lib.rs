//! Few-shot molecular property prediction with context graphs, causal
//! substructure masking, and episodic meta-learning.
//!
//! The pipeline: parse SMILES into molecular graphs, decompose them into
//! functional-group fragments, build an episode-level context graph over
//! molecules, fragments and properties, encode everything with edge-aware GIN
//! layers, extract a causal atom subset by learnable masking, regularize it
//! with backdoor-style interventions over fragment confounders, and train the
//! whole stack with MAML-style inner/outer loops.

pub mod autodiff;
pub mod causal;
pub mod cli;
pub mod config;
pub mod context;
pub mod dataset;
pub mod encoder;
pub mod evalrun;
pub mod evalx;
pub mod fragment;
pub mod graph_iso;
pub mod intervene;
pub mod meta;
pub mod model;
pub mod objective;
pub mod smiles;
pub mod synth;
pub mod util;

pub use autodiff::{ParameterStore, Tensor};
