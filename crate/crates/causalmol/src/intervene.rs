//! Distribution intervention: a pool of fragment-derived confounder vectors
//! from other properties' molecules, combined with causal readouts by
//! addition in representation space, and the invariance loss over the pool.
//!
//! Pool embeddings are detached constants: the intervener exposes the causal
//! representation to varied fixed environments rather than training them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{OpKind, ParameterStore, Tape, Tensor, TensorError, TensorId};
use crate::objective::bce_rows;

pub const DEFAULT_POOL_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub embedding: Vec<f64>,
    pub source_property: usize,
    pub fragment_key: String,
}

#[derive(Debug, Clone)]
pub struct ConfounderPool {
    pub entries: Vec<PoolEntry>,
    pub target_property: usize,
    pub max_size: usize,
}

impl ConfounderPool {
    pub fn empty(target_property: usize) -> Self {
        ConfounderPool { entries: Vec::new(), target_property, max_size: DEFAULT_POOL_SIZE }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Assemble a pool from candidates: entries sourced from the target property
/// are excluded, duplicates (by fragment key) collapse to the first seen, and
/// the result is uniformly subsampled down to `max_size`. An empty pool is
/// valid and simply disables the invariance loss.
pub fn build_pool<R: Rng>(
    candidates: Vec<PoolEntry>,
    target_property: usize,
    max_size: usize,
    rng: &mut R,
) -> ConfounderPool {
    let mut seen = std::collections::HashSet::new();
    let mut entries: Vec<PoolEntry> = candidates
        .into_iter()
        .filter(|c| c.source_property != target_property)
        .filter(|c| seen.insert(c.fragment_key.clone()))
        .collect();
    if entries.len() > max_size {
        entries.shuffle(rng);
        entries.truncate(max_size);
        // deterministic order after subsampling
        entries.sort_by(|a, b| a.fragment_key.cmp(&b.fragment_key));
    }
    ConfounderPool { entries, target_property, max_size }
}

/// Prediction under one confounder: `sigmoid(w (c + s) + b)`. With `s = 0`
/// this is exactly the plain causal prediction.
pub fn intervene_predict(
    tape: &mut Tape,
    store: &ParameterStore,
    causal_vec: TensorId,
    confounder: &[f64],
) -> Result<TensorId, TensorError> {
    let (_, d) = tape.value(causal_vec).rows_cols();
    if confounder.len() != d {
        return Err(TensorError::ShapeMismatch {
            op: "intervene_predict".into(),
            detail: format!("causal width {d} vs confounder width {}", confounder.len()),
        });
    }
    let s = tape.constant(Tensor::matrix(1, d, confounder.to_vec())?);
    let combined = tape.apply(OpKind::Add, &[causal_vec, s])?;
    crate::objective::predict_prob(tape, store, combined)
}

/// Invariance loss for one molecule: the summed BCE of the prediction under
/// every pool entry against the molecule's label. Empty pool contributes 0.
pub fn loss_var(
    tape: &mut Tape,
    store: &ParameterStore,
    label: f64,
    causal_vec: TensorId,
    pool: &ConfounderPool,
) -> Result<TensorId, TensorError> {
    if pool.is_empty() {
        return Ok(tape.constant(Tensor::vector(vec![0.0])?));
    }
    let (_, d) = tape.value(causal_vec).rows_cols();
    let k = pool.len();
    let mut flat = Vec::with_capacity(k * d);
    for e in &pool.entries {
        if e.embedding.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "loss_var".into(),
                detail: format!("pool entry width {} vs causal width {d}", e.embedding.len()),
            });
        }
        flat.extend_from_slice(&e.embedding);
    }
    let s_stack = tape.constant(Tensor::matrix(k, d, flat)?);
    // broadcast c to every pool row: [1,d] -> [k,d] via gather
    let c_rows = tape.apply(OpKind::GatherRows { indices: vec![0; k] }, &[causal_vec])?;
    let combined = tape.apply(OpKind::Add, &[c_rows, s_stack])?;
    let probs = crate::objective::predict_prob(tape, store, combined)?;
    let losses = bce_rows(tape, probs, &vec![label; k])?;
    tape.apply(OpKind::SegmentSum { segments: vec![0; k], num_segments: 1 }, &[losses])
}
